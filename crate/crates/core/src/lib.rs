//! Object-centric video modeling at desk scale.
//!
//! The crate covers the full pipeline: a deterministic synthetic video
//! generator with ground-truth segmentation, an unsupervised slot-based
//! object-centric video model, an autoregressive Transformer dynamics model
//! over slots, object-aware evaluation metrics, downstream readout heads,
//! and a CLI tying it together into reproducible experiments.

pub mod arrayio;
pub mod rng;
pub mod synthdata;

pub use rng::Rng;
