//! Dataset generation and on-disk layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<split>/<clip_id>/frames    [F,H,W,3] f32 array file
//! <root>/<split>/<clip_id>/labels    [F,H,W]   u16 array file
//! <root>/<split>/<clip_id>/boxes.json
//! ```
//!
//! Clip `i` is generated from seed `root_seed + i`, so any clip can be
//! re-derived independently of the rest of the dataset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use super::{simulate_clip, SceneConfig, SynthError, VideoClip};
use crate::arrayio;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Split name plus the clip indices assigned to it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fraction: f64,
    pub clips: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: SceneConfig,
    pub root_seed: u64,
    pub count: usize,
    /// Keyed by split name; clip ids are global indices.
    pub splits: BTreeMap<String, SplitSpec>,
}

#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub root: PathBuf,
    pub manifest: Manifest,
}

fn clip_dir(root: &Path, split: &str, clip_id: usize) -> PathBuf {
    root.join(split).join(format!("{clip_id:05}"))
}

/// Allocates `count` clips to splits. Splits are processed in lexicographic
/// name order; each receives `floor(fraction * count)` clips and leftovers go
/// to the largest fractional remainders (ties broken by name order). Clip
/// indices are assigned sequentially in that same order.
fn allocate_splits(
    fractions: &BTreeMap<String, f64>,
    count: usize,
) -> Result<BTreeMap<String, SplitSpec>, SynthError> {
    let total: f64 = fractions.values().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(SynthError::Dataset(format!(
            "split fractions sum to {total}, expected 1"
        )));
    }
    if fractions.iter().any(|(_, &f)| f < 0.0) {
        return Err(SynthError::Dataset("negative split fraction".into()));
    }
    let mut sizes: Vec<(String, usize, f64)> = fractions
        .iter()
        .map(|(name, &f)| {
            let exact = f * count as f64;
            let base = exact.floor() as usize;
            (name.clone(), base, exact - base as f64)
        })
        .collect();
    let assigned: usize = sizes.iter().map(|(_, b, _)| b).sum();
    let mut leftover = count - assigned;
    // largest remainders first; BTreeMap iteration already fixed name order
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].2.partial_cmp(&sizes[a].2).unwrap());
    for idx in order {
        if leftover == 0 {
            break;
        }
        sizes[idx].1 += 1;
        leftover -= 1;
    }

    let mut splits = BTreeMap::new();
    let mut next = 0usize;
    for (name, size, _) in sizes {
        let clips: Vec<usize> = (next..next + size).collect();
        next += size;
        splits.insert(
            name.clone(),
            SplitSpec { fraction: fractions[&name], clips },
        );
    }
    Ok(splits)
}

fn write_clip(dir: &Path, clip: &VideoClip) -> Result<(), SynthError> {
    fs::create_dir_all(dir)?;
    arrayio::save(&dir.join("frames"), &clip.frames.clone().into_dyn())?;
    arrayio::save(&dir.join("labels"), &clip.labels.clone().into_dyn())?;
    let boxes_json: Vec<BTreeMap<String, [u32; 4]>> = clip
        .boxes
        .iter()
        .map(|m| m.iter().map(|(k, v)| (k.to_string(), *v)).collect())
        .collect();
    let f = fs::File::create(dir.join("boxes.json"))?;
    serde_json::to_writer_pretty(f, &boxes_json)
        .map_err(|e| SynthError::Dataset(format!("boxes encode: {e}")))?;
    Ok(())
}

/// Generates `count` clips under `root`, partitioned into the named splits.
/// Refuses to touch an existing non-empty directory unless `overwrite`.
pub fn generate_dataset(
    config: &SceneConfig,
    count: usize,
    root_seed: u64,
    split_fractions: &BTreeMap<String, f64>,
    root: &Path,
    overwrite: bool,
) -> Result<DatasetHandle, SynthError> {
    config.validate()?;
    if root.exists() && fs::read_dir(root)?.next().is_some() {
        if !overwrite {
            return Err(SynthError::Dataset(format!(
                "target directory {} is not empty (pass overwrite to replace it)",
                root.display()
            )));
        }
        fs::remove_dir_all(root)?;
    }
    fs::create_dir_all(root)?;

    let splits = allocate_splits(split_fractions, count)?;
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        config: config.clone(),
        root_seed,
        count,
        splits,
    };

    for (name, spec) in &manifest.splits {
        for &clip_id in &spec.clips {
            let clip = simulate_clip(config, root_seed + clip_id as u64)?;
            write_clip(&clip_dir(root, name, clip_id), &clip)?;
        }
    }

    let f = fs::File::create(root.join("manifest.json"))?;
    serde_json::to_writer_pretty(f, &manifest)
        .map_err(|e| SynthError::Dataset(format!("manifest encode: {e}")))?;
    Ok(DatasetHandle { root: root.to_path_buf(), manifest })
}

impl DatasetHandle {
    pub fn open(root: &Path) -> Result<Self, SynthError> {
        let f = fs::File::open(root.join("manifest.json"))
            .map_err(|e| SynthError::Dataset(format!("manifest: {e}")))?;
        let manifest: Manifest = serde_json::from_reader(f)
            .map_err(|e| SynthError::Dataset(format!("manifest decode: {e}")))?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(SynthError::Dataset(format!(
                "unsupported dataset format version {}",
                manifest.format_version
            )));
        }
        Ok(DatasetHandle { root: root.to_path_buf(), manifest })
    }

    pub fn split_clips(&self, split: &str) -> Result<&[usize], SynthError> {
        self.manifest
            .splits
            .get(split)
            .map(|s| s.clips.as_slice())
            .ok_or_else(|| SynthError::Dataset(format!("no split named {split}")))
    }

    pub fn clip_path(&self, split: &str, clip_id: usize) -> PathBuf {
        clip_dir(&self.root, split, clip_id)
    }

    /// Loads the frames of one clip without labels or boxes.
    pub fn load_frames(&self, split: &str, clip_id: usize) -> Result<Array4<f32>, SynthError> {
        let dir = self.clip_path(split, clip_id);
        let frames = arrayio::load::<f32>(&dir.join("frames"))?;
        frames
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| SynthError::Dataset(format!("frames shape: {e}")))
    }

    pub fn load_clip(&self, split: &str, clip_id: usize) -> Result<VideoClip, SynthError> {
        let dir = self.clip_path(split, clip_id);
        let frames = arrayio::load::<f32>(&dir.join("frames"))?
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| SynthError::Dataset(format!("frames shape: {e}")))?;
        let labels: Array3<u16> = arrayio::load::<u16>(&dir.join("labels"))?
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| SynthError::Dataset(format!("labels shape: {e}")))?;
        let f = fs::File::open(dir.join("boxes.json"))?;
        let raw: Vec<BTreeMap<String, [u32; 4]>> = serde_json::from_reader(f)
            .map_err(|e| SynthError::Dataset(format!("boxes decode: {e}")))?;
        let boxes = raw
            .into_iter()
            .map(|m| {
                m.into_iter()
                    .map(|(k, v)| {
                        k.parse::<u16>()
                            .map(|id| (id, v))
                            .map_err(|e| SynthError::Dataset(format!("box id {k}: {e}")))
                    })
                    .collect::<Result<BTreeMap<u16, [u32; 4]>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(VideoClip {
            frames,
            labels,
            boxes,
            seed: self.manifest.root_seed + clip_id as u64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fractions(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn split_arithmetic() {
        let cfg = SceneConfig { num_frames: 3, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(
            &cfg,
            10,
            0,
            &fractions(&[("train", 0.8), ("val", 0.2)]),
            &dir.path().join("ds"),
            false,
        )
        .unwrap();
        assert_eq!(ds.manifest.splits["train"].clips.len(), 8);
        assert_eq!(ds.manifest.splits["val"].clips.len(), 2);
    }

    #[test]
    fn manifests_byte_identical_across_runs() {
        let cfg = SceneConfig { num_frames: 2, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let fr = fractions(&[("train", 1.0)]);
        generate_dataset(&cfg, 3, 5, &fr, &dir.path().join("a"), false).unwrap();
        generate_dataset(&cfg, 3, 5, &fr, &dir.path().join("b"), false).unwrap();
        let a = fs::read(dir.path().join("a/manifest.json")).unwrap();
        let b = fs::read(dir.path().join("b/manifest.json")).unwrap();
        assert_eq!(a, b);
        // clip payloads identical too
        let fa = fs::read(dir.path().join("a/train/00001/frames")).unwrap();
        let fb = fs::read(dir.path().join("b/train/00001/frames")).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn clip_regenerates_independently() {
        let cfg = SceneConfig { num_frames: 4, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let root_seed = 1000;
        let ds = generate_dataset(
            &cfg,
            50,
            root_seed,
            &fractions(&[("train", 1.0)]),
            &dir.path().join("ds"),
            false,
        )
        .unwrap();
        let stored = ds.load_clip("train", 42).unwrap();
        let regen = simulate_clip(&cfg, root_seed + 42).unwrap();
        assert_eq!(stored.frames, regen.frames);
        assert_eq!(stored.labels, regen.labels);
        assert_eq!(stored.boxes, regen.boxes);
    }

    #[test]
    fn refuses_nonempty_target() {
        let cfg = SceneConfig { num_frames: 2, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("ds");
        fs::create_dir_all(&target).unwrap();
        fs::write(target.join("junk"), b"x").unwrap();
        let fr = fractions(&[("train", 1.0)]);
        let err = generate_dataset(&cfg, 1, 0, &fr, &target, false).unwrap_err();
        assert!(matches!(err, SynthError::Dataset(_)));
        // overwrite succeeds and removes the junk
        generate_dataset(&cfg, 1, 0, &fr, &target, true).unwrap();
        assert!(!target.join("junk").exists());
        assert!(target.join("manifest.json").exists());
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let err = allocate_splits(&fractions(&[("a", 0.5), ("b", 0.4)]), 10).unwrap_err();
        assert!(matches!(err, SynthError::Dataset(_)));
    }

    #[test]
    fn remainder_goes_to_largest_fraction() {
        let splits = allocate_splits(&fractions(&[("a", 0.5), ("b", 0.5)]), 5).unwrap();
        // 2.5 each; both remainders tie at 0.5, name order breaks the tie
        assert_eq!(splits["a"].clips.len(), 3);
        assert_eq!(splits["b"].clips.len(), 2);
        assert_eq!(
            splits["a"].clips.len() + splits["b"].clips.len(),
            5
        );
    }
}
