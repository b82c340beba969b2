//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Graph`] is a tape of eagerly evaluated nodes. Building an op computes
//! its value immediately and records what is needed for the backward pass;
//! [`Graph::backward`] then walks the tape in reverse, accumulating gradients
//! into leaf nodes. Graphs are cheap to create and are rebuilt every training
//! step.
//!
//! The engine is generic over the element type: training runs in `f32`,
//! gradient checking in `f64`.

use ndarray::{ArrayD, ArrayViewD, Axis, Ix2, IxDyn, Slice};
use num_traits::{Float, FromPrimitive};

/// Element scalar for graph arithmetic.
pub trait Real:
    ndarray::LinalgScalar
    + Float
    + FromPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).unwrap()
    }
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}
impl Real for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<F: Real> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(F),
    AddScalar,
    /// `x + b` where `b` broadcasts along the last axis.
    AddBias,
    MatMul,
    /// Batched matmul over flattened leading axes.
    Bmm,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Ln,
    Sqrt,
    Softmax {
        axis: usize,
    },
    LayerNorm {
        /// `1 / sqrt(var + eps)` per lane, shape = input with last axis len 1.
        inv_std: ArrayD<F>,
    },
    Conv2d {
        stride: usize,
        pad: usize,
    },
    Upsample2x,
    Reshape,
    Permute {
        axes: Vec<usize>,
    },
    BroadcastTo,
    Concat {
        axis: usize,
        /// Input extents along `axis`, in order.
        parts: Vec<usize>,
    },
    SliceAxis {
        axis: usize,
        start: usize,
    },
    SumAxis {
        axis: usize,
    },
    SumAll,
    MaxAxis {
        axis: usize,
        /// Flat index of the winning lane position per output element.
        argmax: Vec<usize>,
    },
}

struct Node<F: Real> {
    val: ArrayD<F>,
    op: Op<F>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Tape of eagerly evaluated tensor ops.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn assert_same_shape<F: Real>(a: &ArrayD<F>, b: &ArrayD<F>, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256) }
    }

    fn push(&mut self, val: ArrayD<F>, op: Op<F>, inputs: Vec<usize>, requires_grad: bool) -> Var {
        self.nodes.push(Node { val, op, inputs, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].val
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].val.shape()
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, val: ArrayD<F>) -> Var {
        self.push(val, Op::Leaf, vec![], false)
    }

    /// Leaf that accumulates gradients.
    pub fn param(&mut self, val: ArrayD<F>) -> Var {
        self.push(val, Op::Leaf, vec![], true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_same_shape(&self.nodes[a.0].val, &self.nodes[b.0].val, "add");
        let val = &self.nodes[a.0].val + &self.nodes[b.0].val;
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(val, Op::Add, vec![a.0, b.0], rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_same_shape(&self.nodes[a.0].val, &self.nodes[b.0].val, "sub");
        let val = &self.nodes[a.0].val - &self.nodes[b.0].val;
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(val, Op::Sub, vec![a.0, b.0], rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_same_shape(&self.nodes[a.0].val, &self.nodes[b.0].val, "mul");
        let val = &self.nodes[a.0].val * &self.nodes[b.0].val;
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(val, Op::Mul, vec![a.0, b.0], rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_same_shape(&self.nodes[a.0].val, &self.nodes[b.0].val, "div");
        let val = &self.nodes[a.0].val / &self.nodes[b.0].val;
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(val, Op::Div, vec![a.0, b.0], rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let val = self.nodes[a.0].val.mapv(|x| -x);
        let rg = self.nodes[a.0].requires_grad;
        self.push(val, Op::Neg, vec![a.0], rg)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let val = self.nodes[a.0].val.mapv(|x| x * c);
        let rg = self.nodes[a.0].requires_grad;
        self.push(val, Op::Scale(c), vec![a.0], rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let val = self.nodes[a.0].val.mapv(|x| x + c);
        let rg = self.nodes[a.0].requires_grad;
        self.push(val, Op::AddScalar, vec![a.0], rg)
    }

    /// `x + b`, with 1-D `b` broadcast along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].val;
        let bv = &self.nodes[b.0].val;
        assert_eq!(bv.ndim(), 1, "add_bias: bias must be 1-D");
        assert_eq!(
            xv.shape().last(),
            bv.shape().first(),
            "add_bias: last axis mismatch"
        );
        let val = xv + bv;
        let rg = self.any_grad(&[x.0, b.0]);
        self.push(val, Op::AddBias, vec![x.0, b.0], rg)
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].val.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-D");
        let bv = self.nodes[b.0].val.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-D");
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul: inner dim");
        let val = av.dot(&bv).into_dyn();
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(val, Op::MatMul, vec![a.0, b.0], rg)
    }

    /// Batched matmul: `[..., m, k] x [..., k, n] -> [..., m, n]` with equal
    /// leading axes.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let ash = self.nodes[a.0].val.shape().to_vec();
        let bsh = self.nodes[b.0].val.shape().to_vec();
        assert!(ash.len() >= 2 && ash.len() == bsh.len(), "bmm: rank");
        assert_eq!(&ash[..ash.len() - 2], &bsh[..bsh.len() - 2], "bmm: leading axes");
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        assert_eq!(k, k2, "bmm: inner dim");
        let batch: usize = ash[..ash.len() - 2].iter().product();

        let a3 = as_contiguous(&self.nodes[a.0].val);
        let b3 = as_contiguous(&self.nodes[b.0].val);
        let a3 = a3.to_shape((batch, m, k)).unwrap();
        let b3 = b3.to_shape((batch, k, n)).unwrap();
        let mut out = ndarray::Array3::<F>::zeros((batch, m, n));
        for l in 0..batch {
            let prod = a3.index_axis(Axis(0), l).dot(&b3.index_axis(Axis(0), l));
            out.index_axis_mut(Axis(0), l).assign(&prod);
        }
        let mut shape = ash[..ash.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let val = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(val, Op::Bmm, vec![a.0, b.0], rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let zero = F::zero();
        let val = self.nodes[a.0].val.mapv(|x| if x > zero { x } else { zero });
        let rg = self.nodes[a.0].requires_grad;
        self.push(val, Op::Relu, vec![a.0], rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = F::one();
        let val = self.nodes[a.0].val.mapv(|x| one / (one + (-x).exp()));
        let rg = self.nodes[a.0].requires_grad;
        self.push(val, Op::Sigmoid, vec![a.0], rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let val = self.nodes[a.0].val.mapv(|x| x.tanh());
        let rg = self.nodes[a.0].requires_grad;
        self.push(val, Op::Tanh, vec![a.0], rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let val = self.nodes[a.0].val.mapv(|x| x.exp());
        let rg = self.nodes[a.0].requires_grad;
        self.push(val, Op::Exp, vec![a.0], rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let val = self.nodes[a.0].val.mapv(|x| x.ln());
        let rg = self.nodes[a.0].requires_grad;
        self.push(val, Op::Ln, vec![a.0], rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let val = self.nodes[a.0].val.mapv(|x| x.sqrt());
        let rg = self.nodes[a.0].requires_grad;
        self.push(val, Op::Sqrt, vec![a.0], rg)
    }

    /// Softmax along `axis`, numerically stabilized per lane.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let mut val = self.nodes[a.0].val.clone();
        for mut lane in val.lanes_mut(Axis(axis)) {
            let max = lane.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for x in lane.iter_mut() {
                *x = (*x - max).exp();
                sum = sum + *x;
            }
            for x in lane.iter_mut() {
                *x = *x / sum;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(val, Op::Softmax { axis }, vec![a.0], rg)
    }

    /// Normalizes the last axis to zero mean and unit variance (population
    /// variance, epsilon inside the square root). Affine transforms are
    /// composed by the caller.
    pub fn layer_norm(&mut self, a: Var, eps: F) -> Var {
        let x = &self.nodes[a.0].val;
        let last = x.ndim() - 1;
        let d = F::from_usize(x.shape()[last]).unwrap();
        let mut val = x.clone();
        let mut inv_shape = x.shape().to_vec();
        inv_shape[last] = 1;
        let mut inv_std = ArrayD::<F>::zeros(IxDyn(&inv_shape));
        for (mut lane, ist) in val.lanes_mut(Axis(last)).into_iter().zip(inv_std.iter_mut()) {
            let mean = lane.iter().fold(F::zero(), |s, &v| s + v) / d;
            let var = lane.iter().fold(F::zero(), |s, &v| s + (v - mean) * (v - mean)) / d;
            let inv = F::one() / (var + eps).sqrt();
            *ist = inv;
            for v in lane.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(val, Op::LayerNorm { inv_std }, vec![a.0], rg)
    }

    /// NHWC convolution: `x [B,H,W,Cin]`, `w [KH,KW,Cin,Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = &self.nodes[x.0].val;
        let wv = &self.nodes[w.0].val;
        assert_eq!(xv.ndim(), 4, "conv2d: input rank");
        assert_eq!(wv.ndim(), 4, "conv2d: weight rank");
        assert_eq!(xv.shape()[3], wv.shape()[2], "conv2d: channels");
        let val = conv2d_forward(xv, wv, stride, pad);
        let rg = self.any_grad(&[x.0, w.0]);
        self.push(val, Op::Conv2d { stride, pad }, vec![x.0, w.0], rg)
    }

    /// Nearest-neighbour 2x spatial upsampling of `[B,H,W,C]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].val;
        assert_eq!(xv.ndim(), 4, "upsample2x: input rank");
        let (b, h, w, c) = dims4(xv);
        let mut out = ArrayD::<F>::zeros(IxDyn(&[b, 2 * h, 2 * w, c]));
        for bi in 0..b {
            for y in 0..h {
                for xw in 0..w {
                    for ch in 0..c {
                        let v = xv[[bi, y, xw, ch]];
                        out[[bi, 2 * y, 2 * xw, ch]] = v;
                        out[[bi, 2 * y, 2 * xw + 1, ch]] = v;
                        out[[bi, 2 * y + 1, 2 * xw, ch]] = v;
                        out[[bi, 2 * y + 1, 2 * xw + 1, ch]] = v;
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, Op::Upsample2x, vec![x.0], rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = as_contiguous(&self.nodes[a.0].val).into_owned();
        let n: usize = shape.iter().product();
        assert_eq!(v.len(), n, "reshape: element count");
        let val = v.into_shape_with_order(IxDyn(shape)).unwrap();
        let rg = self.nodes[a.0].requires_grad;
        self.push(val, Op::Reshape, vec![a.0], rg)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let val = self.nodes[a.0].val.clone().permuted_axes(IxDyn(axes));
        let val = as_contiguous(&val).into_owned();
        let rg = self.nodes[a.0].requires_grad;
        self.push(val, Op::Permute { axes: axes.to_vec() }, vec![a.0], rg)
    }

    /// Broadcasts to `shape` following ndarray (numpy) rules.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let val = self.nodes[a.0].val.broadcast(IxDyn(shape)).expect("broadcast_to").to_owned();
        let rg = self.nodes[a.0].requires_grad;
        self.push(val, Op::BroadcastTo, vec![a.0], rg)
    }

    pub fn concat(&mut self, axis: usize, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let views: Vec<ArrayViewD<F>> = vars.iter().map(|v| self.nodes[v.0].val.view()).collect();
        let val = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let parts = vars.iter().map(|v| self.nodes[v.0].val.shape()[axis]).collect();
        let ids: Vec<usize> = vars.iter().map(|v| v.0).collect();
        let rg = self.any_grad(&ids);
        self.push(val, Op::Concat { axis, parts }, ids, rg)
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let val = self.nodes[a.0]
            .val
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        let rg = self.nodes[a.0].requires_grad;
        self.push(val, Op::SliceAxis { axis, start }, vec![a.0], rg)
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let val = self.nodes[a.0].val.sum_axis(Axis(axis));
        let rg = self.nodes[a.0].requires_grad;
        self.push(val, Op::SumAxis { axis }, vec![a.0], rg)
    }

    /// Sums everything into shape `[1]`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].val.sum();
        let val = ArrayD::from_elem(IxDyn(&[1]), s);
        let rg = self.nodes[a.0].requires_grad;
        self.push(val, Op::SumAll, vec![a.0], rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].val.len();
        let s = self.sum_all(a);
        self.scale(s, F::one() / F::from_usize(n).unwrap())
    }

    /// Maximum along `axis` (axis removed). Ties break toward the lower
    /// index; gradients flow only to the winner.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Var {
        let x = &self.nodes[a.0].val;
        let mut out_shape = x.shape().to_vec();
        out_shape.remove(axis);
        let lanes: Vec<(F, usize)> = x
            .lanes(Axis(axis))
            .into_iter()
            .map(|lane| {
                let mut best = lane[0];
                let mut bi = 0usize;
                for (i, &v) in lane.iter().enumerate().skip(1) {
                    if v > best {
                        best = v;
                        bi = i;
                    }
                }
                (best, bi)
            })
            .collect();
        let vals: Vec<F> = lanes.iter().map(|&(v, _)| v).collect();
        let argmax: Vec<usize> = lanes.iter().map(|&(_, i)| i).collect();
        let val = ArrayD::from_shape_vec(IxDyn(&out_shape), vals).unwrap();
        let rg = self.nodes[a.0].requires_grad;
        self.push(val, Op::MaxAxis { axis, argmax }, vec![a.0], rg)
    }

    /// Mean squared error between two same-shape tensors, shape `[1]`.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Runs the backward pass from `loss` (any shape; seeded with ones) and
    /// returns per-node gradients for leaves that required them.
    pub fn backward(&mut self, loss: Var) -> Gradients<F> {
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(self.nodes[loss.0].val.raw_dim()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let keep_leaf = matches!(self.nodes[id].op, Op::Leaf);
            self.backprop_node(id, &g, &mut grads);
            if keep_leaf {
                grads[id] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn backprop_node(&self, id: usize, g: &ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        let node = &self.nodes[id];
        let inp = &node.inputs;
        let wants = |k: usize| self.nodes[inp[k]].requires_grad;
        let mut acc = |k: usize, delta: ArrayD<F>, grads: &mut [Option<ArrayD<F>>]| {
            let slot = &mut grads[inp[k]];
            match slot {
                Some(a) => *a += &delta,
                None => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                if wants(0) {
                    acc(0, g.clone(), grads);
                }
                if wants(1) {
                    acc(1, g.clone(), grads);
                }
            }
            Op::Sub => {
                if wants(0) {
                    acc(0, g.clone(), grads);
                }
                if wants(1) {
                    acc(1, g.mapv(|x| -x), grads);
                }
            }
            Op::Mul => {
                if wants(0) {
                    acc(0, g * &self.nodes[inp[1]].val, grads);
                }
                if wants(1) {
                    acc(1, g * &self.nodes[inp[0]].val, grads);
                }
            }
            Op::Div => {
                let b = &self.nodes[inp[1]].val;
                if wants(0) {
                    acc(0, g / b, grads);
                }
                if wants(1) {
                    let a = &self.nodes[inp[0]].val;
                    let gb = g * a / (b * b);
                    acc(1, gb.mapv(|x| -x), grads);
                }
            }
            Op::Neg => {
                if wants(0) {
                    acc(0, g.mapv(|x| -x), grads);
                }
            }
            Op::Scale(c) => {
                if wants(0) {
                    let c = *c;
                    acc(0, g.mapv(|x| x * c), grads);
                }
            }
            Op::AddScalar => {
                if wants(0) {
                    acc(0, g.clone(), grads);
                }
            }
            Op::AddBias => {
                if wants(0) {
                    acc(0, g.clone(), grads);
                }
                if wants(1) {
                    let d = g.ndim();
                    let mut gb = g.clone();
                    for _ in 0..d - 1 {
                        gb = gb.sum_axis(Axis(0));
                    }
                    acc(1, gb, grads);
                }
            }
            Op::MatMul => {
                let a = self.nodes[inp[0]].val.view().into_dimensionality::<Ix2>().unwrap();
                let b = self.nodes[inp[1]].val.view().into_dimensionality::<Ix2>().unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                if wants(0) {
                    acc(0, g2.dot(&b.t()).into_dyn(), grads);
                }
                if wants(1) {
                    acc(1, a.t().dot(&g2).into_dyn(), grads);
                }
            }
            Op::Bmm => {
                let ash = self.nodes[inp[0]].val.shape().to_vec();
                let bsh = self.nodes[inp[1]].val.shape().to_vec();
                let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let n = bsh[bsh.len() - 1];
                let batch: usize = ash[..ash.len() - 2].iter().product();
                let a3b = as_contiguous(&self.nodes[inp[0]].val);
                let b3b = as_contiguous(&self.nodes[inp[1]].val);
                let a3 = a3b.to_shape((batch, m, k)).unwrap();
                let b3 = b3b.to_shape((batch, k, n)).unwrap();
                let gc = as_contiguous(g);
                let g3 = gc.to_shape((batch, m, n)).unwrap();
                if wants(0) {
                    let mut da = ndarray::Array3::<F>::zeros((batch, m, k));
                    for l in 0..batch {
                        let prod = g3.index_axis(Axis(0), l).dot(&b3.index_axis(Axis(0), l).t());
                        da.index_axis_mut(Axis(0), l).assign(&prod);
                    }
                    acc(0, da.into_shape_with_order(IxDyn(&ash)).unwrap(), grads);
                }
                if wants(1) {
                    let mut db = ndarray::Array3::<F>::zeros((batch, k, n));
                    for l in 0..batch {
                        let prod = a3.index_axis(Axis(0), l).t().dot(&g3.index_axis(Axis(0), l));
                        db.index_axis_mut(Axis(0), l).assign(&prod);
                    }
                    acc(1, db.into_shape_with_order(IxDyn(&bsh)).unwrap(), grads);
                }
            }
            Op::Relu => {
                if wants(0) {
                    let x = &self.nodes[inp[0]].val;
                    let zero = F::zero();
                    let mut d = g.clone();
                    ndarray::Zip::from(&mut d).and(x).for_each(|dv, &xv| {
                        if xv <= zero {
                            *dv = zero;
                        }
                    });
                    acc(0, d, grads);
                }
            }
            Op::Sigmoid => {
                if wants(0) {
                    let y = &node.val;
                    let one = F::one();
                    acc(0, g * &y.mapv(|v| v * (one - v)), grads);
                }
            }
            Op::Tanh => {
                if wants(0) {
                    let y = &node.val;
                    let one = F::one();
                    acc(0, g * &y.mapv(|v| one - v * v), grads);
                }
            }
            Op::Exp => {
                if wants(0) {
                    acc(0, g * &node.val, grads);
                }
            }
            Op::Ln => {
                if wants(0) {
                    acc(0, g / &self.nodes[inp[0]].val, grads);
                }
            }
            Op::Sqrt => {
                if wants(0) {
                    let half = F::from_f64(0.5);
                    acc(0, g * &node.val.mapv(|y| half / y), grads);
                }
            }
            Op::Softmax { axis } => {
                if wants(0) {
                    let y = &node.val;
                    let mut d = g * y;
                    // subtract y * sum(g*y) per lane
                    for (mut dl, yl) in d
                        .lanes_mut(Axis(*axis))
                        .into_iter()
                        .zip(y.lanes(Axis(*axis)))
                    {
                        let s = dl.iter().fold(F::zero(), |acc, &v| acc + v);
                        for (dv, &yv) in dl.iter_mut().zip(yl.iter()) {
                            *dv = *dv - yv * s;
                        }
                    }
                    acc(0, d, grads);
                }
            }
            Op::LayerNorm { inv_std } => {
                if wants(0) {
                    let xhat = &node.val;
                    let last = xhat.ndim() - 1;
                    let dn = F::from_usize(xhat.shape()[last]).unwrap();
                    let mut d = g.clone();
                    for ((mut dl, xl), &ist) in d
                        .lanes_mut(Axis(last))
                        .into_iter()
                        .zip(xhat.lanes(Axis(last)))
                        .zip(inv_std.iter())
                    {
                        let mean_g = dl.iter().fold(F::zero(), |a, &v| a + v) / dn;
                        let mean_gx = dl
                            .iter()
                            .zip(xl.iter())
                            .fold(F::zero(), |a, (&gv, &xv)| a + gv * xv)
                            / dn;
                        for (dv, &xv) in dl.iter_mut().zip(xl.iter()) {
                            *dv = (*dv - mean_g - xv * mean_gx) * ist;
                        }
                    }
                    acc(0, d, grads);
                }
            }
            Op::Conv2d { stride, pad } => {
                let x = &self.nodes[inp[0]].val;
                let w = &self.nodes[inp[1]].val;
                let (dx, dw) = conv2d_backward(x, w, g, *stride, *pad, wants(0), wants(1));
                if let Some(dx) = dx {
                    acc(0, dx, grads);
                }
                if let Some(dw) = dw {
                    acc(1, dw, grads);
                }
            }
            Op::Upsample2x => {
                if wants(0) {
                    let (b, h2, w2, c) = dims4(g);
                    let (h, w) = (h2 / 2, w2 / 2);
                    let mut d = ArrayD::<F>::zeros(IxDyn(&[b, h, w, c]));
                    for bi in 0..b {
                        for y in 0..h2 {
                            for xw in 0..w2 {
                                for ch in 0..c {
                                    d[[bi, y / 2, xw / 2, ch]] =
                                        d[[bi, y / 2, xw / 2, ch]] + g[[bi, y, xw, ch]];
                                }
                            }
                        }
                    }
                    acc(0, d, grads);
                }
            }
            Op::Reshape => {
                if wants(0) {
                    let orig = self.nodes[inp[0]].val.shape();
                    let d = as_contiguous(g)
                        .into_owned()
                        .into_shape_with_order(IxDyn(orig))
                        .unwrap();
                    acc(0, d, grads);
                }
            }
            Op::Permute { axes } => {
                if wants(0) {
                    let mut inv = vec![0usize; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    let d = g.clone().permuted_axes(IxDyn(&inv));
                    acc(0, as_contiguous(&d).into_owned(), grads);
                }
            }
            Op::BroadcastTo => {
                if wants(0) {
                    let in_shape = self.nodes[inp[0]].val.shape().to_vec();
                    let mut d = g.clone();
                    // sum out prepended axes
                    while d.ndim() > in_shape.len() {
                        d = d.sum_axis(Axis(0));
                    }
                    // sum axes that were broadcast from 1
                    for (ax, (&di, &si)) in d.shape().to_vec().iter().zip(&in_shape).enumerate() {
                        if si == 1 && *di != 1 {
                            let summed = d.sum_axis(Axis(ax));
                            d = summed.insert_axis(Axis(ax));
                        }
                    }
                    acc(0, d, grads);
                }
            }
            Op::Concat { axis, parts } => {
                let mut start = 0usize;
                for (k, &len) in parts.iter().enumerate() {
                    if wants(k) {
                        let d = g
                            .slice_axis(Axis(*axis), Slice::from(start..start + len))
                            .to_owned();
                        acc(k, d, grads);
                    }
                    start += len;
                }
            }
            Op::SliceAxis { axis, start } => {
                if wants(0) {
                    let mut d = ArrayD::<F>::zeros(self.nodes[inp[0]].val.raw_dim());
                    let len = g.shape()[*axis];
                    d.slice_axis_mut(Axis(*axis), Slice::from(*start..start + len))
                        .assign(g);
                    acc(0, d, grads);
                }
            }
            Op::SumAxis { axis } => {
                if wants(0) {
                    let in_shape = self.nodes[inp[0]].val.shape();
                    let expanded = g.clone().insert_axis(Axis(*axis));
                    let d = expanded.broadcast(IxDyn(in_shape)).unwrap().to_owned();
                    acc(0, d, grads);
                }
            }
            Op::SumAll => {
                if wants(0) {
                    let s = g[[0]];
                    let d = ArrayD::from_elem(self.nodes[inp[0]].val.raw_dim(), s);
                    acc(0, d, grads);
                }
            }
            Op::MaxAxis { axis, argmax } => {
                if wants(0) {
                    let x = &self.nodes[inp[0]].val;
                    let mut d = ArrayD::<F>::zeros(x.raw_dim());
                    for ((mut lane, &am), &gv) in d
                        .lanes_mut(Axis(*axis))
                        .into_iter()
                        .zip(argmax.iter())
                        .zip(g.iter())
                    {
                        lane[am] = gv;
                    }
                    acc(0, d, grads);
                }
            }
        }
    }
}

/// Gradients keyed by the node handles that produced them.
pub struct Gradients<F: Real> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn dims4<F: Real>(x: &ArrayD<F>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

fn as_contiguous<F: Real>(x: &ArrayD<F>) -> std::borrow::Cow<'_, ArrayD<F>> {
    if x.is_standard_layout() {
        std::borrow::Cow::Borrowed(x)
    } else {
        std::borrow::Cow::Owned(x.as_standard_layout().to_owned())
    }
}

fn out_hw(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
}

/// Lowers `x` into the im2col matrix `[B*OH*OW, KH*KW*Cin]`.
fn im2col<F: Real>(
    x: &ArrayD<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array2<F> {
    let (b, h, w, cin) = dims4(x);
    let (oh, ow) = out_hw(h, w, kh, kw, stride, pad);
    let xc = as_contiguous(x);
    let xs = xc.as_slice().unwrap();
    let mut cols = ndarray::Array2::<F>::zeros((b * oh * ow, kh * kw * cin));
    let cs = cols.as_slice_mut().unwrap();
    let row_len = kh * kw * cin;
    for bi in 0..b {
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad as isize;
                let row = ((bi * oh + oy) * ow + ox) * row_len;
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue; // zero padding
                    }
                    for kx in 0..kw {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * cin;
                        let dst = row + (ky * kw + kx) * cin;
                        cs[dst..dst + cin].copy_from_slice(&xs[src..src + cin]);
                    }
                }
            }
        }
    }
    cols
}

fn conv2d_forward<F: Real>(x: &ArrayD<F>, w: &ArrayD<F>, stride: usize, pad: usize) -> ArrayD<F> {
    let (b, h, ww, _cin) = dims4(x);
    let ws = w.shape();
    let (kh, kw, _cin2, cout) = (ws[0], ws[1], ws[2], ws[3]);
    let (oh, ow) = out_hw(h, ww, kh, kw, stride, pad);
    let cols = im2col(x, kh, kw, stride, pad);
    let wc = as_contiguous(w);
    let wmat = wc.to_shape((kh * kw * ws[2], cout)).unwrap();
    let out = cols.dot(&wmat);
    out.into_shape_with_order(IxDyn(&[b, oh, ow, cout])).unwrap()
}

fn conv2d_backward<F: Real>(
    x: &ArrayD<F>,
    w: &ArrayD<F>,
    g: &ArrayD<F>,
    stride: usize,
    pad: usize,
    want_dx: bool,
    want_dw: bool,
) -> (Option<ArrayD<F>>, Option<ArrayD<F>>) {
    let (b, h, ww, cin) = dims4(x);
    let ws = w.shape().to_vec();
    let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
    let (oh, ow) = out_hw(h, ww, kh, kw, stride, pad);
    let gc = as_contiguous(g);
    let g2 = gc.to_shape((b * oh * ow, cout)).unwrap();

    let dw = if want_dw {
        let cols = im2col(x, kh, kw, stride, pad);
        let dwm = cols.t().dot(&g2);
        Some(dwm.into_shape_with_order(IxDyn(&ws)).unwrap())
    } else {
        None
    };

    let dx = if want_dx {
        let wc = as_contiguous(w);
        let wmat = wc.to_shape((kh * kw * cin, cout)).unwrap();
        let dcols = g2.dot(&wmat.t()); // [B*OH*OW, KH*KW*Cin]
        let mut dx = ArrayD::<F>::zeros(IxDyn(&[b, h, ww, cin]));
        let dxs = dx.as_slice_mut().unwrap();
        let dcs = dcols.as_slice().unwrap();
        let row_len = kh * kw * cin;
        for bi in 0..b {
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ox in 0..ow {
                    let ix0 = (ox * stride) as isize - pad as isize;
                    let row = ((bi * oh + oy) * ow + ox) * row_len;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= ww as isize {
                                continue;
                            }
                            let dst = ((bi * h + iy as usize) * ww + ix as usize) * cin;
                            let src = row + (ky * kw + kx) * cin;
                            for c in 0..cin {
                                dxs[dst + c] = dxs[dst + c] + dcs[src + c];
                            }
                        }
                    }
                }
            }
        }
        Some(dx)
    } else {
        None
    };
    (dx, dw)
}

#[cfg(test)]
mod tests;
