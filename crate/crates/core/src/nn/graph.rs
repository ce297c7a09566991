//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! the recipe needed to push gradients back to its inputs. Nodes are created in
//! topological order, so [`Graph::backward`] is a single reverse sweep.
//! Parameters are borrowed from a [`ParamStore`] rather than copied.
//!
//! Shape errors inside the tape are programming errors and panic; the block
//! constructors and public entry points validate user-facing shapes first.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use super::params::{ParamId, ParamStore};
use crate::imgproc::sobel_components;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, groups: usize },
    Upsample2(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    Guide { x: Var, w: Var, b: Var },
    ChannelGate { x: Var, g: Var },
    SpatialGate { x: Var, m: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(f64, f64)> },
    LayerNormC { x: Var, gamma: Var, beta: Var, stats: Vec<(f64, f64)> },
    Linear { x: Var, w: Var, b: Var },
    AvgPool(Var),
    MeanMax { x: Var, argmax: Vec<usize> },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    SoftmaxRows(Var),
    Sobel(Var),
    L1Mean { x: Var, target: Tensor },
    Sum(Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    /// A graph without parameters; only constants can be leaves.
    pub fn new() -> Self {
        Graph { store: None, nodes: Vec::new(), param_vars: Vec::new() }
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph { store: Some(store), nodes: Vec::new(), param_vars: vec![None; store.len()] }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    ///
    /// # Panics
    ///
    /// Panics if the graph was built without a parameter store.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        self.nodes.push(Node { value: Cow::Borrowed(store.get(id)), op: Op::Leaf });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape(), data).unwrap();
        self.push(t, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape(), data).unwrap();
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape).expect("reshape: element count");
        self.push(t, Op::Reshape(a))
    }

    /// 2-D convolution (cross-correlation) with replicate padding of `k / 2`.
    ///
    /// `x` is `(Cin, H, W)`, `w` is `(Cout, Cin / groups, k, k)` with odd `k`.
    /// Output is `(Cout, (H - 1) / stride + 1, (W - 1) / stride + 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, groups: usize) -> Var {
        let t = conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, groups);
        self.push(t, Op::Conv { x, w, b, stride, groups })
    }

    /// Nearest-neighbour x2 upsampling of a `(C, H, W)` map.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (c, h, w) = tx.dims3();
        let src = tx.data();
        let mut out = Vec::with_capacity(4 * c * h * w);
        for ch in 0..c {
            for y in 0..2 * h {
                let row = &src[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                for xx in 0..2 * w {
                    out.push(row[xx / 2]);
                }
            }
        }
        let t = Tensor::new(&[c, 2 * h, 2 * w], out).unwrap();
        self.push(t, Op::Upsample2(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(t, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| 0.5 * v * (1.0 + libm::erf(v * core::f64::consts::FRAC_1_SQRT_2)));
        self.push(t, Op::Gelu(x))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &tail[..], "concat: trailing shape mismatch");
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let t = Tensor::new(&shape, data).unwrap();
        self.push(t, Op::Concat(parts.to_vec()))
    }

    /// Slice `[start, start + len)` along the leading axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        let lead = tx.shape()[0];
        assert!(start + len <= lead, "narrow: {start}+{len} exceeds {lead}");
        let block: usize = tx.shape()[1..].iter().product();
        let data = tx.data()[start * block..(start + len) * block].to_vec();
        let mut shape = tx.shape().to_vec();
        shape[0] = len;
        let t = Tensor::new(&shape, data).unwrap();
        self.push(t, Op::Narrow { x, start })
    }

    /// Prompt guidance: `x * w[c] + b[c] + x` with per-channel `w`, `b`.
    pub fn guide(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (c, h, wd) = tx.dims3();
        assert!(tw.len() == c && tb.len() == c, "guide: expected {c} scale/shift values");
        let n = h * wd;
        let mut out = Vec::with_capacity(c * n);
        for ch in 0..c {
            let (s, o) = (tw.data()[ch], tb.data()[ch]);
            out.extend(tx.data()[ch * n..(ch + 1) * n].iter().map(|&v| v * s + o + v));
        }
        let t = Tensor::new(tx.shape(), out).unwrap();
        self.push(t, Op::Guide { x, w, b })
    }

    /// `x * g[c]` for a per-channel gate `g`.
    pub fn channel_gate(&mut self, x: Var, g: Var) -> Var {
        let (tx, tg) = (self.value(x), self.value(g));
        let (c, h, w) = tx.dims3();
        assert_eq!(tg.len(), c, "channel_gate: gate length");
        let n = h * w;
        let mut out = Vec::with_capacity(c * n);
        for ch in 0..c {
            let s = tg.data()[ch];
            out.extend(tx.data()[ch * n..(ch + 1) * n].iter().map(|&v| v * s));
        }
        let t = Tensor::new(tx.shape(), out).unwrap();
        self.push(t, Op::ChannelGate { x, g })
    }

    /// `x[c, p] * m[p]` for a `(1, H, W)` mask `m`.
    pub fn spatial_gate(&mut self, x: Var, m: Var) -> Var {
        let (tx, tm) = (self.value(x), self.value(m));
        let (c, h, w) = tx.dims3();
        assert_eq!(tm.shape(), &[1, h, w], "spatial_gate: mask shape");
        let n = h * w;
        let mut out = Vec::with_capacity(c * n);
        for ch in 0..c {
            out.extend(tx.data()[ch * n..(ch + 1) * n].iter().zip(tm.data()).map(|(v, s)| v * s));
        }
        let t = Tensor::new(tx.shape(), out).unwrap();
        self.push(t, Op::SpatialGate { x, m })
    }

    /// Group normalization of a `(C, H, W)` map with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (c, h, w) = tx.dims3();
        assert!(groups > 0 && c % groups == 0, "group_norm: {groups} groups for {c} channels");
        assert!(tg.len() == c && tb.len() == c, "group_norm: affine length");
        let per = c / groups * h * w;
        let mut stats = Vec::with_capacity(groups);
        let mut out = vec![0.0; c * h * w];
        for g in 0..groups {
            let seg = &tx.data()[g * per..(g + 1) * per];
            let (mean, rstd) = moments(seg.iter().copied(), per);
            stats.push((mean, rstd));
            for (i, &v) in seg.iter().enumerate() {
                let ch = (g * per + i) / (h * w);
                out[g * per + i] = (v - mean) * rstd * tg.data()[ch] + tb.data()[ch];
            }
        }
        let t = Tensor::new(tx.shape(), out).unwrap();
        self.push(t, Op::GroupNorm { x, gamma, beta, groups, stats })
    }

    /// Layer normalization across channels at every pixel, per-channel affine.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (c, h, w) = tx.dims3();
        assert!(tg.len() == c && tb.len() == c, "layer_norm: affine length");
        let n = h * w;
        let d = tx.data();
        let mut stats = Vec::with_capacity(n);
        let mut out = vec![0.0; c * n];
        for p in 0..n {
            let (mean, rstd) = moments((0..c).map(|ch| d[ch * n + p]), c);
            stats.push((mean, rstd));
            for ch in 0..c {
                out[ch * n + p] = (d[ch * n + p] - mean) * rstd * tg.data()[ch] + tb.data()[ch];
            }
        }
        let t = Tensor::new(tx.shape(), out).unwrap();
        self.push(t, Op::LayerNormC { x, gamma, beta, stats })
    }

    /// `w x + b` for a vector `x` of length `in`, `w` shaped `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let [o, i] = tw.shape()[..] else { panic!("linear: weight must be rank 2") };
        assert_eq!(tx.len(), i, "linear: input length");
        assert_eq!(tb.len(), o, "linear: bias length");
        let out = (0..o)
            .map(|r| {
                let row = &tw.data()[r * i..(r + 1) * i];
                tb.data()[r] + row.iter().zip(tx.data()).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let t = Tensor::new(&[o], out).unwrap();
        self.push(t, Op::Linear { x, w, b })
    }

    /// Global average pooling `(C, H, W) -> (C)`.
    pub fn avg_pool(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (c, h, w) = tx.dims3();
        let n = (h * w) as f64;
        let out = (0..c).map(|ch| tx.plane(ch).iter().sum::<f64>() / n).collect();
        let t = Tensor::new(&[c], out).unwrap();
        self.push(t, Op::AvgPool(x))
    }

    /// Channel-wise mean and max maps stacked as `(2, H, W)`. Ties in the max
    /// resolve to the lowest channel index.
    pub fn channel_mean_max(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (c, h, w) = tx.dims3();
        let n = h * w;
        let d = tx.data();
        let mut out = vec![0.0; 2 * n];
        let mut argmax = vec![0usize; n];
        for p in 0..n {
            let mut sum = 0.0;
            let mut best = d[p];
            for ch in 0..c {
                let v = d[ch * n + p];
                sum += v;
                if v > best {
                    best = v;
                    argmax[p] = ch;
                }
            }
            out[p] = sum / c as f64;
            out[n + p] = best;
        }
        let t = Tensor::new(&[2, h, w], out).unwrap();
        self.push(t, Op::MeanMax { x, argmax })
    }

    /// Matrix product of `(m, k)` and `(k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let [m, k] = ta.shape()[..] else { panic!("matmul: lhs must be rank 2") };
        let [k2, n] = tb.shape()[..] else { panic!("matmul: rhs must be rank 2") };
        assert_eq!(k, k2, "matmul: inner dimension");
        let t = Tensor::new(&[m, n], matmul_nn(ta.data(), tb.data(), m, k, n)).unwrap();
        self.push(t, Op::MatMul(a, b))
    }

    /// `a * b^T` for `a` of shape `(m, k)` and `b` of shape `(n, k)`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let [m, k] = ta.shape()[..] else { panic!("matmul_nt: lhs must be rank 2") };
        let [n, k2] = tb.shape()[..] else { panic!("matmul_nt: rhs must be rank 2") };
        assert_eq!(k, k2, "matmul_nt: inner dimension");
        let t = Tensor::new(&[m, n], matmul_nt(ta.data(), tb.data(), m, k, n)).unwrap();
        self.push(t, Op::MatMulNT(a, b))
    }

    /// Row-wise softmax of an `(m, n)` matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let [m, n] = tx.shape()[..] else { panic!("softmax_rows: rank 2 expected") };
        let mut out = tx.data().to_vec();
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(&[m, n], out).unwrap();
        self.push(t, Op::SoftmaxRows(x))
    }

    /// `|G_x| + |G_y|` Sobel magnitude of a `(1, H, W)` map.
    pub fn sobel(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (c, h, w) = tx.dims3();
        assert_eq!(c, 1, "sobel: single channel expected");
        let (gx, gy) = sobel_components(tx.data(), h, w);
        let out = gx.iter().zip(&gy).map(|(a, b)| libm::fabs(*a) + libm::fabs(*b)).collect();
        let t = Tensor::new(tx.shape(), out).unwrap();
        self.push(t, Op::Sobel(x))
    }

    /// `mean(|x - target|)` as a scalar. `sign(0)` is taken as 0.
    pub fn l1_mean(&mut self, x: Var, target: Tensor) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.shape(), target.shape(), "l1_mean: shape mismatch");
        let n = tx.len() as f64;
        let s: f64 = tx.data().iter().zip(target.data()).map(|(a, b)| libm::fabs(a - b)).sum();
        self.push(Tensor::scalar(s / n), Op::L1Mean { x, target })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Branch choices of every non-smooth operation in the graph. Two graphs
    /// of the same computation with equal active sets lie on the same smooth
    /// piece of the loss.
    pub fn active_set(&self) -> ActiveSet {
        let mut set = ActiveSet::default();
        let sign = |v: f64| (v > 0.0) as i8 - (v < 0.0) as i8;
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu(x, _) => set.leaky.extend(self.value(*x).data().iter().map(|&v| v > 0.0)),
                Op::MeanMax { argmax, .. } => set.argmax.extend_from_slice(argmax),
                Op::Sobel(x) => {
                    let (_, h, w) = self.value(*x).dims3();
                    let (gx, gy) = sobel_components(self.value(*x).data(), h, w);
                    set.abs.extend(gx.iter().chain(&gy).map(|&v| sign(v)));
                }
                Op::L1Mean { x, target } => {
                    set.abs.extend(self.value(*x).data().iter().zip(target.data()).map(|(a, b)| sign(a - b)));
                }
                _ => {}
            }
        }
        set
    }

    /// Gradients of the scalar `root` with respect to every leaf.
    ///
    /// # Panics
    ///
    /// Panics if `root` does not hold exactly one element.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gout);
                continue;
            }
            self.backward_node(&node.op, &node.value, &gout, &mut grads);
        }
        Gradients { grads }
    }

    fn backward_node(&self, op: &Op, out: &Tensor, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(self.grad_slot(grads, *a), gout);
                add_into(self.grad_slot(grads, *b), gout);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let ga: Vec<f64> = gout.iter().zip(tb).map(|(g, v)| g * v).collect();
                let gb: Vec<f64> = gout.iter().zip(ta).map(|(g, v)| g * v).collect();
                add_into(self.grad_slot(grads, *a), &ga);
                add_into(self.grad_slot(grads, *b), &gb);
            }
            Op::Scale(a, s) => {
                let slot = self.grad_slot(grads, *a);
                for (d, g) in slot.iter_mut().zip(gout) {
                    *d += g * s;
                }
            }
            Op::Reshape(a) => add_into(self.grad_slot(grads, *a), gout),
            Op::Conv { x, w, b, stride, groups } => {
                let (dx, dw, db) = conv_backward(self.value(*x), self.value(*w), b.is_some(), *stride, *groups, gout);
                add_into(self.grad_slot(grads, *x), &dx);
                add_into(self.grad_slot(grads, *w), &dw);
                if let Some(b) = b {
                    add_into(self.grad_slot(grads, *b), &db);
                }
            }
            Op::Upsample2(x) => {
                let (c, h, w) = self.value(*x).dims3();
                let slot = self.grad_slot(grads, *x);
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            slot[(ch * h + y / 2) * w + xx / 2] += gout[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let tx = self.value(*x).data();
                let slot = self.grad_slot(grads, *x);
                for ((d, g), v) in slot.iter_mut().zip(gout).zip(tx) {
                    *d += if *v > 0.0 { *g } else { slope * g };
                }
            }
            Op::Sigmoid(x) => {
                let slot = self.grad_slot(grads, *x);
                for ((d, g), y) in slot.iter_mut().zip(gout).zip(out.data()) {
                    *d += g * y * (1.0 - y);
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                let slot = self.grad_slot(grads, *x);
                let inv_sqrt_2pi = 0.5 * core::f64::consts::FRAC_2_SQRT_PI * core::f64::consts::FRAC_1_SQRT_2;
                for ((d, g), &v) in slot.iter_mut().zip(gout).zip(tx) {
                    let cdf = 0.5 * (1.0 + libm::erf(v * core::f64::consts::FRAC_1_SQRT_2));
                    let pdf = inv_sqrt_2pi * libm::exp(-0.5 * v * v);
                    *d += g * (cdf + v * pdf);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    add_into(self.grad_slot(grads, *p), &gout[offset..offset + n]);
                    offset += n;
                }
            }
            Op::Narrow { x, start } => {
                let tx = self.value(*x);
                let block: usize = tx.shape()[1..].iter().product();
                let slot = self.grad_slot(grads, *x);
                add_into(&mut slot[start * block..start * block + gout.len()], gout);
            }
            Op::Guide { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (c, h, wd) = tx.dims3();
                let n = h * wd;
                let mut dx = vec![0.0; c * n];
                let mut dw = vec![0.0; c];
                let mut db = vec![0.0; c];
                for ch in 0..c {
                    let s = tw.data()[ch] + 1.0;
                    for p in 0..n {
                        let g = gout[ch * n + p];
                        dx[ch * n + p] = g * s;
                        dw[ch] += g * tx.data()[ch * n + p];
                        db[ch] += g;
                    }
                }
                add_into(self.grad_slot(grads, *x), &dx);
                add_into(self.grad_slot(grads, *w), &dw);
                add_into(self.grad_slot(grads, *b), &db);
            }
            Op::ChannelGate { x, g } => {
                let (tx, tg) = (self.value(*x), self.value(*g));
                let (c, h, w) = tx.dims3();
                let n = h * w;
                let mut dx = vec![0.0; c * n];
                let mut dg = vec![0.0; c];
                for ch in 0..c {
                    for p in 0..n {
                        let go = gout[ch * n + p];
                        dx[ch * n + p] = go * tg.data()[ch];
                        dg[ch] += go * tx.data()[ch * n + p];
                    }
                }
                add_into(self.grad_slot(grads, *x), &dx);
                add_into(self.grad_slot(grads, *g), &dg);
            }
            Op::SpatialGate { x, m } => {
                let (tx, tm) = (self.value(*x), self.value(*m));
                let (c, h, w) = tx.dims3();
                let n = h * w;
                let mut dx = vec![0.0; c * n];
                let mut dm = vec![0.0; n];
                for ch in 0..c {
                    for p in 0..n {
                        let go = gout[ch * n + p];
                        dx[ch * n + p] = go * tm.data()[p];
                        dm[p] += go * tx.data()[ch * n + p];
                    }
                }
                add_into(self.grad_slot(grads, *x), &dx);
                add_into(self.grad_slot(grads, *m), &dm);
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let (tx, tg) = (self.value(*x), self.value(*gamma));
                let (c, h, w) = tx.dims3();
                let hw = h * w;
                let per = c / groups * hw;
                let mut dx = vec![0.0; c * hw];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (g, &(mean, rstd)) in stats.iter().enumerate() {
                    let idx = |i: usize| g * per + i;
                    let mut sum_dy = 0.0;
                    let mut sum_dy_y = 0.0;
                    let mut ys = Vec::with_capacity(per);
                    let mut dys = Vec::with_capacity(per);
                    for i in 0..per {
                        let ch = idx(i) / hw;
                        let y = (tx.data()[idx(i)] - mean) * rstd;
                        let go = gout[idx(i)];
                        dgamma[ch] += go * y;
                        dbeta[ch] += go;
                        let dy = go * tg.data()[ch];
                        sum_dy += dy;
                        sum_dy_y += dy * y;
                        ys.push(y);
                        dys.push(dy);
                    }
                    let (mdy, mdyy) = (sum_dy / per as f64, sum_dy_y / per as f64);
                    for i in 0..per {
                        dx[idx(i)] = rstd * (dys[i] - mdy - ys[i] * mdyy);
                    }
                }
                add_into(self.grad_slot(grads, *x), &dx);
                add_into(self.grad_slot(grads, *gamma), &dgamma);
                add_into(self.grad_slot(grads, *beta), &dbeta);
            }
            Op::LayerNormC { x, gamma, beta, stats } => {
                let (tx, tg) = (self.value(*x), self.value(*gamma));
                let (c, h, w) = tx.dims3();
                let n = h * w;
                let mut dx = vec![0.0; c * n];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut ys = vec![0.0; c];
                let mut dys = vec![0.0; c];
                for (p, &(mean, rstd)) in stats.iter().enumerate() {
                    let mut sum_dy = 0.0;
                    let mut sum_dy_y = 0.0;
                    for ch in 0..c {
                        let y = (tx.data()[ch * n + p] - mean) * rstd;
                        let go = gout[ch * n + p];
                        dgamma[ch] += go * y;
                        dbeta[ch] += go;
                        let dy = go * tg.data()[ch];
                        sum_dy += dy;
                        sum_dy_y += dy * y;
                        ys[ch] = y;
                        dys[ch] = dy;
                    }
                    let (mdy, mdyy) = (sum_dy / c as f64, sum_dy_y / c as f64);
                    for ch in 0..c {
                        dx[ch * n + p] = rstd * (dys[ch] - mdy - ys[ch] * mdyy);
                    }
                }
                add_into(self.grad_slot(grads, *x), &dx);
                add_into(self.grad_slot(grads, *gamma), &dgamma);
                add_into(self.grad_slot(grads, *beta), &dbeta);
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let [o, i] = tw.shape()[..] else { unreachable!() };
                let mut dx = vec![0.0; i];
                let mut dw = vec![0.0; o * i];
                for r in 0..o {
                    let g = gout[r];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &tw.data()[r * i..(r + 1) * i];
                    for j in 0..i {
                        dx[j] += g * row[j];
                        dw[r * i + j] = g * tx.data()[j];
                    }
                }
                add_into(self.grad_slot(grads, *x), &dx);
                add_into(self.grad_slot(grads, *w), &dw);
                add_into(self.grad_slot(grads, *b), gout);
            }
            Op::AvgPool(x) => {
                let (c, h, w) = self.value(*x).dims3();
                let n = h * w;
                let slot = self.grad_slot(grads, *x);
                for ch in 0..c {
                    let g = gout[ch] / n as f64;
                    for d in &mut slot[ch * n..(ch + 1) * n] {
                        *d += g;
                    }
                }
            }
            Op::MeanMax { x, argmax } => {
                let (c, h, w) = self.value(*x).dims3();
                let n = h * w;
                let slot = self.grad_slot(grads, *x);
                for p in 0..n {
                    let gm = gout[p] / c as f64;
                    for ch in 0..c {
                        slot[ch * n + p] += gm;
                    }
                    slot[argmax[p] * n + p] += gout[n + p];
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let [m, k] = ta.shape()[..] else { unreachable!() };
                let n = tb.shape()[1];
                // dA = G B^T, dB = A^T G
                let da = matmul_nt(gout, tb.data(), m, n, k);
                let db = matmul_tn(ta.data(), gout, m, k, n);
                add_into(self.grad_slot(grads, *a), &da);
                add_into(self.grad_slot(grads, *b), &db);
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let [m, k] = ta.shape()[..] else { unreachable!() };
                let n = tb.shape()[0];
                // C = A B^T: dA = G B, dB = G^T A
                let da = matmul_nn(gout, tb.data(), m, n, k);
                let db = matmul_tn(gout, ta.data(), m, n, k);
                add_into(self.grad_slot(grads, *a), &da);
                add_into(self.grad_slot(grads, *b), &db);
            }
            Op::SoftmaxRows(x) => {
                let [m, n] = out.shape()[..] else { unreachable!() };
                let y = out.data();
                let slot = self.grad_slot(grads, *x);
                for r in 0..m {
                    let row = r * n..(r + 1) * n;
                    let dot: f64 = gout[row.clone()].iter().zip(&y[row.clone()]).map(|(g, y)| g * y).sum();
                    for j in row {
                        slot[j] += y[j] * (gout[j] - dot);
                    }
                }
            }
            Op::Sobel(x) => {
                let tx = self.value(*x);
                let (_, h, w) = tx.dims3();
                let (gx, gy) = sobel_components(tx.data(), h, w);
                let slot = self.grad_slot(grads, *x);
                sobel_backward(&gx, &gy, gout, h, w, slot);
            }
            Op::L1Mean { x, target } => {
                let tx = self.value(*x).data();
                let n = tx.len() as f64;
                let g = gout[0] / n;
                let slot = self.grad_slot(grads, *x);
                for ((d, a), b) in slot.iter_mut().zip(tx).zip(target.data()) {
                    *d += g * sign(a - b);
                }
            }
            Op::Sum(x) => {
                let slot = self.grad_slot(grads, *x);
                for d in slot.iter_mut() {
                    *d += gout[0];
                }
            }
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    /// Parameter gradients aligned with the store; unused parameters get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        let store = self.store.expect("graph has no parameter store");
        store
            .ids()
            .map(|id| {
                let t = store.get(id);
                match self.param_vars[id.index()].and_then(|v| grads.wrt(v)) {
                    Some(g) => Tensor::new(t.shape(), g.to_vec()).unwrap(),
                    None => Tensor::zeros(t.shape()),
                }
            })
            .collect()
    }
}

/// See [`Graph::active_set`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ActiveSet {
    /// Positive-side flags of every LeakyReLU input.
    pub leaky: Vec<bool>,
    /// Channel index chosen by every channel max.
    pub argmax: Vec<usize>,
    /// Signs of every absolute-value argument (Sobel responses, L1 residuals).
    pub abs: Vec<i8>,
}

impl ActiveSet {
    /// Number of differing entries per kind: `(leaky, argmax, abs)`.
    pub fn differences(&self, other: &Self) -> (usize, usize, usize) {
        fn count<T: PartialEq>(a: &[T], b: &[T]) -> usize {
            a.iter().zip(b).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len())
        }
        (count(&self.leaky, &other.leaky), count(&self.argmax, &other.argmax), count(&self.abs, &other.abs))
    }
}

/// Gradients produced by [`Graph::backward`]. Only leaves keep their gradient.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a leaf, or `None` if the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn moments(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, 1.0 / libm::sqrt(var + NORM_EPS))
}

/// `(m, k) x (k, n)`
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `(m, k) x (n, k)^T`
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = arow.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `(m, k)^T x (m, n)` giving `(k, n)`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl ConvGeometry {
    fn new(x: &Tensor, w: &Tensor, stride: usize, groups: usize) -> Self {
        let (cin, h, wd) = x.dims3();
        let [cout, cin_g, k, k2] = w.shape()[..] else { panic!("conv2d: weight must be rank 4") };
        assert!(k == k2 && k % 2 == 1, "conv2d: square odd kernel expected");
        assert!(stride >= 1 && groups >= 1, "conv2d: stride and groups must be positive");
        assert!(cin % groups == 0 && cout % groups == 0, "conv2d: channels not divisible by groups");
        assert_eq!(cin_g, cin / groups, "conv2d: weight input channels");
        let pad = k / 2;
        let ho = (h - 1) / stride + 1;
        let wo = (wd - 1) / stride + 1;
        let clamp = |o: usize, t: usize, n: usize| (o * stride + t).saturating_sub(pad).min(n - 1);
        let rows = (0..ho).flat_map(|o| (0..k).map(move |t| (o, t))).map(|(o, t)| clamp(o, t, h)).collect();
        let cols = (0..wo).flat_map(|o| (0..k).map(move |t| (o, t))).map(|(o, t)| clamp(o, t, wd)).collect();
        Self { cin, h, w: wd, cout, k, ho, wo, cin_g, cout_g: cout / groups, rows, cols }
    }
}

pub(crate) fn conv_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, groups: usize) -> Tensor {
    let g = ConvGeometry::new(x, w, stride, groups);
    if let Some(b) = b {
        assert_eq!(b.len(), g.cout, "conv2d: bias length");
    }
    let (xd, wd) = (x.data(), w.data());
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut out = vec![0.0; g.cout * plane_out];
    for o in 0..g.cout {
        let op = &mut out[o * plane_out..(o + 1) * plane_out];
        if let Some(b) = b {
            op.fill(b.data()[o]);
        }
        let group = o / g.cout_g;
        for cl in 0..g.cin_g {
            let c = group * g.cin_g + cl;
            let xp = &xd[c * plane_in..(c + 1) * plane_in];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = wd[((o * g.cin_g + cl) * g.k + ky) * g.k + kx];
                    for oy in 0..g.ho {
                        let row = g.rows[oy * g.k + ky] * g.w;
                        let orow = &mut op[oy * g.wo..(oy + 1) * g.wo];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            *ov += wv * xp[row + g.cols[ox * g.k + kx]];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.cout, g.ho, g.wo], out).unwrap()
}

fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    stride: usize,
    groups: usize,
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let g = ConvGeometry::new(x, w, stride, groups);
    let (xd, wd) = (x.data(), w.data());
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut dx = vec![0.0; g.cin * plane_in];
    let mut dw = vec![0.0; wd.len()];
    let mut db = vec![0.0; if has_bias { g.cout } else { 0 }];
    for o in 0..g.cout {
        let gp = &gout[o * plane_out..(o + 1) * plane_out];
        if has_bias {
            db[o] = gp.iter().sum();
        }
        let group = o / g.cout_g;
        for cl in 0..g.cin_g {
            let c = group * g.cin_g + cl;
            let xp = &xd[c * plane_in..(c + 1) * plane_in];
            let dxp = &mut dx[c * plane_in..(c + 1) * plane_in];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let widx = ((o * g.cin_g + cl) * g.k + ky) * g.k + kx;
                    let wv = wd[widx];
                    let mut acc = 0.0;
                    for oy in 0..g.ho {
                        let row = g.rows[oy * g.k + ky] * g.w;
                        let grow = &gp[oy * g.wo..(oy + 1) * g.wo];
                        for (ox, &gv) in grow.iter().enumerate() {
                            let idx = row + g.cols[ox * g.k + kx];
                            acc += gv * xp[idx];
                            dxp[idx] += gv * wv;
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    (dx, dw, db)
}

fn sobel_backward(gx: &[f64], gy: &[f64], gout: &[f64], h: usize, w: usize, slot: &mut [f64]) {
    const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (sx, sy) = (gout[p] * sign(gx[p]), gout[p] * sign(gy[p]));
            if sx == 0.0 && sy == 0.0 {
                continue;
            }
            for (dy, (kxr, kyr)) in KX.iter().zip(&KY).enumerate() {
                let yy = (y + dy).saturating_sub(1).min(h - 1);
                for dx in 0..3 {
                    let xx = (x + dx).saturating_sub(1).min(w - 1);
                    slot[yy * w + xx] += sx * kxr[dx] + sy * kyr[dx];
                }
            }
        }
    }
}
