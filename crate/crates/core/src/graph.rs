//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! Every forward pass builds a fresh [`Graph`]; nodes are appended in
//! topological order, so the backward sweep is a single reverse walk.
//! The op set is exactly what the encoder, attention mechanisms, and
//! convolutional head need. All math is `f64`.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{matmul, Tensor};

/// Probability clamp used by the binary cross-entropy loss.
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

enum Op {
    Leaf,
    MatMul { a: VarId, b: VarId, ta: bool, tb: bool },
    AddN(Vec<VarId>),
    AddBroadcastRow { mat: VarId, row: VarId },
    Scale { x: VarId, c: f64 },
    Tanh { x: VarId },
    Gelu { x: VarId },
    LeakyRelu { x: VarId, slope: f64 },
    SoftmaxRowsMasked { x: VarId, mask: Vec<bool> },
    LayerNorm { x: VarId, gamma: VarId, beta: VarId, eps: f64 },
    GatherRows { table: VarId, ids: Vec<usize> },
    SliceCols { x: VarId, start: usize, len: usize },
    ConcatRows(Vec<VarId>),
    ConcatCols(Vec<VarId>),
    RowMeanGroups { x: VarId, group: usize },
    StackChannels3 { a: VarId, b: VarId, c: VarId },
    Conv1dSame { x: VarId, w: VarId, b: VarId },
    Reshape { x: VarId },
    RowMeans { x: VarId },
    BceWithLogitsMean { logits: VarId, targets: Vec<f64> },
    Dropout { x: VarId, mask: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

/// A single-use computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_stable(z: f64) -> f64 {
    sigmoid(z)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> VarId {
        self.nodes.push(Node { value, op, requires_grad });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A differentiable input (parameters bind through this).
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: VarId, ta: bool, b: VarId, tb: bool) -> VarId {
        let value = matmul(&self.nodes[a.0].value, ta, &self.nodes[b.0].value, tb);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        self.add_n(vec![a, b])
    }

    pub fn add_n(&mut self, xs: Vec<VarId>) -> VarId {
        assert!(!xs.is_empty());
        let mut value = self.nodes[xs[0].0].value.clone();
        for x in &xs[1..] {
            let t = &self.nodes[x.0].value;
            assert_eq!(value.shape(), t.shape(), "add_n shape mismatch");
            for (o, v) in value.data_mut().iter_mut().zip(t.data()) {
                *o += v;
            }
        }
        let rg = self.needs(&xs);
        self.push(value, Op::AddN(xs), rg)
    }

    /// `(r, c)` matrix plus a length-`c` row vector broadcast over rows.
    pub fn add_row(&mut self, mat: VarId, row: VarId) -> VarId {
        let m = &self.nodes[mat.0].value;
        let r = &self.nodes[row.0].value;
        assert_eq!(m.cols(), r.numel(), "add_row width mismatch");
        let mut value = m.clone();
        for i in 0..value.rows() {
            for j in 0..value.cols() {
                let v = value.at2(i, j) + r.data()[j];
                value.set2(i, j, v);
            }
        }
        let rg = self.needs(&[mat, row]);
        self.push(value, Op::AddBroadcastRow { mat, row }, rg)
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let mut value = self.nodes[x.0].value.clone();
        for v in value.data_mut() {
            *v *= c;
        }
        let rg = self.needs(&[x]);
        self.push(value, Op::Scale { x, c }, rg)
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        let mut value = self.nodes[x.0].value.clone();
        for v in value.data_mut() {
            *v = libm::tanh(*v);
        }
        let rg = self.needs(&[x]);
        self.push(value, Op::Tanh { x }, rg)
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let mut value = self.nodes[x.0].value.clone();
        for v in value.data_mut() {
            *v = gelu(*v);
        }
        let rg = self.needs(&[x]);
        self.push(value, Op::Gelu { x }, rg)
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: f64) -> VarId {
        let mut value = self.nodes[x.0].value.clone();
        for v in value.data_mut() {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        let rg = self.needs(&[x]);
        self.push(value, Op::LeakyRelu { x, slope }, rg)
    }

    /// Row-wise softmax over the columns where `mask` is true.
    ///
    /// Masked columns get weight exactly 0. A row with no unmasked column
    /// becomes all zeros instead of a distribution; callers reject inputs
    /// where such rows would carry content.
    pub fn softmax_rows_masked(&mut self, x: VarId, mask: &[bool]) -> VarId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.cols(), mask.len(), "softmax mask width mismatch");
        let (r, c) = (xv.rows(), xv.cols());
        let mut value = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if mask[j] && xv.at2(i, j) > max {
                    max = xv.at2(i, j);
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // fully masked row
            }
            let mut sum = 0.0;
            for j in 0..c {
                if mask[j] {
                    let e = libm::exp(xv.at2(i, j) - max);
                    value.set2(i, j, e);
                    sum += e;
                }
            }
            for j in 0..c {
                if mask[j] {
                    let v = value.at2(i, j) / sum;
                    value.set2(i, j, v);
                }
            }
        }
        let rg = self.needs(&[x]);
        self.push(value, Op::SoftmaxRowsMasked { x, mask: mask.to_vec() }, rg)
    }

    /// Per-row layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let (r, c) = (xv.rows(), xv.cols());
        assert_eq!(g.numel(), c);
        assert_eq!(b.numel(), c);
        let mut value = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = xv.row(i);
            let mean: f64 = row.iter().sum::<f64>() / c as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            for j in 0..c {
                value.set2(i, j, g.data()[j] * (row[j] - mean) * inv + b.data()[j]);
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        self.push(value, Op::LayerNorm { x, gamma, beta, eps }, rg)
    }

    /// Select rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: VarId, ids: &[usize]) -> VarId {
        let t = &self.nodes[table.0].value;
        let d = t.cols();
        let mut value = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < t.rows(), "gather id {} out of range {}", id, t.rows());
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        let rg = self.needs(&[table]);
        self.push(value, Op::GatherRows { table, ids: ids.to_vec() }, rg)
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let xv = &self.nodes[x.0].value;
        let (r, c) = (xv.rows(), xv.cols());
        assert!(start + len <= c);
        let mut value = Tensor::zeros(&[r, len]);
        for i in 0..r {
            value.row_mut(i).copy_from_slice(&xv.row(i)[start..start + len]);
        }
        let rg = self.needs(&[x]);
        self.push(value, Op::SliceCols { x, start, len }, rg)
    }

    pub fn concat_rows(&mut self, xs: Vec<VarId>) -> VarId {
        assert!(!xs.is_empty());
        let c = self.nodes[xs[0].0].value.cols();
        let total: usize = xs.iter().map(|x| self.nodes[x.0].value.rows()).sum();
        let mut value = Tensor::zeros(&[total, c]);
        let mut at = 0;
        for x in &xs {
            let t = &self.nodes[x.0].value;
            assert_eq!(t.cols(), c);
            for i in 0..t.rows() {
                value.row_mut(at + i).copy_from_slice(t.row(i));
            }
            at += t.rows();
        }
        let rg = self.needs(&xs);
        self.push(value, Op::ConcatRows(xs), rg)
    }

    pub fn concat_cols(&mut self, xs: Vec<VarId>) -> VarId {
        assert!(!xs.is_empty());
        let r = self.nodes[xs[0].0].value.rows();
        let total: usize = xs.iter().map(|x| self.nodes[x.0].value.cols()).sum();
        let mut value = Tensor::zeros(&[r, total]);
        let mut at = 0;
        for x in &xs {
            let t = &self.nodes[x.0].value;
            assert_eq!(t.rows(), r);
            for i in 0..r {
                value.row_mut(i)[at..at + t.cols()].copy_from_slice(t.row(i));
            }
            at += t.cols();
        }
        let rg = self.needs(&xs);
        self.push(value, Op::ConcatCols(xs), rg)
    }

    /// Mean over consecutive groups of `group` rows: `(g*m, d)` -> `(g, d)`.
    pub fn row_mean_groups(&mut self, x: VarId, group: usize) -> VarId {
        let xv = &self.nodes[x.0].value;
        let (r, c) = (xv.rows(), xv.cols());
        assert!(group > 0 && r % group == 0);
        let g = r / group;
        let mut value = Tensor::zeros(&[g, c]);
        for i in 0..r {
            let out = i / group;
            for j in 0..c {
                let v = value.at2(out, j) + xv.at2(i, j) / group as f64;
                value.set2(out, j, v);
            }
        }
        let rg = self.needs(&[x]);
        self.push(value, Op::RowMeanGroups { x, group }, rg)
    }

    /// Stack three `(l, d)` matrices into channels: `(l, 3, d)`.
    pub fn stack_channels3(&mut self, a: VarId, b: VarId, c: VarId) -> VarId {
        let (av, bv, cv) = (&self.nodes[a.0].value, &self.nodes[b.0].value, &self.nodes[c.0].value);
        assert_eq!(av.shape(), bv.shape());
        assert_eq!(av.shape(), cv.shape());
        let (l, d) = (av.rows(), av.cols());
        let mut value = Tensor::zeros(&[l, 3, d]);
        for i in 0..l {
            for j in 0..d {
                value.set3(i, 0, j, av.at2(i, j));
                value.set3(i, 1, j, bv.at2(i, j));
                value.set3(i, 2, j, cv.at2(i, j));
            }
        }
        let rg = self.needs(&[a, b, c]);
        self.push(value, Op::StackChannels3 { a, b, c }, rg)
    }

    /// 1-D convolution along the last axis with "same" zero padding.
    ///
    /// `x`: `(l, c_in, d)`, `w`: `(c_out, c_in, k)` with odd `k`, `b`: `(c_out)`.
    pub fn conv1d_same(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let (l, c_in, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (c_out, w_in, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        assert_eq!(c_in, w_in, "conv channel mismatch");
        assert_eq!(bv.numel(), c_out);
        assert!(k % 2 == 1, "conv kernel must be odd for same padding");
        let pad = k / 2;
        let mut value = Tensor::zeros(&[l, c_out, d]);
        for li in 0..l {
            for o in 0..c_out {
                for p in 0..d {
                    let mut acc = bv.data()[o];
                    for ci in 0..c_in {
                        for kk in 0..k {
                            let q = p + kk;
                            if q < pad || q - pad >= d {
                                continue;
                            }
                            acc += wv.at3(o, ci, kk) * xv.at3(li, ci, q - pad);
                        }
                    }
                    value.set3(li, o, p, acc);
                }
            }
        }
        let rg = self.needs(&[x, w, b]);
        self.push(value, Op::Conv1dSame { x, w, b }, rg)
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> VarId {
        let value = self.nodes[x.0].value.reshaped(shape).expect("reshape numel mismatch");
        let rg = self.needs(&[x]);
        self.push(value, Op::Reshape { x }, rg)
    }

    /// Mean over columns: `(r, c)` -> `(r)`.
    pub fn row_means(&mut self, x: VarId) -> VarId {
        let xv = &self.nodes[x.0].value;
        let (r, c) = (xv.rows(), xv.cols());
        let mut value = Tensor::zeros(&[r]);
        for i in 0..r {
            value.data_mut()[i] = xv.row(i).iter().sum::<f64>() / c as f64;
        }
        let rg = self.needs(&[x]);
        self.push(value, Op::RowMeans { x }, rg)
    }

    /// Mean binary cross-entropy over labels, from logits.
    ///
    /// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the
    /// logarithm; a clamped entry contributes zero gradient.
    pub fn bce_with_logits_mean(&mut self, logits: VarId, targets: &[f64]) -> VarId {
        let z = &self.nodes[logits.0].value;
        assert_eq!(z.numel(), targets.len(), "bce target length mismatch");
        let n = targets.len() as f64;
        let mut loss = 0.0;
        for (zi, yi) in z.data().iter().zip(targets) {
            let p = sigmoid(*zi).clamp(BCE_EPS, 1.0 - BCE_EPS);
            loss -= yi * libm::log(p) + (1.0 - yi) * libm::log(1.0 - p);
        }
        let value = Tensor::scalar(loss / n);
        let rg = self.needs(&[logits]);
        self.push(value, Op::BceWithLogitsMean { logits, targets: targets.to_vec() }, rg)
    }

    /// Inverted dropout; `mask` entries are 0 or `1/keep`.
    pub fn dropout(&mut self, x: VarId, mask: &[f64]) -> VarId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.numel(), mask.len());
        let mut value = xv.clone();
        for (v, m) in value.data_mut().iter_mut().zip(mask) {
            *v *= m;
        }
        let rg = self.needs(&[x]);
        self.push(value, Op::Dropout { x, mask: mask.to_vec() }, rg)
    }

    /// Reverse sweep from a scalar root; returns per-node gradients.
    pub fn backward(&self, root: VarId) -> Gradients {
        assert_eq!(self.nodes[root.0].value.numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut seed = Tensor::zeros(self.nodes[root.0].value.shape());
        seed.data_mut()[0] = 1.0;
        grads[root.0] = Some(seed);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn add_into(grads: &mut Vec<Option<Tensor>>, id: VarId, contribution: Tensor) {
        match &mut grads[id.0] {
            Some(t) => {
                for (o, v) in t.data_mut().iter_mut().zip(contribution.data()) {
                    *o += v;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn accumulate_parents(&self, i: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.nodes[a.0].requires_grad {
                    let da = if !*ta {
                        matmul(g, false, bv, !*tb)
                    } else {
                        matmul(bv, *tb, g, true)
                    };
                    Self::add_into(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = if !*tb {
                        matmul(av, !*ta, g, false)
                    } else {
                        matmul(g, true, av, *ta)
                    };
                    Self::add_into(grads, *b, db);
                }
            }
            Op::AddN(xs) => {
                for x in xs {
                    if self.nodes[x.0].requires_grad {
                        Self::add_into(grads, *x, g.clone());
                    }
                }
            }
            Op::AddBroadcastRow { mat, row } => {
                if self.nodes[mat.0].requires_grad {
                    Self::add_into(grads, *mat, g.clone());
                }
                if self.nodes[row.0].requires_grad {
                    let c = g.cols();
                    let mut dr = Tensor::zeros(&[c]);
                    for i in 0..g.rows() {
                        for j in 0..c {
                            dr.data_mut()[j] += g.at2(i, j);
                        }
                    }
                    Self::add_into(grads, *row, dr);
                }
            }
            Op::Scale { x, c } => {
                if self.nodes[x.0].requires_grad {
                    let mut dx = g.clone();
                    for v in dx.data_mut() {
                        *v *= c;
                    }
                    Self::add_into(grads, *x, dx);
                }
            }
            Op::Tanh { x } => {
                if self.nodes[x.0].requires_grad {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for (v, yv) in dx.data_mut().iter_mut().zip(y.data()) {
                        *v *= 1.0 - yv * yv;
                    }
                    Self::add_into(grads, *x, dx);
                }
            }
            Op::Gelu { x } => {
                if self.nodes[x.0].requires_grad {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = g.clone();
                    for (v, xi) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *v *= gelu_grad(*xi);
                    }
                    Self::add_into(grads, *x, dx);
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.nodes[x.0].requires_grad {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = g.clone();
                    for (v, xi) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if *xi < 0.0 {
                            *v *= slope;
                        }
                    }
                    Self::add_into(grads, *x, dx);
                }
            }
            Op::SoftmaxRowsMasked { x, mask } => {
                if self.nodes[x.0].requires_grad {
                    let y = &node.value;
                    let (r, c) = (y.rows(), y.cols());
                    let mut dx = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += y.at2(i, j) * g.at2(i, j);
                        }
                        for j in 0..c {
                            if mask[j] {
                                dx.set2(i, j, y.at2(i, j) * (g.at2(i, j) - s));
                            }
                        }
                    }
                    Self::add_into(grads, *x, dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gamma.0].value;
                let (r, c) = (xv.rows(), xv.cols());
                let cf = c as f64;
                let mut dx = Tensor::zeros(&[r, c]);
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                for i in 0..r {
                    let row = xv.row(i);
                    let mean: f64 = row.iter().sum::<f64>() / cf;
                    let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                    let inv = 1.0 / libm::sqrt(var + eps);
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = g.at2(i, j) * gv.data()[j];
                        dgamma.data_mut()[j] += g.at2(i, j) * xhat;
                        dbeta.data_mut()[j] += g.at2(i, j);
                        mean_dxhat += dxhat / cf;
                        mean_dxhat_xhat += dxhat * xhat / cf;
                    }
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = g.at2(i, j) * gv.data()[j];
                        dx.set2(i, j, inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat));
                    }
                }
                if self.nodes[x.0].requires_grad {
                    Self::add_into(grads, *x, dx);
                }
                if self.nodes[gamma.0].requires_grad {
                    Self::add_into(grads, *gamma, dgamma);
                }
                if self.nodes[beta.0].requires_grad {
                    Self::add_into(grads, *beta, dbeta);
                }
            }
            Op::GatherRows { table, ids } => {
                if self.nodes[table.0].requires_grad {
                    let t = &self.nodes[table.0].value;
                    let mut dt = Tensor::zeros(&[t.rows(), t.cols()]);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..t.cols() {
                            let v = dt.at2(id, j) + g.at2(r, j);
                            dt.set2(id, j, v);
                        }
                    }
                    Self::add_into(grads, *table, dt);
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.nodes[x.0].requires_grad {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Tensor::zeros(&[xv.rows(), xv.cols()]);
                    for i in 0..g.rows() {
                        for j in 0..*len {
                            dx.set2(i, start + j, g.at2(i, j));
                        }
                    }
                    Self::add_into(grads, *x, dx);
                }
            }
            Op::ConcatRows(xs) => {
                let mut at = 0;
                for x in xs {
                    let rows = self.nodes[x.0].value.rows();
                    if self.nodes[x.0].requires_grad {
                        let c = g.cols();
                        let mut dx = Tensor::zeros(&[rows, c]);
                        for i in 0..rows {
                            dx.row_mut(i).copy_from_slice(g.row(at + i));
                        }
                        Self::add_into(grads, *x, dx);
                    }
                    at += rows;
                }
            }
            Op::ConcatCols(xs) => {
                let mut at = 0;
                for x in xs {
                    let cols = self.nodes[x.0].value.cols();
                    if self.nodes[x.0].requires_grad {
                        let r = g.rows();
                        let mut dx = Tensor::zeros(&[r, cols]);
                        for i in 0..r {
                            dx.row_mut(i).copy_from_slice(&g.row(i)[at..at + cols]);
                        }
                        Self::add_into(grads, *x, dx);
                    }
                    at += cols;
                }
            }
            Op::RowMeanGroups { x, group } => {
                if self.nodes[x.0].requires_grad {
                    let xv = &self.nodes[x.0].value;
                    let (r, c) = (xv.rows(), xv.cols());
                    let mut dx = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        for j in 0..c {
                            dx.set2(i, j, g.at2(i / group, j) / *group as f64);
                        }
                    }
                    Self::add_into(grads, *x, dx);
                }
            }
            Op::StackChannels3 { a, b, c } => {
                let (l, d) = (node.value.shape()[0], node.value.shape()[2]);
                for (ch, id) in [(0usize, a), (1, b), (2, c)] {
                    if self.nodes[id.0].requires_grad {
                        let mut dx = Tensor::zeros(&[l, d]);
                        for i in 0..l {
                            for j in 0..d {
                                dx.set2(i, j, g.at3(i, ch, j));
                            }
                        }
                        Self::add_into(grads, *id, dx);
                    }
                }
            }
            Op::Conv1dSame { x, w, b } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (l, c_in, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (c_out, _, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                let pad = k / 2;
                let mut dx = Tensor::zeros(&[l, c_in, d]);
                let mut dw = Tensor::zeros(&[c_out, c_in, k]);
                let mut db = Tensor::zeros(&[c_out]);
                for li in 0..l {
                    for o in 0..c_out {
                        for p in 0..d {
                            let go = g.at3(li, o, p);
                            if go == 0.0 {
                                continue;
                            }
                            db.data_mut()[o] += go;
                            for ci in 0..c_in {
                                for kk in 0..k {
                                    let q = p + kk;
                                    if q < pad || q - pad >= d {
                                        continue;
                                    }
                                    let xi = q - pad;
                                    let v = dx.at3(li, ci, xi) + go * wv.at3(o, ci, kk);
                                    dx.set3(li, ci, xi, v);
                                    let v = dw.at3(o, ci, kk) + go * xv.at3(li, ci, xi);
                                    dw.set3(o, ci, kk, v);
                                }
                            }
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    Self::add_into(grads, *x, dx);
                }
                if self.nodes[w.0].requires_grad {
                    Self::add_into(grads, *w, dw);
                }
                if self.nodes[b.0].requires_grad {
                    Self::add_into(grads, *b, db);
                }
            }
            Op::Reshape { x } => {
                if self.nodes[x.0].requires_grad {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let dx = g.reshaped(&shape).expect("reshape grad");
                    Self::add_into(grads, *x, dx);
                }
            }
            Op::RowMeans { x } => {
                if self.nodes[x.0].requires_grad {
                    let xv = &self.nodes[x.0].value;
                    let (r, c) = (xv.rows(), xv.cols());
                    let mut dx = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        let gi = g.data()[i] / c as f64;
                        for j in 0..c {
                            dx.set2(i, j, gi);
                        }
                    }
                    Self::add_into(grads, *x, dx);
                }
            }
            Op::BceWithLogitsMean { logits, targets } => {
                if self.nodes[logits.0].requires_grad {
                    let z = &self.nodes[logits.0].value;
                    let n = targets.len() as f64;
                    let g0 = g.data()[0];
                    let mut dz = Tensor::zeros(&[targets.len()]);
                    for (i, (zi, yi)) in z.data().iter().zip(targets).enumerate() {
                        let p = sigmoid(*zi);
                        // Clamped probabilities are constants in the loss.
                        if p > BCE_EPS && p < 1.0 - BCE_EPS {
                            dz.data_mut()[i] = g0 * (p - yi) / n;
                        }
                    }
                    Self::add_into(grads, *logits, dz);
                }
            }
            Op::Dropout { x, mask } => {
                if self.nodes[x.0].requires_grad {
                    let mut dx = g.clone();
                    for (v, m) in dx.data_mut().iter_mut().zip(mask) {
                        *v *= m;
                    }
                    Self::add_into(grads, *x, dx);
                }
            }
        }
    }
}
