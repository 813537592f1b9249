//! Tape-based reverse-mode differentiation over [`Tensor2D`] values.
//!
//! A [`Tape`] records each primitive together with its forward value. Calling
//! [`Tape::backward`] on a 1x1 output replays the record in reverse and
//! returns [`Gradients`] for every node that the output depends on.
//!
//! Node ids are only meaningful for the tape that issued them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Denominator guard for [`Tape::l2_normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    TemporalConv {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        width: usize,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    L2NormalizeRows {
        x: NodeId,
        /// Per-row divisor and whether the norm guard applied.
        denoms: Vec<(f64, bool)>,
    },
    LogClamped {
        x: NodeId,
        floor: f64,
    },
    MseRows {
        a: NodeId,
        b: NodeId,
    },
    MixAdjacent {
        x: NodeId,
        alphas: Vec<f64>,
    },
    TopkPool {
        x: NodeId,
        k: usize,
        /// `selected[c * k + i]` is the row of the i-th pick in column c.
        selected: Vec<usize>,
    },
    AttentionPool {
        p: NodeId,
        weights: NodeId,
    },
    MeanRows(NodeId),
    MatMulT {
        a: NodeId,
        b: NodeId,
        scale: f64,
    },
    WeightedSum {
        x: NodeId,
        weights: Tensor2D,
        scale: f64,
    },
    Combine(Vec<(NodeId, f64)>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor2D,
    op: Op,
}

/// Ordered record of primitive applications.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    degenerate_rows: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of rows that hit the norm guard in `l2_normalize_rows`.
    pub fn degenerate_rows(&self) -> usize {
        self.degenerate_rows
    }

    pub fn value(&self, id: NodeId) -> &Tensor2D {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor2D, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor2D) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// `y[t] = x[t]·W + b` with `W: D_in×D_out` and `b: 1×D_out`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.rows() || bv.shape() != (1, wv.cols()) {
            return Err(Error::shape(
                "affine",
                format!(
                    "x {:?}, W {:?}, b {:?}",
                    xv.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            ));
        }
        let mut y = xv.matmul(wv)?;
        for r in 0..y.rows() {
            for (yv, bias) in y.row_mut(r).iter_mut().zip(bv.data()) {
                *yv += bias;
            }
        }
        Ok(self.push(y, Op::Affine { x, w, b }))
    }

    /// Same-length temporal convolution with zero padding.
    ///
    /// `kernel` has shape `(width·D_in)×D_out`; row `j·D_in + d` weights input
    /// channel `d` at temporal offset `j − (width−1)/2`.
    pub fn temporal_conv(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let d_in = xv.cols();
        if kv.rows() % d_in != 0 {
            return Err(Error::shape(
                "temporal_conv",
                format!("kernel rows {} not a multiple of D_in {d_in}", kv.rows()),
            ));
        }
        let width = kv.rows() / d_in;
        if width % 2 == 0 {
            return Err(Error::config(
                "kernel_width",
                format!("temporal kernel width must be odd, got {width}"),
            ));
        }
        if bv.shape() != (1, kv.cols()) {
            return Err(Error::shape(
                "temporal_conv",
                format!("bias {:?} for D_out {}", bv.shape(), kv.cols()),
            ));
        }
        let half = (width - 1) / 2;
        let t_len = xv.rows();
        let d_out = kv.cols();
        let mut y = Tensor2D::zeros(t_len, d_out);
        for t in 0..t_len {
            let out = y.row_mut(t);
            out.copy_from_slice(bv.data());
            for j in 0..width {
                let Some(src) = (t + j).checked_sub(half).filter(|&s| s < t_len) else {
                    continue;
                };
                let xr = xv.row(src);
                for (d, &xd) in xr.iter().enumerate() {
                    if xd == 0.0 {
                        continue;
                    }
                    for (o, &k) in out.iter_mut().zip(kv.row(j * d_in + d)) {
                        *o += xd * k;
                    }
                }
            }
        }
        Ok(self.push(
            y,
            Op::TemporalConv {
                x,
                kernel,
                bias,
                width,
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut y = self.value(x).clone();
        for r in 0..y.rows() {
            softmax_in_place(y.row_mut(r));
        }
        self.push(y, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut y = self.value(x).clone();
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(y, Op::LogSoftmaxRows(x))
    }

    /// Scales each row to unit Euclidean norm. Rows with norm below
    /// [`NORM_EPS`] are divided by `norm + NORM_EPS` and counted as degenerate.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let mut y = self.value(x).clone();
        let mut denoms = Vec::with_capacity(y.rows());
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            let guarded = norm < NORM_EPS;
            let denom = if guarded {
                self.degenerate_rows += 1;
                log::warn!("l2_normalize_rows: row {r} has norm {norm:e}; guarded");
                norm + NORM_EPS
            } else {
                norm
            };
            for v in row.iter_mut() {
                *v /= denom;
            }
            denoms.push((denom, guarded));
        }
        self.push(y, Op::L2NormalizeRows { x, denoms })
    }

    /// Natural log of `max(x, floor)`.
    pub fn log_clamped(&mut self, x: NodeId, floor: f64) -> NodeId {
        let y = self.value(x).map(|v| libm::log(v.max(floor)));
        self.push(y, Op::LogClamped { x, floor })
    }

    /// Mean over rows of the squared Euclidean distance between rows of `a`
    /// and `b`.
    pub fn mse_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let sq: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        let y = Tensor2D::scalar(sq / av.rows() as f64);
        Ok(self.push(y, Op::MseRows { a, b }))
    }

    /// `y[t] = α_t·x[t] + (1 − α_t)·x[t+1]` for `t < T − 1`.
    pub fn mix_adjacent(&mut self, x: NodeId, alphas: &[f64]) -> Result<NodeId> {
        let y = crate::augment::mix_rows(self.value(x), alphas)?;
        Ok(self.push(
            y,
            Op::MixAdjacent {
                x,
                alphas: alphas.to_vec(),
            },
        ))
    }

    /// Per-column mean of the `k` largest entries; ties go to the lower row.
    pub fn topk_pool(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if k == 0 || k > xv.rows() {
            return Err(Error::shape(
                "topk_pool",
                format!("k = {k} for {} rows", xv.rows()),
            ));
        }
        let mut y = Tensor2D::zeros(1, xv.cols());
        let mut selected = Vec::with_capacity(k * xv.cols());
        let mut order: Vec<usize> = Vec::with_capacity(xv.rows());
        for c in 0..xv.cols() {
            order.clear();
            order.extend(0..xv.rows());
            // stable: equal values keep ascending row order
            order.sort_by(|&i, &j| xv.get(j, c).total_cmp(&xv.get(i, c)));
            let sum: f64 = order[..k].iter().map(|&i| xv.get(i, c)).sum();
            y.set(0, c, sum / k as f64);
            selected.extend_from_slice(&order[..k]);
        }
        Ok(self.push(y, Op::TopkPool { x, k, selected }))
    }

    /// `Σ_t w_t·p_t / Σ_t w_t` with `weights: T×1`.
    pub fn attention_pool(&mut self, p: NodeId, weights: NodeId) -> Result<NodeId> {
        let (pv, wv) = (self.value(p), self.value(weights));
        if wv.shape() != (pv.rows(), 1) {
            return Err(Error::shape(
                "attention_pool",
                format!("P {:?}, weights {:?}", pv.shape(), wv.shape()),
            ));
        }
        let total: f64 = wv.data().iter().sum();
        assert!(total >= 1e-12, "attention weights sum to {total}");
        let mut y = Tensor2D::zeros(1, pv.cols());
        for t in 0..pv.rows() {
            let w = wv.get(t, 0);
            for (o, &v) in y.row_mut(0).iter_mut().zip(pv.row(t)) {
                *o += w * v;
            }
        }
        y.scale_in_place(1.0 / total);
        Ok(self.push(y, Op::AttentionPool { p, weights }))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut y = Tensor2D::zeros(1, xv.cols());
        for row in xv.row_iter() {
            for (o, &v) in y.row_mut(0).iter_mut().zip(row) {
                *o += v;
            }
        }
        y.scale_in_place(1.0 / xv.rows() as f64);
        self.push(y, Op::MeanRows(x))
    }

    /// `scale · A·Bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, scale: f64) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} · {:?}ᵀ", av.shape(), bv.shape()),
            ));
        }
        let mut y = Tensor2D::zeros(av.rows(), bv.rows());
        for i in 0..av.rows() {
            for j in 0..bv.rows() {
                let dot: f64 = av.row(i).iter().zip(bv.row(j)).map(|(p, q)| p * q).sum();
                y.set(i, j, scale * dot);
            }
        }
        Ok(self.push(y, Op::MatMulT { a, b, scale }))
    }

    /// `scale · Σ weights ∘ x` as a 1x1 node; `weights` is a constant.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor2D, scale: f64) -> Result<NodeId> {
        let xv = self.value(x);
        if !xv.same_shape(&weights) {
            return Err(Error::shape(
                "weighted_sum",
                format!("{:?} vs weights {:?}", xv.shape(), weights.shape()),
            ));
        }
        let s: f64 = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(v, w)| v * w)
            .sum();
        Ok(self.push(
            Tensor2D::scalar(scale * s),
            Op::WeightedSum { x, weights, scale },
        ))
    }

    /// Linear combination of equally shaped nodes.
    pub fn combine(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::shape("combine", "no terms"));
        };
        let (rows, cols) = self.value(first).shape();
        let mut y = Tensor2D::zeros(rows, cols);
        for &(id, c) in terms {
            let v = self.value(id);
            if v.shape() != (rows, cols) {
                return Err(Error::shape(
                    "combine",
                    format!("{:?} vs {:?}", v.shape(), (rows, cols)),
                ));
            }
            y.add_scaled(v, c);
        }
        Ok(self.push(y, Op::Combine(terms.to_vec())))
    }

    /// Reverse pass from a 1x1 node.
    pub fn backward(&self, output: NodeId) -> Gradients {
        assert_eq!(
            self.value(output).shape(),
            (1, 1),
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Tensor2D>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor2D::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor2D, grads: &mut [Option<Tensor2D>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                accumulate(grads, *x, g.matmul(&wv.transpose()).expect("affine dx"));
                accumulate(grads, *w, xv.transpose().matmul(g).expect("affine dW"));
                let mut db = Tensor2D::zeros(1, g.cols());
                for row in g.row_iter() {
                    for (o, v) in db.row_mut(0).iter_mut().zip(row) {
                        *o += v;
                    }
                }
                accumulate(grads, *b, db);
            }
            Op::TemporalConv {
                x,
                kernel,
                bias,
                width,
            } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let d_in = xv.cols();
                let half = (width - 1) / 2;
                let t_len = xv.rows();
                let mut dx = Tensor2D::zeros(t_len, d_in);
                let mut dk = Tensor2D::zeros(kv.rows(), kv.cols());
                let mut db = Tensor2D::zeros(1, kv.cols());
                for t in 0..t_len {
                    let gt = g.row(t);
                    for (o, v) in db.row_mut(0).iter_mut().zip(gt) {
                        *o += v;
                    }
                    for j in 0..*width {
                        let Some(src) = (t + j).checked_sub(half).filter(|&s| s < t_len) else {
                            continue;
                        };
                        for d in 0..d_in {
                            let krow = j * d_in + d;
                            let xd = xv.get(src, d);
                            let mut acc = 0.0;
                            for (o, (&gv, &kw)) in gt.iter().zip(kv.row(krow)).enumerate() {
                                acc += gv * kw;
                                dk.data_mut()[krow * kv.cols() + o] += xd * gv;
                            }
                            dx.data_mut()[src * d_in + d] += acc;
                        }
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *kernel, dk);
                accumulate(grads, *bias, db);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= y * (1.0 - y);
                }
                accumulate(grads, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dot: f64 = yr.iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for (d, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
                        *d = yv * (*d - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (d, &ly) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                        *d -= libm::exp(ly) * gsum;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::L2NormalizeRows { x, denoms } => {
                let y = &node.value;
                let mut dx = g.clone();
                for (r, &(denom, guarded)) in denoms.iter().enumerate() {
                    let yr = y.row(r);
                    let dot: f64 = yr.iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for (d, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
                        *d = if guarded {
                            *d / denom
                        } else {
                            (*d - yv * dot) / denom
                        };
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LogClamped { x, floor } => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *d = if v > *floor { *d / v } else { 0.0 };
                }
                accumulate(grads, *x, dx);
            }
            Op::MseRows { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let coef = 2.0 * g.item() / av.rows() as f64;
                let mut da = av.clone();
                for (d, &q) in da.data_mut().iter_mut().zip(bv.data()) {
                    *d = coef * (*d - q);
                }
                let mut db = da.clone();
                db.scale_in_place(-1.0);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MixAdjacent { x, alphas } => {
                let xv = self.value(*x);
                let mut dx = Tensor2D::zeros(xv.rows(), xv.cols());
                for (t, &alpha) in alphas.iter().enumerate() {
                    for c in 0..xv.cols() {
                        let gv = g.get(t, c);
                        dx.data_mut()[t * xv.cols() + c] += alpha * gv;
                        dx.data_mut()[(t + 1) * xv.cols() + c] += (1.0 - alpha) * gv;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::TopkPool { x, k, selected } => {
                let xv = self.value(*x);
                let mut dx = Tensor2D::zeros(xv.rows(), xv.cols());
                for c in 0..xv.cols() {
                    let share = g.get(0, c) / *k as f64;
                    for &row in &selected[c * k..(c + 1) * k] {
                        dx.data_mut()[row * xv.cols() + c] += share;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::AttentionPool { p, weights } => {
                let (pv, wv) = (self.value(*p), self.value(*weights));
                let total: f64 = wv.data().iter().sum();
                let y = node.value.row(0);
                let gr = g.row(0);
                let mut dp = Tensor2D::zeros(pv.rows(), pv.cols());
                let mut dw = Tensor2D::zeros(pv.rows(), 1);
                for t in 0..pv.rows() {
                    let w = wv.get(t, 0);
                    let mut acc = 0.0;
                    for (c, (&gv, &pvv)) in gr.iter().zip(pv.row(t)).enumerate() {
                        dp.data_mut()[t * pv.cols() + c] = gv * w / total;
                        acc += gv * (pvv - y[c]);
                    }
                    dw.set(t, 0, acc / total);
                }
                accumulate(grads, *p, dp);
                accumulate(grads, *weights, dw);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let mut dx = Tensor2D::zeros(xv.rows(), xv.cols());
                let inv = 1.0 / xv.rows() as f64;
                for r in 0..xv.rows() {
                    for (d, &gv) in dx.row_mut(r).iter_mut().zip(g.row(0)) {
                        *d = gv * inv;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::MatMulT { a, b, scale } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = g.matmul(bv).expect("matmul_t dA");
                da.scale_in_place(*scale);
                let mut db = g.transpose().matmul(av).expect("matmul_t dB");
                db.scale_in_place(*scale);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::WeightedSum { x, weights, scale } => {
                let mut dx = weights.clone();
                dx.scale_in_place(scale * g.item());
                accumulate(grads, *x, dx);
            }
            Op::Combine(terms) => {
                for &(id, c) in terms {
                    let mut d = g.clone();
                    d.scale_in_place(c);
                    accumulate(grads, id, d);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor2D>], id: NodeId, g: Tensor2D) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_scaled(&g, 1.0),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a reverse pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2D>>,
}

impl Gradients {
    /// Gradient w.r.t. `id`, or `None` if the output does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor2D> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. `id`, zero-filled to `like`'s shape when absent.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor2D) -> Tensor2D {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor2D::zeros(like.rows(), like.cols()))
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = values.iter().map(|v| libm::exp(v - max)).sum();
    max + libm::log(s)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Outcome of a finite-difference gradient check for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub failures: Vec<CoordFailure>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordFailure {
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.failures.is_empty())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Relative error used by [`finite_difference_check`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = libm::fabs(analytic).max(libm::fabs(numeric)).max(1e-8);
    libm::fabs(analytic - numeric) / denom
}

/// Compares `analytic` gradients against central differences of `loss`.
///
/// `loss` receives the full parameter list with one coordinate perturbed by
/// `±eps`. A coordinate fails when its relative error exceeds `tol` or when
/// either perturbed loss is non-finite.
pub fn finite_difference_check<F>(
    mut loss: F,
    params: &[Tensor2D],
    analytic: &[Tensor2D],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor2D]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(Error::shape(
            "finite_difference_check",
            format!("{} params, {} gradients", params.len(), analytic.len()),
        ));
    }
    let mut work: Vec<Tensor2D> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        if !grad.same_shape(&params[pi]) {
            return Err(Error::shape(
                "finite_difference_check",
                format!(
                    "gradient {pi} {:?} vs param {:?}",
                    grad.shape(),
                    params[pi].shape()
                ),
            ));
        }
        let mut check = ParamCheck {
            index: pi,
            max_rel_error: 0.0,
            failures: Vec::new(),
        };
        for coord in 0..grad.len() {
            let orig = work[pi].data()[coord];
            work[pi].data_mut()[coord] = orig + eps;
            let up = loss(&work);
            work[pi].data_mut()[coord] = orig - eps;
            let down = loss(&work);
            work[pi].data_mut()[coord] = orig;
            let a = grad.data()[coord];
            let numeric = (up - down) / (2.0 * eps);
            let err = if numeric.is_finite() {
                relative_error(a, numeric)
            } else {
                f64::INFINITY
            };
            check.max_rel_error = check.max_rel_error.max(err);
            if !(err <= tol) {
                check.failures.push(CoordFailure {
                    coord,
                    analytic: a,
                    numeric,
                });
            }
        }
        checks.push(check);
    }
    Ok(GradCheckReport {
        tolerance: tol,
        params: checks,
    })
}
