//! Training objectives.
//!
//! All losses are built from tape primitives so their gradients come from
//! the reverse pass, including the two contrastive directions.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{Baseline, Forward};
use crate::tensor::Tensor2D;

/// Floor applied inside `log` for the classification losses.
pub const LOG_FLOOR: f64 = 1e-12;

/// Allowed deviation of a projection row norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Contrastive temperature.
    pub rho: f64,
    /// Top-k divisor: `k = max(1, T / r)`.
    pub r: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 10.0,
            lambda3: 0.1,
            rho: 0.1,
            r: 8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(key, format!("must be >= 0, got {v}")));
            }
        }
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::config("rho", format!("must be > 0, got {}", self.rho)));
        }
        if self.r < 1 {
            return Err(Error::config("topk_divisor", "must be >= 1"));
        }
        Ok(())
    }

    pub fn any_regularizer(&self) -> bool {
        self.lambda1 != 0.0 || self.lambda2 != 0.0 || self.lambda3 != 0.0
    }
}

/// Values of every loss term for one video.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub base: f64,
    pub cls_prime: f64,
    pub cons: f64,
    pub cont: f64,
    pub cont_prime: f64,
    pub total: f64,
}

impl LossReport {
    pub const TERMS: [&'static str; 6] =
        ["base", "cls_prime", "cons", "cont", "cont_prime", "total"];

    pub fn values(&self) -> [f64; 6] {
        [
            self.base,
            self.cls_prime,
            self.cons,
            self.cont,
            self.cont_prime,
            self.total,
        ]
    }

    /// `base + λ₁·cls′ + λ₂·cons + λ₃·(cont + cont′)`.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.base
            + w.lambda1 * self.cls_prime
            + w.lambda2 * self.cons
            + w.lambda3 * (self.cont + self.cont_prime)
    }
}

/// `k = max(1, T / r)`.
pub fn topk_count(t_len: usize, r: usize) -> usize {
    (t_len / r.max(1)).max(1)
}

/// Mean of the `k` largest logits per class.
pub fn topk_pool(tape: &mut Tape, logits: NodeId, r: usize) -> Result<NodeId> {
    let k = topk_count(tape.value(logits).rows(), r);
    tape.topk_pool(logits, k)
}

/// `p̄ = Σ λ_t p_t / Σ λ_t`.
pub fn attention_pool(tape: &mut Tape, probs: NodeId, attention: NodeId) -> Result<NodeId> {
    tape.attention_pool(probs, attention)
}

/// Multi-hot label normalized to unit mass, optionally with a background
/// entry appended.
pub fn normalized_target(label: &[bool], background: Option<bool>) -> Result<Vec<f64>> {
    let mut target: Vec<f64> = label.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
    if let Some(bg) = background {
        target.push(if bg { 1.0 } else { 0.0 });
    }
    let mass: f64 = target.iter().sum();
    if !label.iter().any(|&y| y) {
        return Err(Error::Input("video label has no positive class".into()));
    }
    for v in &mut target {
        *v /= mass;
    }
    Ok(target)
}

/// `−(1/C_out) Σ_c ỹ_c log max(p̄_c, 1e-12)` for a `1×C_out` distribution.
pub fn video_cls_loss(tape: &mut Tape, video_probs: NodeId, target: &[f64]) -> Result<NodeId> {
    let c_out = tape.value(video_probs).cols();
    if target.len() != c_out || tape.value(video_probs).rows() != 1 {
        return Err(Error::shape(
            "video_cls_loss",
            format!(
                "probs {:?}, target len {}",
                tape.value(video_probs).shape(),
                target.len()
            ),
        ));
    }
    if !target.iter().any(|&v| v > 0.0) {
        return Err(Error::Input("all-zero video label".into()));
    }
    let logp = tape.log_clamped(video_probs, LOG_FLOOR);
    let weights = Tensor2D::new(1, c_out, target.to_vec())?;
    tape.weighted_sum(logp, weights, -1.0 / c_out as f64)
}

/// Baseline video classification loss on one forward pass.
///
/// MIL: softmax of top-k pooled logits against the normalized label.
/// Attention: the attention-pooled pass against the label with background 0
/// plus the unweighted mean pass against the label with background 1.
pub fn base_loss(
    tape: &mut Tape,
    fwd: &Forward,
    baseline: Baseline,
    label: &[bool],
    r: usize,
) -> Result<NodeId> {
    match baseline {
        Baseline::Mil => {
            let pooled = topk_pool(tape, fwd.tcas.logits, r)?;
            let probs = tape.softmax_rows(pooled);
            video_cls_loss(tape, probs, &normalized_target(label, None)?)
        }
        Baseline::Attention => {
            let attention = fwd.tcas.attention.ok_or_else(|| {
                Error::Input("attention baseline requires an attention head".into())
            })?;
            let attended = attention_pool(tape, fwd.tcas.probs, attention)?;
            let suppressed =
                video_cls_loss(tape, attended, &normalized_target(label, Some(false))?)?;
            let plain = tape.mean_rows(fwd.tcas.probs);
            let open = video_cls_loss(tape, plain, &normalized_target(label, Some(true))?)?;
            tape.combine(&[(suppressed, 1.0), (open, 1.0)])
        }
    }
}

/// `L′_cls`: the baseline loss evaluated on the child sequence's forward pass.
pub fn macro_consistency_loss(
    tape: &mut Tape,
    child: &Forward,
    baseline: Baseline,
    label: &[bool],
    r: usize,
) -> Result<NodeId> {
    base_loss(tape, child, baseline, label, r)
}

/// `(1/(T−1)) Σ_t ‖p′_t − p̂′_t‖²`; gradients reach both arguments.
pub fn prediction_consistency_loss(
    tape: &mut Tape,
    child_probs: NodeId,
    mixed_probs: NodeId,
) -> Result<NodeId> {
    tape.mse_rows(child_probs, mixed_probs)
}

fn check_unit_rows(z: &Tensor2D, what: &str) -> Result<()> {
    for (i, row) in z.row_iter().enumerate() {
        let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
        if libm::fabs(norm - 1.0) > UNIT_NORM_TOL {
            return Err(Error::Input(format!(
                "{what} row {i} has norm {norm}, expected unit norm"
            )));
        }
    }
    Ok(())
}

/// Soft cross-entropy of `queries · keysᵀ / ρ` against a constant target
/// matrix, scaled by `1 / queries`.
fn soft_contrastive(
    tape: &mut Tape,
    queries: NodeId,
    keys: NodeId,
    targets: Tensor2D,
    rho: f64,
) -> Result<NodeId> {
    let n_queries = tape.value(queries).rows();
    let sims = tape.matmul_t(queries, keys, 1.0 / rho)?;
    let logp = tape.log_softmax_rows(sims);
    tape.weighted_sum(logp, targets, -1.0 / n_queries as f64)
}

fn contrastive_inputs(
    tape: &Tape,
    children: NodeId,
    parents: NodeId,
    alphas: &[f64],
    rho: f64,
) -> Result<usize> {
    let (zc, zp) = (tape.value(children), tape.value(parents));
    let t_len = zp.rows();
    if t_len < 2 || zc.rows() != t_len - 1 || alphas.len() != t_len - 1 || zc.cols() != zp.cols()
    {
        return Err(Error::shape(
            "contrastive_loss",
            format!(
                "children {:?}, parents {:?}, {} weights",
                zc.shape(),
                zp.shape(),
                alphas.len()
            ),
        ));
    }
    if !(rho > 0.0) {
        return Err(Error::config("rho", format!("must be > 0, got {rho}")));
    }
    check_unit_rows(zc, "child projection")?;
    check_unit_rows(zp, "parent projection")?;
    Ok(t_len)
}

/// Children query parent keys: child `t` has soft positives parent `t`
/// (weight `α_t`) and parent `t+1` (weight `1 − α_t`).
pub fn contrastive_loss(
    tape: &mut Tape,
    children: NodeId,
    parents: NodeId,
    alphas: &[f64],
    rho: f64,
) -> Result<NodeId> {
    let t_len = contrastive_inputs(tape, children, parents, alphas, rho)?;
    let mut targets = Tensor2D::zeros(t_len - 1, t_len);
    for (t, &a) in alphas.iter().enumerate() {
        targets.set(t, t, a);
        targets.set(t, t + 1, 1.0 - a);
    }
    soft_contrastive(tape, children, parents, targets, rho)
}

/// Parents query child keys with the same pair relations. Parent `t` has
/// positives child `t−1` (weight `1 − α_{t−1}`) and child `t` (weight `α_t`);
/// each parent's weights are rescaled to sum to one.
pub fn reverse_contrastive_loss(
    tape: &mut Tape,
    parents: NodeId,
    children: NodeId,
    alphas: &[f64],
    rho: f64,
) -> Result<NodeId> {
    let t_len = contrastive_inputs(tape, children, parents, alphas, rho)?;
    let mut targets = Tensor2D::zeros(t_len, t_len - 1);
    for t in 0..t_len {
        let mut row = vec![0.0; t_len - 1];
        if t > 0 {
            row[t - 1] = 1.0 - alphas[t - 1];
        }
        if t < t_len - 1 {
            row[t] = alphas[t];
        }
        let mass: f64 = row.iter().sum();
        for (c, v) in row.into_iter().enumerate() {
            targets.set(t, c, v / mass);
        }
    }
    soft_contrastive(tape, parents, children, targets, rho)
}

/// Tape nodes of each loss term; regularizers are absent when not computed.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub base: NodeId,
    pub cls_prime: Option<NodeId>,
    pub cons: Option<NodeId>,
    pub cont: Option<NodeId>,
    pub cont_prime: Option<NodeId>,
}

/// Assembles the weighted total. Terms with zero weight are left out of
/// the total node, so they contribute no gradient at all.
pub fn total_loss(
    tape: &mut Tape,
    terms: &LossTerms,
    weights: &LossWeights,
) -> Result<(NodeId, LossReport)> {
    let read = |tape: &Tape, id: Option<NodeId>| id.map_or(0.0, |id| tape.value(id).item());
    let mut report = LossReport {
        base: tape.value(terms.base).item(),
        cls_prime: read(tape, terms.cls_prime),
        cons: read(tape, terms.cons),
        cont: read(tape, terms.cont),
        cont_prime: read(tape, terms.cont_prime),
        total: 0.0,
    };
    report.total = report.weighted_total(weights);

    let mut parts = vec![(terms.base, 1.0)];
    for (id, w) in [
        (terms.cls_prime, weights.lambda1),
        (terms.cons, weights.lambda2),
        (terms.cont, weights.lambda3),
        (terms.cont_prime, weights.lambda3),
    ] {
        if let (Some(id), true) = (id, w != 0.0) {
            parts.push((id, w));
        }
    }
    let total = if parts.len() == 1 {
        terms.base
    } else {
        tape.combine(&parts)?
    };
    Ok((total, report))
}
