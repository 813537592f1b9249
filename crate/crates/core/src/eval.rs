//! Detection metrics and boundary diagnostics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::infer::{round9, score_candidates, InferConfig, Proposal, Span};
use crate::synth::GroundTruthSegment;
use crate::tensor::Tensor2D;

/// Temporal intersection over union of two `(start, end)` intervals.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Evenly spaced thresholds `start, start+step, …, stop` (inclusive).
pub fn ladder(start: f64, step: f64, stop: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(stop >= start) {
        return Err(Error::config(
            "iou",
            format!("invalid ladder {start}:{step}:{stop}"),
        ));
    }
    let n = libm::round((stop - start) / step) as usize + 1;
    Ok((0..n).map(|i| round9(start + step * i as f64)).collect())
}

/// Hit/miss flags of proposals in ranked order under greedy matching.
///
/// Proposals are ranked by descending score (stable). Each proposal takes
/// the unmatched ground truth of the same video with the highest tIoU
/// (lowest index on ties) when that tIoU reaches `threshold`.
pub fn match_ranked(proposals: &[Proposal], gts: &[GroundTruthSegment], threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| proposals[b].score.total_cmp(&proposals[a].score));
    let mut used = vec![false; gts.len()];
    order
        .iter()
        .map(|&pi| {
            let p = &proposals[pi];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if used[gi] || g.video_id != p.video_id {
                    continue;
                }
                let o = tiou((p.t_start, p.t_end), (g.t_start, g.t_end));
                if best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((gi, o));
                }
            }
            match best {
                Some((gi, o)) if o >= threshold => {
                    used[gi] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// All-points interpolated AP from ranked hit flags and the GT count.
///
/// The precision envelope at each hit is the best precision at that rank or
/// later; AP is the mean of the envelope over the `n_gt` recall steps.
pub fn ap_from_hits(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
    }
    let mut envelope = precision;
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    for (i, &h) in hits.iter().enumerate() {
        if h {
            sum += envelope[i];
        }
    }
    sum / n_gt as f64
}

/// AP for one class. `None` when there is neither ground truth nor any
/// proposal; `0` when only proposals exist.
pub fn average_precision(
    proposals: &[Proposal],
    gts: &[GroundTruthSegment],
    threshold: f64,
) -> Option<f64> {
    if gts.is_empty() {
        return (!proposals.is_empty()).then_some(0.0);
    }
    Some(ap_from_hits(&match_ranked(proposals, gts, threshold), gts.len()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// `per_class_ap[c][i]`: AP of class `c` at `thresholds[i]`; `None` for
    /// classes without ground truth.
    pub per_class_ap: Vec<Vec<Option<f64>>>,
    pub map: Vec<f64>,
    pub avg_map: f64,
    pub entropy: Option<f64>,
    pub n_proposals: usize,
    pub n_gt: usize,
}

/// mAP at each threshold over the classes that have ground truth.
pub fn map_ladder(
    proposals: &[Proposal],
    gts: &[GroundTruthSegment],
    thresholds: &[f64],
    num_classes: usize,
) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::Input("no ground-truth segments to evaluate".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::config("iou", "empty tIoU ladder"));
    }
    let mut per_class_ap = vec![vec![None; thresholds.len()]; num_classes];
    for (c, row) in per_class_ap.iter_mut().enumerate() {
        let cls_gts: Vec<GroundTruthSegment> =
            gts.iter().filter(|g| g.class_id == c).cloned().collect();
        if cls_gts.is_empty() {
            continue;
        }
        let cls_props: Vec<Proposal> = proposals
            .iter()
            .filter(|p| p.class_id == c)
            .cloned()
            .collect();
        for (slot, &thr) in row.iter_mut().zip(thresholds) {
            *slot = average_precision(&cls_props, &cls_gts, thr);
        }
    }
    let evaluated: Vec<&Vec<Option<f64>>> =
        per_class_ap.iter().filter(|r| r[0].is_some()).collect();
    let map: Vec<f64> = (0..thresholds.len())
        .map(|i| {
            evaluated.iter().map(|r| r[i].unwrap_or(0.0)).sum::<f64>() / evaluated.len() as f64
        })
        .collect();
    let avg_map = map.iter().sum::<f64>() / map.len() as f64;
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        per_class_ap,
        map,
        avg_map,
        entropy: None,
        n_proposals: proposals.len(),
        n_gt: gts.len(),
    })
}

/// Running sum of `−d ln d` over adjacent-snippet differences.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EntropyAccumulator {
    pub sum: f64,
    pub count: usize,
}

impl EntropyAccumulator {
    /// Adds `|p_{t+1} − p_t|` for every adjacent pair and the given classes
    /// (all columns when `classes` is `None`).
    pub fn add(&mut self, probs: &Tensor2D, classes: Option<&[usize]>) {
        let all: Vec<usize>;
        let cols = match classes {
            Some(c) => c,
            None => {
                all = (0..probs.cols()).collect();
                &all
            }
        };
        for t in 0..probs.rows().saturating_sub(1) {
            for &c in cols {
                let d = libm::fabs(probs.get(t + 1, c) - probs.get(t, c)).clamp(0.0, 1.0);
                if d > 0.0 {
                    self.sum -= d * libm::log(d);
                }
                self.count += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.sum += other.sum;
        self.count += other.count;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

/// Mean entropy `H(d_t)` of one probability sequence.
pub fn boundary_entropy(probs: &Tensor2D, action_classes: Option<&[usize]>) -> f64 {
    let mut acc = EntropyAccumulator::default();
    acc.add(probs, action_classes);
    acc.mean()
}

/// Boundary candidates and localization scores of one model on one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoLocalization {
    pub video_id: String,
    pub snippet_duration: f64,
    pub candidates: Vec<(usize, Vec<Span>)>,
    pub tcas: Tensor2D,
}

/// Rescores model A's candidate intervals with model B's T-CAS, reruns
/// Soft-NMS, and evaluates. Intervals past B's extent are clipped.
pub fn swap_ablation(
    boundaries_from: &[VideoLocalization],
    scores_from: &[VideoLocalization],
    gts: &[GroundTruthSegment],
    cfg: &InferConfig,
    thresholds: &[f64],
    num_classes: usize,
) -> Result<EvalReport> {
    if boundaries_from.len() != scores_from.len() {
        return Err(Error::Input(format!(
            "{} videos with boundaries, {} with scores",
            boundaries_from.len(),
            scores_from.len()
        )));
    }
    let mut proposals = Vec::new();
    for (a, b) in boundaries_from.iter().zip(scores_from) {
        if a.video_id != b.video_id {
            return Err(Error::Input(format!(
                "video mismatch: {} vs {}",
                a.video_id, b.video_id
            )));
        }
        let t_len = b.tcas.rows();
        let clipped: Vec<(usize, Vec<Span>)> = a
            .candidates
            .iter()
            .map(|(c, spans)| {
                let spans = spans
                    .iter()
                    .filter_map(|s| {
                        let clipped = Span {
                            start: s.start.min(t_len),
                            end: s.end.min(t_len),
                        };
                        if clipped != *s {
                            log::warn!(
                                "swap_ablation: clipped {:?} to {t_len} snippets in {}",
                                s,
                                a.video_id
                            );
                        }
                        (!clipped.is_empty()).then_some(clipped)
                    })
                    .collect();
                (*c, spans)
            })
            .collect();
        proposals.extend(score_candidates(
            &a.video_id,
            &clipped,
            &b.tcas,
            b.snippet_duration,
            cfg,
        ));
    }
    map_ladder(&proposals, gts, thresholds, num_classes)
}

/// Labels of the four swap combinations: boundaries from the first model,
/// scores from the second.
pub const SWAP_LABELS: [&str; 4] = [
    "①Base+②Base",
    "①C3BN+②Base",
    "①Base+②C3BN",
    "①C3BN+②C3BN",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SwapTable {
    /// In [`SWAP_LABELS`] order.
    pub cells: Vec<(String, EvalReport)>,
}

/// Evaluates all four boundary/score combinations of a baseline model and a
/// regularized model.
pub fn swap_table(
    base: &[VideoLocalization],
    c3bn: &[VideoLocalization],
    gts: &[GroundTruthSegment],
    cfg: &InferConfig,
    thresholds: &[f64],
    num_classes: usize,
) -> Result<SwapTable> {
    let combos = [(base, base), (c3bn, base), (base, c3bn), (c3bn, c3bn)];
    let mut cells = Vec::with_capacity(4);
    for (label, (bounds, scores)) in SWAP_LABELS.iter().zip(combos) {
        let report = swap_ablation(bounds, scores, gts, cfg, thresholds, num_classes)?;
        cells.push((String::from(*label), report));
    }
    Ok(SwapTable { cells })
}
