//! Test-time localization: class selection, proposal generation from the
//! T-CAS by multi-threshold merging, outer-inner-contrastive scoring, and
//! Soft-NMS.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{softmax_in_place, Tape};
use crate::error::{Error, Result};
use crate::eval::tiou;
use crate::losses::topk_count;
use crate::model::{self, Baseline, ModelParams};
use crate::synth::FeatureSequence;
use crate::tensor::Tensor2D;

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub video_id: String,
    pub class_id: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub score: f64,
}

/// Half-open snippet range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn seconds(&self, snippet_duration: f64) -> (f64, f64) {
        (
            self.start as f64 * snippet_duration,
            self.end as f64 * snippet_duration,
        )
    }

    /// Snippet range for a time interval, clipped to `0..t_len`.
    pub fn from_seconds(t_start: f64, t_end: f64, snippet_duration: f64, t_len: usize) -> Self {
        let to_index = |t: f64| {
            let i = libm::round(t / snippet_duration);
            if i <= 0.0 {
                0
            } else {
                (i as usize).min(t_len)
            }
        };
        Self {
            start: to_index(t_start),
            end: to_index(t_end),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferConfig {
    pub video_threshold: f64,
    /// Strictly increasing, each in `(0, 1)`.
    pub tcas_thresholds: Vec<f64>,
    pub oic_inflation: f64,
    pub nms_sigma: f64,
    /// Proposals scoring below this are dropped. Must be `>= 0` so the
    /// multiplicative decay can never raise a score.
    pub nms_floor: f64,
    /// Multiply probabilities by attention before thresholding (attention
    /// baseline only).
    pub attention_modulation: bool,
    /// Top-k divisor for MIL video scores.
    pub topk_divisor: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            video_threshold: 0.1,
            tcas_thresholds: (0..9).map(|i| round9(0.10 + 0.05 * i as f64)).collect(),
            oic_inflation: 0.25,
            nms_sigma: 0.5,
            nms_floor: 0.0,
            attention_modulation: true,
            topk_divisor: 8,
        }
    }
}

pub(crate) fn round9(v: f64) -> f64 {
    libm::round(v * 1e9) / 1e9
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tcas_thresholds.is_empty() {
            return Err(Error::config("tcas_thresholds", "need at least one threshold"));
        }
        if self
            .tcas_thresholds
            .iter()
            .any(|&t| !(t > 0.0 && t < 1.0))
        {
            return Err(Error::config("tcas_thresholds", "thresholds must lie in (0, 1)"));
        }
        if self.tcas_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("tcas_thresholds", "thresholds must be strictly increasing"));
        }
        if !(self.oic_inflation > 0.0) {
            return Err(Error::config("oic_inflation", "must be > 0"));
        }
        if !(self.nms_sigma > 0.0) {
            return Err(Error::config("nms_sigma", "must be > 0"));
        }
        if !(self.nms_floor >= 0.0) {
            return Err(Error::config("nms_floor", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.video_threshold) {
            return Err(Error::config("video_threshold", "must lie in [0, 1]"));
        }
        if self.topk_divisor < 1 {
            return Err(Error::config("topk_divisor", "must be >= 1"));
        }
        Ok(())
    }
}

/// Classes with `p̄_c ≥ θ_v`, or the argmax (lowest index on ties) if none.
pub fn select_classes(video_probs: &[f64], threshold: f64) -> Vec<usize> {
    let picked: Vec<usize> = video_probs
        .iter()
        .enumerate()
        .filter_map(|(c, &p)| (p >= threshold).then_some(c))
        .collect();
    if !picked.is_empty() || video_probs.is_empty() {
        return picked;
    }
    let mut best = 0;
    for (c, &p) in video_probs.iter().enumerate() {
        if p > video_probs[best] {
            best = c;
        }
    }
    vec![best]
}

/// Maximal runs with score `≥ θ` for each threshold, exact duplicates removed.
/// Spans are returned in first-seen order.
pub fn generate_spans(scores: &[f64], thresholds: &[f64]) -> Vec<Span> {
    let mut spans: Vec<Span> = Vec::new();
    for &theta in thresholds {
        let mut start = None;
        for (t, &s) in scores.iter().chain(core::iter::once(&f64::NEG_INFINITY)).enumerate() {
            match (start, s >= theta) {
                (None, true) => start = Some(t),
                (Some(st), false) => {
                    let span = Span { start: st, end: t };
                    if !spans.contains(&span) {
                        spans.push(span);
                    }
                    start = None;
                }
                _ => {}
            }
        }
    }
    spans
}

/// Proposal intervals in seconds, `[i·dur, (j+1)·dur)` for a run `i..=j`.
pub fn generate_proposals(
    scores: &[f64],
    thresholds: &[f64],
    snippet_duration: f64,
) -> Vec<(f64, f64)> {
    generate_spans(scores, thresholds)
        .iter()
        .map(|s| s.seconds(snippet_duration))
        .collect()
}

/// Inner mean minus the mean over both flanks, each `ceil(ι·len)` snippets
/// long and clipped to the video.
pub fn oic_score(span: Span, scores: &[f64], inflation: f64) -> f64 {
    let t_len = scores.len();
    let (start, end) = (span.start.min(t_len), span.end.min(t_len));
    if end <= start {
        return 0.0;
    }
    let inner = scores[start..end].iter().sum::<f64>() / (end - start) as f64;
    let flank = libm::ceil(inflation * (end - start) as f64) as usize;
    let left = &scores[start.saturating_sub(flank)..start];
    let right = &scores[end..(end + flank).min(t_len)];
    let n_outer = left.len() + right.len();
    let outer = if n_outer == 0 {
        0.0
    } else {
        (left.iter().sum::<f64>() + right.iter().sum::<f64>()) / n_outer as f64
    };
    inner - outer
}

/// Gaussian Soft-NMS over one class's proposals.
///
/// Repeatedly keeps the highest-scoring proposal (ties: earlier start, then
/// lower input index), decays every remaining score by
/// `exp(−tIoU² / sigma)`, and drops any score below `floor`. Output is in
/// pick order with the score each proposal had when picked.
pub fn soft_nms(proposals: &[Proposal], sigma: f64, floor: f64) -> Vec<Proposal> {
    let mut live: Vec<(usize, f64)> = proposals
        .iter()
        .enumerate()
        .filter(|(_, p)| p.score >= floor)
        .map(|(i, p)| (i, p.score))
        .collect();
    let mut kept = Vec::with_capacity(live.len());
    while !live.is_empty() {
        let mut best = 0;
        for k in 1..live.len() {
            let (i, s) = live[k];
            let (bi, bs) = live[best];
            let better = s > bs
                || (s == bs
                    && (proposals[i].t_start < proposals[bi].t_start
                        || (proposals[i].t_start == proposals[bi].t_start && i < bi)));
            if better {
                best = k;
            }
        }
        let (pick, score) = live.remove(best);
        let picked = &proposals[pick];
        let a = (picked.t_start, picked.t_end);
        live.retain_mut(|(i, s)| {
            let o = tiou(a, (proposals[*i].t_start, proposals[*i].t_end));
            *s *= libm::exp(-(o * o) / sigma);
            *s >= floor
        });
        kept.push(Proposal {
            score,
            ..picked.clone()
        });
    }
    kept
}

/// Per-video inference result.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceOutput {
    pub video_id: String,
    pub snippet_duration: f64,
    /// Video-level action-class probabilities.
    pub video_probs: Vec<f64>,
    pub classes: Vec<usize>,
    /// Raw snippet probabilities (`T × C_out`).
    pub probs: Tensor2D,
    /// Localization scores over the action classes (`T × C`).
    pub tcas: Tensor2D,
    /// Pre-NMS candidate intervals per selected class.
    pub candidates: Vec<(usize, Vec<Span>)>,
    pub proposals: Vec<Proposal>,
}

/// Video-level probabilities over the action classes and the T-CAS used for
/// thresholding.
pub fn video_scores(
    params: &ModelParams,
    video: &FeatureSequence,
    cfg: &InferConfig,
) -> Result<(Vec<f64>, Tensor2D, Tensor2D)> {
    let snap = model::evaluate(params, &video.features)?;
    let classes = params.config.classes;
    let t_len = snap.probs.rows();
    let mut tcas = Tensor2D::zeros(t_len, classes);
    let video_probs = match (params.config.baseline, &snap.attention) {
        (Baseline::Attention, Some(att)) => {
            let mut tape = Tape::new();
            let p = tape.leaf(snap.probs.clone());
            let w = tape.leaf(Tensor2D::column(att)?);
            let pooled = tape.attention_pool(p, w)?;
            for (t, &a) in att.iter().enumerate() {
                let gain = if cfg.attention_modulation { a } else { 1.0 };
                for c in 0..classes {
                    tcas.set(t, c, gain * snap.probs.get(t, c));
                }
            }
            tape.value(pooled).row(0)[..classes].to_vec()
        }
        _ => {
            let mut tape = Tape::new();
            let s = tape.leaf(snap.logits.clone());
            let pooled = tape.topk_pool(s, topk_count(t_len, cfg.topk_divisor))?;
            let mut probs = tape.value(pooled).row(0).to_vec();
            softmax_in_place(&mut probs);
            for t in 0..t_len {
                for c in 0..classes {
                    tcas.set(t, c, snap.probs.get(t, c));
                }
            }
            probs
        }
    };
    Ok((video_probs, tcas, snap.probs))
}

/// Scores candidate spans with OIC on `tcas` and applies Soft-NMS per class.
pub fn score_candidates(
    video_id: &str,
    candidates: &[(usize, Vec<Span>)],
    tcas: &Tensor2D,
    snippet_duration: f64,
    cfg: &InferConfig,
) -> Vec<Proposal> {
    let mut out = Vec::new();
    for (class_id, spans) in candidates {
        let column = tcas.column_values(*class_id);
        let scored: Vec<Proposal> = spans
            .iter()
            .map(|&span| {
                let (t_start, t_end) = span.seconds(snippet_duration);
                Proposal {
                    video_id: video_id.into(),
                    class_id: *class_id,
                    t_start,
                    t_end,
                    score: oic_score(span, &column, cfg.oic_inflation),
                }
            })
            .collect();
        out.extend(soft_nms(&scored, cfg.nms_sigma, cfg.nms_floor));
    }
    out
}

/// Candidate spans for every selected class of a T-CAS.
pub fn localize(tcas: &Tensor2D, classes: &[usize], cfg: &InferConfig) -> Vec<(usize, Vec<Span>)> {
    classes
        .iter()
        .map(|&c| (c, generate_spans(&tcas.column_values(c), &cfg.tcas_thresholds)))
        .collect()
}

/// Full pipeline on one video given its T-CAS and video-level scores.
pub fn infer_from_scores(
    video_id: &str,
    snippet_duration: f64,
    video_probs: Vec<f64>,
    tcas: Tensor2D,
    probs: Tensor2D,
    cfg: &InferConfig,
) -> Result<InferenceOutput> {
    cfg.validate()?;
    if video_probs.len() != tcas.cols() {
        return Err(Error::shape(
            "run_inference",
            format!("{} video scores for {} T-CAS columns", video_probs.len(), tcas.cols()),
        ));
    }
    let classes = select_classes(&video_probs, cfg.video_threshold);
    let candidates = localize(&tcas, &classes, cfg);
    let proposals = score_candidates(video_id, &candidates, &tcas, snippet_duration, cfg);
    Ok(InferenceOutput {
        video_id: video_id.into(),
        snippet_duration,
        video_probs,
        classes,
        probs,
        tcas,
        candidates,
        proposals,
    })
}

pub fn run_inference(
    params: &ModelParams,
    video: &FeatureSequence,
    cfg: &InferConfig,
) -> Result<InferenceOutput> {
    let (video_probs, tcas, probs) = video_scores(params, video, cfg)?;
    infer_from_scores(
        &video.video_id,
        video.snippet_duration,
        video_probs,
        tcas,
        probs,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prop(start: f64, end: f64, score: f64) -> Proposal {
        Proposal {
            video_id: "v".into(),
            class_id: 0,
            t_start: start,
            t_end: end,
            score,
        }
    }

    #[test]
    fn select_classes_examples() {
        assert_eq!(select_classes(&[0.7, 0.3], 0.5), vec![0]);
        assert_eq!(select_classes(&[0.2, 0.45, 0.35], 0.5), vec![1]);
        assert_eq!(select_classes(&[0.4, 0.4, 0.2], 0.5), vec![0]);
        assert_eq!(select_classes(&[0.2, 0.5, 0.3], 0.0), vec![0, 1, 2]);
    }

    #[test]
    fn proposal_examples() {
        let one = generate_spans(&[0.1, 0.9, 0.9, 0.1], &[0.5]);
        assert_eq!(one, vec![Span { start: 1, end: 3 }]);
        let two = generate_spans(&[0.9, 0.1, 0.9], &[0.5]);
        assert_eq!(two, vec![Span { start: 0, end: 1 }, Span { start: 2, end: 3 }]);
        let ladder = generate_spans(&[0.3, 0.6, 0.8], &[0.5, 0.7]);
        assert_eq!(ladder, vec![Span { start: 1, end: 3 }, Span { start: 2, end: 3 }]);
        // identical runs across thresholds are kept once
        let dup = generate_spans(&[0.0, 0.9, 0.9, 0.0], &[0.5, 0.7]);
        assert_eq!(dup.len(), 1);
        let secs = generate_proposals(&[0.1, 0.9, 0.9, 0.1], &[0.5], 0.5);
        assert_eq!(secs, vec![(0.5, 1.5)]);
    }

    #[test]
    fn oic_examples() {
        let perfect = [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        assert_eq!(oic_score(Span { start: 2, end: 6 }, &perfect, 0.25), 1.0);
        let flat = [0.4; 8];
        assert!(oic_score(Span { start: 2, end: 5 }, &flat, 0.25).abs() < 1e-15);
        let hand = [0.2, 0.8, 0.6, 0.4];
        let s = oic_score(Span { start: 1, end: 3 }, &hand, 0.25);
        assert!((s - 0.4).abs() < 1e-12);
        // whole-video proposal has no flanks
        assert_eq!(oic_score(Span { start: 0, end: 4 }, &hand, 0.25), 0.5);
    }

    #[test]
    fn soft_nms_examples() {
        let disjoint = [prop(0.0, 1.0, 0.9), prop(2.0, 3.0, 0.8)];
        let kept = soft_nms(&disjoint, 0.5, 0.0);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(kept[1].score, 0.8);

        let dup = [prop(0.0, 1.0, 0.9), prop(0.0, 1.0, 0.9)];
        let kept = soft_nms(&dup, 0.5, 0.9 * libm::exp(-2.0) + 1e-9);
        assert_eq!(kept.len(), 1);

        // [0,2] vs [0,1]: tIoU = 0.5
        let half = [prop(0.0, 2.0, 1.0), prop(0.0, 1.0, 0.5)];
        let kept = soft_nms(&half, 0.5, 0.0);
        assert!((kept[1].score - 0.5 * libm::exp(-0.5)).abs() < 1e-12);
    }

    #[test]
    fn soft_nms_tie_breaking() {
        let tied = [prop(3.0, 4.0, 0.5), prop(1.0, 2.0, 0.5), prop(1.0, 2.5, 0.5)];
        let kept = soft_nms(&tied, 0.5, 0.0);
        assert_eq!(kept[0].t_start, 1.0);
        assert_eq!(kept[0].t_end, 2.0);
    }

    #[test]
    fn config_validation() {
        InferConfig::default().validate().unwrap();
        assert_eq!(InferConfig::default().tcas_thresholds.len(), 9);
        assert_eq!(InferConfig::default().tcas_thresholds[8], 0.5);
        let bad = InferConfig {
            tcas_thresholds: vec![0.5, 0.3],
            ..InferConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = InferConfig {
            tcas_thresholds: vec![],
            ..InferConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = InferConfig {
            oic_inflation: 0.0,
            ..InferConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn span_seconds_round_trip() {
        let s = Span { start: 3, end: 9 };
        let (a, b) = s.seconds(0.64);
        assert_eq!(Span::from_seconds(a, b, 0.64, 20), s);
        assert_eq!(Span::from_seconds(-1.0, 100.0, 0.64, 20), Span { start: 0, end: 20 });
    }
}
