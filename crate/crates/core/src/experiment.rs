//! Train/evaluate orchestration shared by the command line and the
//! benchmark tests.

use alloc::vec::Vec;

use crate::error::Result;
use crate::eval::{map_ladder, swap_table, EntropyAccumulator, EvalReport, SwapTable, VideoLocalization};
use crate::infer::{run_inference, InferConfig, InferenceOutput, Proposal};
use crate::model::ModelParams;
use crate::synth::{positive_classes, GroundTruthSegment, SyntheticDataset, SyntheticVideo};
use crate::train::{train, Executor, TrainConfig, TrainLog};

/// A labelled evaluation set: sequences plus their ground truth.
#[derive(Clone, Debug, Default)]
pub struct EvalSet {
    pub videos: Vec<crate::synth::FeatureSequence>,
    pub segments: Vec<GroundTruthSegment>,
}

impl EvalSet {
    pub fn from_synthetic(videos: &[SyntheticVideo]) -> Self {
        Self {
            videos: videos.iter().map(|v| v.sequence.clone()).collect(),
            segments: videos.iter().flat_map(|v| v.segments.iter().cloned()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub entropy: bool,
    /// Restrict `H(d_t)` to each video's positive classes.
    pub entropy_action_only: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            entropy: true,
            entropy_action_only: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub outputs: Vec<InferenceOutput>,
}

impl Evaluation {
    pub fn proposals(&self) -> Vec<Proposal> {
        self.outputs.iter().flat_map(|o| o.proposals.iter().cloned()).collect()
    }

    pub fn localizations(&self) -> Vec<VideoLocalization> {
        self.outputs
            .iter()
            .map(|o| VideoLocalization {
                video_id: o.video_id.clone(),
                snippet_duration: o.snippet_duration,
                candidates: o.candidates.clone(),
                tcas: o.tcas.clone(),
            })
            .collect()
    }
}

pub fn evaluate<E: Executor>(
    params: &ModelParams,
    set: &EvalSet,
    infer: &InferConfig,
    thresholds: &[f64],
    opts: EvalOptions,
    exec: &E,
) -> Result<Evaluation> {
    infer.validate()?;
    let outputs: Vec<Result<InferenceOutput>> =
        exec.map(set.videos.len(), |i| run_inference(params, &set.videos[i], infer));
    let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;
    let proposals: Vec<Proposal> = outputs.iter().flat_map(|o| o.proposals.iter().cloned()).collect();
    let mut report = map_ladder(&proposals, &set.segments, thresholds, params.config.classes)?;
    if opts.entropy {
        let mut acc = EntropyAccumulator::default();
        for (o, v) in outputs.iter().zip(&set.videos) {
            if opts.entropy_action_only {
                acc.add(&o.probs, Some(&positive_classes(&v.label)));
            } else {
                acc.add(&o.probs, None);
            }
        }
        report.entropy = Some(acc.mean());
    }
    Ok(Evaluation { report, outputs })
}

/// Baseline and regularized runs on the same data and seed.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub base: (ModelParams, TrainLog, Evaluation),
    pub c3bn: (ModelParams, TrainLog, Evaluation),
    pub swap: SwapTable,
}

/// Trains `cfg` with the regularizers off and on, evaluates both on the test
/// split, and builds the swap table.
pub fn compare<E: Executor>(
    dataset: &SyntheticDataset,
    cfg: &TrainConfig,
    infer: &InferConfig,
    thresholds: &[f64],
    opts: EvalOptions,
    exec: &E,
) -> Result<Comparison> {
    let train_set: Vec<_> = dataset.train.iter().map(|v| v.sequence.clone()).collect();
    let test = EvalSet::from_synthetic(&dataset.test);
    let run = |c3bn: bool| -> Result<(ModelParams, TrainLog, Evaluation)> {
        let cfg = TrainConfig { c3bn, ..cfg.clone() };
        let (params, log) = train(&train_set, &cfg, exec)?;
        let ev = evaluate(&params, &test, infer, thresholds, opts, exec)?;
        Ok((params, log, ev))
    };
    let base = run(false)?;
    let c3bn = run(true)?;
    let swap = swap_table(
        &base.2.localizations(),
        &c3bn.2.localizations(),
        &test.segments,
        infer,
        thresholds,
        dataset.config.classes,
    )?;
    Ok(Comparison { base, c3bn, swap })
}
