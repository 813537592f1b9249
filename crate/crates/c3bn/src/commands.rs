//! Subcommand bodies. Each takes fully resolved [`Settings`] and writes its
//! outputs under an experiment directory.

use std::fs;
use std::path::{Path, PathBuf};

use c3bn_core::eval::{swap_table, EvalReport, SwapTable};
use c3bn_core::experiment::{evaluate, EvalOptions, EvalSet, Evaluation};
use c3bn_core::losses::LossWeights;
use c3bn_core::model::ModelConfig;
use c3bn_core::synth::{generate_dataset, GeneratorConfig, SyntheticDataset};
use c3bn_core::train::{gradcheck_mode, train_with_hook, EvalSnapshot, GradCheckConfig, NamedGradCheck};

use crate::error::{CliError, Result};
use crate::exec::RayonExecutor;
use crate::formats::{read_checkpoint, write_atomic, write_checkpoint, Checkpoint};
use crate::manifest::{load_dataset, manifest_path, write_dataset, LoadedSplit};
use crate::plot;
use crate::report;
use crate::settings::Settings;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Copies the input config verbatim and records every resolved value,
/// including the seed.
pub fn write_snapshots(out: &Path, config_text: Option<&str>, settings: &Settings) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    if let Some(text) = config_text {
        write_atomic(&out.join("config.txt"), text.as_bytes())?;
    }
    write_atomic(&out.join("resolved.txt"), settings.to_text().as_bytes())
}

fn executor(settings: &Settings) -> Result<RayonExecutor> {
    RayonExecutor::new(settings.threads).map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn eval_options(settings: &Settings) -> EvalOptions {
    EvalOptions {
        entropy: settings.entropy,
        entropy_action_only: settings.entropy_action_only,
    }
}

pub fn gen(settings: &Settings, out: &Path) -> Result<SyntheticDataset> {
    settings.validate()?;
    let ds = generate_dataset(&settings.generator, settings.seed)?;
    write_dataset(out, &ds)?;
    Ok(ds)
}

pub fn load_split(data: &Path, split: &str) -> Result<LoadedSplit> {
    let path = if data.is_file() {
        data.to_path_buf()
    } else {
        manifest_path(data, split)
    };
    load_dataset(&path)
}

fn eval_set(split: &LoadedSplit) -> EvalSet {
    EvalSet {
        videos: split.videos.clone(),
        segments: split.segments.clone(),
    }
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log_csv: String,
}

pub fn train(settings: &Settings, data: &Path, out: &Path) -> Result<TrainOutcome> {
    settings.validate()?;
    let train_split = load_split(data, "train")?;
    let mut cfg = settings.train.clone();
    cfg.seed = settings.seed;
    cfg.model.classes = train_split.header.classes;
    cfg.model.feature_dim = train_split.header.feature_dim;
    cfg.validate()?;
    let test = if settings.eval_every > 0 {
        Some(eval_set(&load_split(data, "test")?))
    } else {
        None
    };
    let exec = executor(settings)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut hook_err: Option<CliError> = None;
    let mut hook = |epoch: usize, params: &c3bn_core::model::ModelParams, _: &c3bn_core::train::EpochRecord| {
        let ckpt = Checkpoint {
            params: params.clone(),
            seed: settings.seed,
            epoch: epoch + 1,
            c3bn: cfg.c3bn,
        };
        if let Err(e) = write_checkpoint(&ckpt_path, &ckpt) {
            hook_err = Some(e);
            return Err(c3bn_core::Error::Input("checkpoint write failed".into()));
        }
        log::info!("epoch {} done", epoch + 1);
        match &test {
            Some(set) if (epoch + 1).is_multiple_of(settings.eval_every) => {
                let ev = evaluate(params, set, &settings.infer, &settings.iou, EvalOptions::default(), &exec)?;
                Ok(Some(EvalSnapshot {
                    avg_map: ev.report.avg_map,
                    entropy: ev.report.entropy.unwrap_or(0.0),
                }))
            }
            _ => Ok(None),
        }
    };
    let result = train_with_hook(&train_split.videos, &cfg, &exec, &mut hook);
    if let Some(e) = hook_err {
        return Err(e);
    }
    let (_, log) = result?;
    let log_csv = report::train_log_csv(&log);
    write_atomic(&out.join("train_log.csv"), log_csv.as_bytes())?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        log_csv,
    })
}

fn open_checkpoint(path: &Path, split: &LoadedSplit) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint not found: {}", path.display())));
    }
    let ckpt = read_checkpoint(path)?;
    let m = &ckpt.params.config;
    if m.classes != split.header.classes || m.feature_dim != split.header.feature_dim {
        return Err(CliError::Usage(format!(
            "checkpoint expects {} classes and {} channels, data has {} and {}",
            m.classes, m.feature_dim, split.header.classes, split.header.feature_dim
        )));
    }
    Ok(ckpt)
}

fn run_eval(settings: &Settings, ckpt: &Checkpoint, split: &LoadedSplit) -> Result<Evaluation> {
    let mut infer = settings.infer.clone();
    infer.topk_divisor = settings.train.weights.r;
    let exec = executor(settings)?;
    Ok(evaluate(
        &ckpt.params,
        &eval_set(split),
        &infer,
        &settings.iou,
        eval_options(settings),
        &exec,
    )?)
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub table: String,
}

pub fn eval(settings: &Settings, checkpoint: &Path, data: &Path, split: &str, out: &Path) -> Result<EvalOutcome> {
    settings.validate()?;
    let split = load_split(data, split)?;
    let ckpt = open_checkpoint(checkpoint, &split)?;
    let ev = run_eval(settings, &ckpt, &split)?;
    let table = report::eval_table(&ev.report);
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_atomic(&out.join("proposals.csv"), report::proposals_csv(&ev.proposals()).as_bytes())?;
    write_atomic(&out.join("eval.csv"), report::eval_csv(&ev.report, settings.seed).as_bytes())?;
    write_atomic(&out.join("eval.txt"), table.as_bytes())?;
    Ok(EvalOutcome {
        report: ev.report,
        table,
    })
}

pub struct AblateOutcome {
    pub table: SwapTable,
    pub text: String,
}

/// `base` is the first-named model in the cell labels, `c3bn` the second.
pub fn ablate(settings: &Settings, base: &Path, c3bn: &Path, data: &Path, split: &str, out: &Path) -> Result<AblateOutcome> {
    settings.validate()?;
    let split = load_split(data, split)?;
    let a = run_eval(settings, &open_checkpoint(base, &split)?, &split)?;
    let b = run_eval(settings, &open_checkpoint(c3bn, &split)?, &split)?;
    let table = swap_table(
        &a.localizations(),
        &b.localizations(),
        &split.segments,
        &settings.infer,
        &settings.iou,
        split.header.classes,
    )?;
    let text = report::ablation_table(&table);
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_atomic(&out.join("ablation.csv"), report::ablation_csv(&table, settings.seed).as_bytes())?;
    write_atomic(&out.join("ablation.txt"), text.as_bytes())?;
    Ok(AblateOutcome { table, text })
}

/// Toy problem for the gradient check: one 5-snippet video with 8 channels.
pub fn gradcheck_problem(settings: &Settings) -> Result<(c3bn_core::synth::FeatureSequence, ModelConfig)> {
    let gen = GeneratorConfig {
        classes: 3,
        feature_dim: 8,
        t_min: 5,
        t_max: 5,
        actions_min: 1,
        actions_max: 1,
        classes_per_video_max: 1,
        segment_min: 2,
        segment_max: 3,
        gap_min: 1,
        crossfade: 0,
        noise: 0.3,
        train_videos: 1,
        test_videos: 1,
        snippet_duration: 1.0,
    };
    let ds = generate_dataset(&gen, settings.seed)?;
    let model = ModelConfig {
        baseline: settings.train.model.baseline,
        classes: 3,
        feature_dim: 8,
        embed_dim: 8,
        proj_dim: 4,
        kernel_width: 3,
        init_std: 0.5,
    };
    Ok((ds.train[0].sequence.clone(), model))
}

pub fn gradcheck(settings: &Settings, corrupt: Option<(usize, f64)>) -> Result<NamedGradCheck> {
    settings.validate()?;
    let (video, model) = gradcheck_problem(settings)?;
    let weights = LossWeights {
        r: 2,
        ..settings.train.weights
    };
    let check = GradCheckConfig {
        seed: settings.seed,
        corrupt,
        ..GradCheckConfig::default()
    };
    Ok(gradcheck_mode(&video, &model, &weights, settings.train.gamma, &check)?)
}

pub fn gradcheck_text(r: &NamedGradCheck) -> String {
    let mut s = String::new();
    for (name, p) in r.names.iter().zip(&r.report.params) {
        s.push_str(&format!(
            "{name} max_rel_error={:.3e} {}\n",
            p.max_rel_error,
            if p.failures.is_empty() { "ok" } else { "FAIL" }
        ));
        for f in &p.failures {
            s.push_str(&format!(
                "  coord {} analytic={:.12e} numeric={:.12e}\n",
                f.coord, f.analytic, f.numeric
            ));
        }
    }
    s.push_str(&format!(
        "max_rel_error={:.3e} tolerance={:.1e} {}\n",
        r.report.max_rel_error(),
        r.report.tolerance,
        if r.report.passed() { "PASS" } else { "FAIL" }
    ));
    s
}

pub fn plot(settings: &Settings, checkpoint: &Path, data: &Path, split: &str, video_id: &str, out: &Path) -> Result<String> {
    settings.validate()?;
    let split = load_split(data, split)?;
    let ckpt = open_checkpoint(checkpoint, &split)?;
    let video = split
        .find(video_id)
        .ok_or_else(|| CliError::Usage(format!("unknown video id {video_id:?}")))?;
    let mut infer = settings.infer.clone();
    infer.topk_divisor = settings.train.weights.r;
    let o = c3bn_core::infer::run_inference(&ckpt.params, video, &infer)?;
    let gts: Vec<_> = split.segments_of(video_id).cloned().collect();
    let mut classes: Vec<usize> = o.classes.clone();
    classes.extend(gts.iter().map(|g| g.class_id));
    classes.sort_unstable();
    classes.dedup();
    let svg = plot::render(video_id, &o.tcas, video.snippet_duration, &classes, &gts, &o.proposals);
    write_atomic(out, svg.as_bytes())?;
    Ok(svg)
}
