//! Flat `key=value` configuration shared by every subcommand.
//!
//! Blank lines and `#` comments are ignored. Command-line flags are applied
//! after the file, so they win.

use std::fmt::Write as _;

use c3bn_core::eval::ladder;
use c3bn_core::infer::InferConfig;
use c3bn_core::model::Baseline;
use c3bn_core::synth::GeneratorConfig;
use c3bn_core::train::{OptimizerKind, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    /// Textual form of the tIoU ladder, kept for snapshots.
    pub iou_text: String,
    pub iou: Vec<f64>,
    pub entropy: bool,
    pub entropy_action_only: bool,
    /// Evaluate on the test split every N epochs during training; 0 disables.
    pub eval_every: usize,
    pub threads: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let ladder = "0.1:0.1:0.7";
        Self {
            seed: 0,
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            iou_text: ladder.into(),
            iou: parse_ladder(ladder).expect("default ladder"),
            entropy: false,
            entropy_action_only: false,
            eval_every: 0,
            threads: 1,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "classes",
    "feature_dim",
    "t_min",
    "t_max",
    "actions_min",
    "actions_max",
    "classes_per_video_max",
    "segment_min",
    "segment_max",
    "gap_min",
    "crossfade",
    "noise",
    "train_videos",
    "test_videos",
    "snippet_duration",
    "baseline",
    "embed_dim",
    "proj_dim",
    "kernel_width",
    "init_std",
    "c3bn",
    "epochs",
    "batch_size",
    "lr",
    "optimizer",
    "weight_decay",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambdas",
    "rho",
    "r",
    "gamma",
    "eval_every",
    "video_threshold",
    "tcas_thresholds",
    "oic_inflation",
    "nms_sigma",
    "nms_floor",
    "attention_modulation",
    "iou",
    "entropy",
    "entropy_scope",
    "threads",
];

/// `start:step:stop` or a comma-separated list.
pub fn parse_ladder(s: &str) -> std::result::Result<Vec<f64>, String> {
    let s = s.trim();
    if let [a, b, c] = s.split(':').collect::<Vec<_>>()[..] {
        let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}"));
        return ladder(num(a)?, num(b)?, num(c)?).map_err(|e| e.to_string());
    }
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if v.is_empty() || v.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err("thresholds must lie in (0, 1]".into());
    }
    Ok(v)
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "on" | "true" | "1" | "yes" => Some(true),
        "off" | "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = |what: &str| CliError::config(key, format!("{what}, got {v:?}"));
        macro_rules! num {
            ($t:ty) => {
                v.parse::<$t>().map_err(|_| bad(concat!("expected ", stringify!($t))))?
            };
        }
        let g = &mut self.generator;
        let t = &mut self.train;
        match key {
            "seed" => {
                self.seed = num!(u64);
                t.seed = self.seed;
            }
            "classes" => g.classes = num!(usize),
            "feature_dim" => g.feature_dim = num!(usize),
            "t_min" => g.t_min = num!(usize),
            "t_max" => g.t_max = num!(usize),
            "actions_min" => g.actions_min = num!(usize),
            "actions_max" => g.actions_max = num!(usize),
            "classes_per_video_max" => g.classes_per_video_max = num!(usize),
            "segment_min" => g.segment_min = num!(usize),
            "segment_max" => g.segment_max = num!(usize),
            "gap_min" => g.gap_min = num!(usize),
            "crossfade" => g.crossfade = num!(usize),
            "noise" => g.noise = num!(f64),
            "train_videos" => g.train_videos = num!(usize),
            "test_videos" => g.test_videos = num!(usize),
            "snippet_duration" => g.snippet_duration = num!(f64),
            "baseline" => t.model.baseline = Baseline::parse(v).ok_or_else(|| bad("expected mil or attention"))?,
            "embed_dim" => t.model.embed_dim = num!(usize),
            "proj_dim" => t.model.proj_dim = num!(usize),
            "kernel_width" => t.model.kernel_width = num!(usize),
            "init_std" => t.model.init_std = num!(f64),
            "c3bn" => t.c3bn = parse_bool(v).ok_or_else(|| bad("expected on or off"))?,
            "epochs" => t.epochs = num!(usize),
            "batch_size" => t.batch_size = num!(usize),
            "lr" => t.lr = num!(f64),
            "optimizer" => t.optimizer = OptimizerKind::parse(v).ok_or_else(|| bad("expected sgd or adam"))?,
            "weight_decay" => t.weight_decay = num!(f64),
            "lambda1" => t.weights.lambda1 = num!(f64),
            "lambda2" => t.weights.lambda2 = num!(f64),
            "lambda3" => t.weights.lambda3 = num!(f64),
            "lambdas" => {
                let parts: Vec<f64> = v
                    .split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("expected three comma-separated numbers"))?;
                let [a, b, c] = parts[..] else {
                    return Err(bad("expected three comma-separated numbers"));
                };
                (t.weights.lambda1, t.weights.lambda2, t.weights.lambda3) = (a, b, c);
            }
            "rho" => t.weights.rho = num!(f64),
            "r" => {
                t.weights.r = num!(usize);
                self.infer.topk_divisor = t.weights.r;
            }
            "gamma" => t.gamma = num!(f64),
            "eval_every" => self.eval_every = num!(usize),
            "video_threshold" => self.infer.video_threshold = num!(f64),
            "tcas_thresholds" => {
                self.infer.tcas_thresholds = v
                    .split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("expected comma-separated numbers"))?;
            }
            "oic_inflation" => self.infer.oic_inflation = num!(f64),
            "nms_sigma" => self.infer.nms_sigma = num!(f64),
            "nms_floor" => self.infer.nms_floor = num!(f64),
            "attention_modulation" => {
                self.infer.attention_modulation = parse_bool(v).ok_or_else(|| bad("expected on or off"))?
            }
            "iou" => {
                self.iou = parse_ladder(v).map_err(|e| CliError::config(key, e))?;
                self.iou_text = v.into();
            }
            "entropy" => self.entropy = parse_bool(v).ok_or_else(|| bad("expected on or off"))?,
            "entropy_scope" => {
                self.entropy_action_only = match v {
                    "all" => false,
                    "action" => true,
                    _ => return Err(bad("expected all or action")),
                }
            }
            "threads" => {
                self.threads = num!(usize);
                if self.threads == 0 {
                    return Err(bad("expected >= 1"));
                }
            }
            _ => return Err(CliError::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::config(format!("line {}", i + 1), format!("expected key=value, got {line:?}"))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        s.apply_text(text)?;
        Ok(s)
    }

    /// Checks every section, so a bad key fails regardless of subcommand.
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        let mut train = self.train.clone();
        train.model.classes = self.generator.classes;
        train.model.feature_dim = self.generator.feature_dim;
        train.validate()?;
        self.infer.validate()?;
        Ok(())
    }

    /// Canonical dump of every resolved value.
    pub fn to_text(&self) -> String {
        let g = &self.generator;
        let t = &self.train;
        let w = &t.weights;
        let i = &self.infer;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("seed", self.seed.to_string());
        kv("classes", g.classes.to_string());
        kv("feature_dim", g.feature_dim.to_string());
        kv("t_min", g.t_min.to_string());
        kv("t_max", g.t_max.to_string());
        kv("actions_min", g.actions_min.to_string());
        kv("actions_max", g.actions_max.to_string());
        kv("classes_per_video_max", g.classes_per_video_max.to_string());
        kv("segment_min", g.segment_min.to_string());
        kv("segment_max", g.segment_max.to_string());
        kv("gap_min", g.gap_min.to_string());
        kv("crossfade", g.crossfade.to_string());
        kv("noise", g.noise.to_string());
        kv("train_videos", g.train_videos.to_string());
        kv("test_videos", g.test_videos.to_string());
        kv("snippet_duration", g.snippet_duration.to_string());
        kv("baseline", t.model.baseline.name().into());
        kv("embed_dim", t.model.embed_dim.to_string());
        kv("proj_dim", t.model.proj_dim.to_string());
        kv("kernel_width", t.model.kernel_width.to_string());
        kv("init_std", t.model.init_std.to_string());
        kv("c3bn", if t.c3bn { "on" } else { "off" }.into());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr.to_string());
        kv("optimizer", t.optimizer.name().into());
        kv("weight_decay", t.weight_decay.to_string());
        kv("lambda1", w.lambda1.to_string());
        kv("lambda2", w.lambda2.to_string());
        kv("lambda3", w.lambda3.to_string());
        kv("rho", w.rho.to_string());
        kv("r", w.r.to_string());
        kv("gamma", t.gamma.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("video_threshold", i.video_threshold.to_string());
        kv("tcas_thresholds", fmt_list(&i.tcas_thresholds));
        kv("oic_inflation", i.oic_inflation.to_string());
        kv("nms_sigma", i.nms_sigma.to_string());
        kv("nms_floor", i.nms_floor.to_string());
        kv("attention_modulation", if i.attention_modulation { "on" } else { "off" }.into());
        kv("iou", self.iou_text.clone());
        kv("entropy", if self.entropy { "on" } else { "off" }.into());
        kv("entropy_scope", if self.entropy_action_only { "action" } else { "all" }.into());
        kv("threads", self.threads.to_string());
        s
    }
}
