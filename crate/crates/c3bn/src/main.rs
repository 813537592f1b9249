use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use c3bn::commands;
use c3bn::settings::Settings;
use c3bn::{CliError, Result};

#[derive(Parser)]
#[command(name = "c3bn", version, about = "Micro-augmented consistency training for weakly-supervised action localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; defaults to $C3BN_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Extra key=value overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write a checkpoint plus the loss log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        baseline: Option<String>,
        /// on | off
        #[arg(long)]
        c3bn: Option<String>,
        /// lambda1,lambda2,lambda3
        #[arg(long)]
        lambdas: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Run inference and score proposals against ground truth.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// start:step:stop or a comma list of tIoU thresholds.
        #[arg(long)]
        iou: Option<String>,
        /// Add the boundary entropy row.
        #[arg(long)]
        entropy: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Swap boundary localization and proposal scoring between two models.
    Ablate {
        /// Baseline checkpoint.
        #[arg(long)]
        base: PathBuf,
        /// Regularized checkpoint.
        #[arg(long)]
        c3bn: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        iou: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Check analytic gradients of the full objective on a toy problem.
    Gradcheck {
        #[arg(long)]
        baseline: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Render one video's T-CAS, ground truth, and proposals as SVG.
    Plot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        video: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
}

/// Defaults, then `$C3BN_SEED`, then the config file, then flags.
fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<(Settings, Option<String>)> {
    let mut s = Settings::default();
    if let Ok(v) = std::env::var("C3BN_SEED") {
        s.set("seed", &v).map_err(|_| CliError::config("C3BN_SEED", format!("expected u64, got {v:?}")))?;
    }
    let text = match &common.config {
        Some(p) => {
            let t = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            s.apply_text(&t)?;
            Some(t)
        }
        None => None,
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        s.set(k.trim(), v)?;
    }
    if let Some(seed) = common.seed {
        s.set("seed", &seed.to_string())?;
    }
    if let Some(t) = common.threads {
        s.set("threads", &t.to_string())?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            s.set(k, v)?;
        }
    }
    s.validate()?;
    Ok((s, text))
}

fn snapshot(out: &Path, text: &Option<String>, s: &Settings) -> Result<()> {
    commands::write_snapshots(out, text.as_deref(), s)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { out, common } => {
            let (s, text) = resolve(&common, &[])?;
            let ds = commands::gen(&s, &out)?;
            snapshot(&out, &text, &s)?;
            println!(
                "wrote {} train and {} test videos to {} (seed {})",
                ds.train.len(),
                ds.test.len(),
                out.display(),
                s.seed
            );
        }
        Command::Train { data, out, baseline, c3bn, lambdas, epochs, lr, common } => {
            let (s, text) = resolve(
                &common,
                &[
                    ("baseline", baseline),
                    ("c3bn", c3bn),
                    ("lambdas", lambdas),
                    ("epochs", epochs.map(|e| e.to_string())),
                    ("lr", lr.map(|v| v.to_string())),
                ],
            )?;
            snapshot(&out, &text, &s)?;
            let o = commands::train(&s, &data, &out)?;
            println!("wrote {} (seed {})", o.checkpoint.display(), s.seed);
        }
        Command::Eval { checkpoint, data, out, split, iou, entropy, common } => {
            let flags = [("iou", iou), ("entropy", entropy.then(|| "on".to_string()))];
            let (s, text) = resolve(&common, &flags)?;
            snapshot(&out, &text, &s)?;
            let o = commands::eval(&s, &checkpoint, &data, &split, &out)?;
            print!("{}", o.table);
        }
        Command::Ablate { base, c3bn, data, out, split, iou, common } => {
            let (s, text) = resolve(&common, &[("iou", iou)])?;
            snapshot(&out, &text, &s)?;
            let o = commands::ablate(&s, &base, &c3bn, &data, &split, &out)?;
            print!("{}", o.text);
        }
        Command::Gradcheck { baseline, common } => {
            let (s, _) = resolve(&common, &[("baseline", baseline)])?;
            let r = commands::gradcheck(&s, None)?;
            print!("{}", commands::gradcheck_text(&r));
            if !r.report.passed() {
                return Err(CliError::Numeric(format!(
                    "gradient check failed: max relative error {:.3e}",
                    r.report.max_rel_error()
                )));
            }
        }
        Command::Plot { checkpoint, data, video, out, split, common } => {
            let (s, _) = resolve(&common, &[])?;
            commands::plot(&s, &checkpoint, &data, &split, &video, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
