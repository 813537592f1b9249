//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use c3bn::commands::gradcheck_problem;
use c3bn::exec::RayonExecutor;
use c3bn::settings::Settings;
use c3bn_core::augment::{mix_adjacent, mix_predictions, sample_alphas, ALPHA_CLAMP};
use c3bn_core::autodiff::Tape;
use c3bn_core::eval::{average_precision, ladder, map_ladder};
use c3bn_core::experiment::{compare, EvalOptions};
use c3bn_core::infer::{infer_from_scores, soft_nms, InferConfig, Proposal};
use c3bn_core::losses::{contrastive_loss, prediction_consistency_loss, reverse_contrastive_loss, LossWeights};
use c3bn_core::model::Baseline;
use c3bn_core::synth::{generate_dataset, GeneratorConfig, GroundTruthSegment};
use c3bn_core::train::{gradcheck_mode, train, GradCheckConfig, Sequential, TrainConfig};
use c3bn_core::Tensor2D;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for baseline in [Baseline::Mil, Baseline::Attention] {
        let mut s = Settings::default();
        s.train.model.baseline = baseline;
        let (video, model) = gradcheck_problem(&s).map_err(|e| e.to_string())?;
        let weights = LossWeights { r: 2, ..s.train.weights };
        let r = gradcheck_mode(&video, &model, &weights, s.train.gamma, &GradCheckConfig::default())
            .map_err(|e| e.to_string())?;
        ok &= r.report.passed();
        lines.push(format!("{} max_rel={:.2e}", baseline.name(), r.report.max_rel_error()));
    }
    let secs = start.elapsed().as_secs_f64();
    check(ok && secs < 60.0, format!("{} in {secs:.2}s", lines.join(", ")))
}

fn baseline_recovery() -> Outcome {
    let gen = GeneratorConfig {
        train_videos: 12,
        test_videos: 2,
        ..GeneratorConfig::default()
    };
    let ds = generate_dataset(&gen, 5).map_err(|e| e.to_string())?;
    let videos: Vec<_> = ds.train.iter().map(|v| v.sequence.clone()).collect();
    let mut cfg = TrainConfig {
        epochs: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    cfg.model.classes = gen.classes;
    cfg.model.feature_dim = gen.feature_dim;
    cfg.weights.lambda1 = 0.0;
    cfg.weights.lambda2 = 0.0;
    cfg.weights.lambda3 = 0.0;
    let run = |c3bn: bool| train(&videos, &TrainConfig { c3bn, ..cfg.clone() }, &Sequential);
    let (zeroed, _) = run(true).map_err(|e| e.to_string())?;
    let (disabled, _) = run(false).map_err(|e| e.to_string())?;
    let mut n = 0;
    let same = zeroed.tensors().iter().zip(disabled.tensors()).all(|(a, b)| {
        n += a.data().len();
        a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    check(same, format!("{n} parameters compared bitwise"))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    inter / ((a.1 - a.0) + (b.1 - b.0) - inter)
}

/// Exact AP as a fraction: greedy matching in rank order, then for each
/// recall level the best precision among all prefixes reaching it.
fn brute_force_ap(props: &[Proposal], gts: &[GroundTruthSegment], thr: f64) -> (u64, u64) {
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| props[b].score.total_cmp(&props[a].score));
    let mut taken = vec![false; gts.len()];
    let mut hits = Vec::new();
    for &i in &order {
        let p = &props[i];
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, gt)| !taken[*g] && gt.video_id == p.video_id)
            .map(|(g, gt)| (g, overlap((p.t_start, p.t_end), (gt.t_start, gt.t_end))))
            .fold(None, |acc: Option<(usize, f64)>, (g, o)| match acc {
                Some((_, bo)) if bo >= o => acc,
                _ => Some((g, o)),
            });
        let hit = matches!(best, Some((_, o)) if o >= thr);
        if hit {
            taken[best.unwrap().0] = true;
        }
        hits.push(hit);
    }
    let n_gt = gts.len() as u64;
    let (mut num, mut den) = (0u64, 1u64);
    let total_tp = hits.iter().filter(|&&h| h).count() as u64;
    for level in 1..=total_tp {
        let mut best = (0u64, 1u64);
        for k in 1..=hits.len() {
            let tp = hits[..k].iter().filter(|&&h| h).count() as u64;
            if tp >= level && tp * best.1 > best.0 * k as u64 {
                best = (tp, k as u64);
            }
        }
        let d = best.1 * n_gt;
        num = num * d + best.0 * den;
        den *= d;
        let g = gcd(num, den).max(1);
        num /= g;
        den /= g;
    }
    (num, den)
}

fn map_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa9);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for _ in 0..100 {
        let videos = ["a", "b"];
        let n_gt = rng.random_range(1..=4);
        let gts: Vec<GroundTruthSegment> = (0..n_gt)
            .map(|_| {
                let s = rng.random_range(0..16) as f64 * 0.5;
                GroundTruthSegment {
                    video_id: videos[rng.random_range(0..2)].into(),
                    class_id: 0,
                    t_start: s,
                    t_end: s + rng.random_range(1..8) as f64 * 0.5,
                }
            })
            .collect();
        let n_p = rng.random_range(0..=6);
        let props: Vec<Proposal> = (0..n_p)
            .map(|_| {
                let s = rng.random_range(0..16) as f64 * 0.5;
                Proposal {
                    video_id: videos[rng.random_range(0..2)].into(),
                    class_id: 0,
                    t_start: s,
                    t_end: s + rng.random_range(1..8) as f64 * 0.5,
                    score: rng.random::<f64>(),
                }
            })
            .collect();
        for thr in [0.3, 0.5, 0.7] {
            let got = average_precision(&props, &gts, thr).unwrap_or(f64::NAN);
            let (num, den) = brute_force_ap(&props, &gts, thr);
            worst = worst.max((got - num as f64 / den as f64).abs());
            checked += 1;
        }
    }
    check(worst <= 1e-12, format!("{checked} cases, max deviation {worst:.1e}"))
}

fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2D {
    let mut t = Tensor2D::zeros(rows, cols);
    for r in 0..rows {
        let v: Vec<f64> = (0..cols).map(|_| rng.random::<f64>() - 0.5).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (c, x) in v.iter().enumerate() {
            t.set(r, c, x / n);
        }
    }
    t
}

fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Tensor2D {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        for u in &cols {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        cols.push(v);
    }
    let mut q = Tensor2D::zeros(n, n);
    for (j, c) in cols.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            q.set(i, j, x);
        }
    }
    q
}

fn both_contrastive(zc: &Tensor2D, zp: &Tensor2D, alphas: &[f64], rho: f64) -> (f64, f64) {
    let mut tape = Tape::new();
    let c = tape.leaf(zc.clone());
    let p = tape.leaf(zp.clone());
    let fwd = contrastive_loss(&mut tape, c, p, alphas, rho).unwrap();
    let rev = reverse_contrastive_loss(&mut tape, p, c, alphas, rho).unwrap();
    (tape.value(fwd).item(), tape.value(rev).item())
}

fn identity_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1d);
    let (mut parent_dev, mut cons_max, mut logt_dev, mut rot_dev) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for trial in 0..20u64 {
        let t_len = rng.random_range(2..=12);
        let dim = rng.random_range(2..=6);
        let f = Tensor2D::new(t_len, dim, (0..t_len * dim).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()).unwrap();
        let near_one = vec![1.0 - ALPHA_CLAMP; t_len - 1];
        let mixed = mix_adjacent(&f, &near_one).unwrap();
        for r in 0..t_len - 1 {
            for c in 0..dim {
                parent_dev = parent_dev.max((mixed.get(r, c) - f.get(r, c)).abs());
            }
        }

        let alphas = sample_alphas(t_len, 2.0, trial).unwrap();
        let p = f.map(|v| 1.0 / (1.0 + (-v).exp()));
        let mut tape = Tape::new();
        let child = tape.leaf(mix_predictions(&p, &alphas).unwrap());
        let parent = tape.leaf(p);
        let mixed_parent = tape.mix_adjacent(parent, &alphas).unwrap();
        let cons = prediction_consistency_loss(&mut tape, child, mixed_parent).unwrap();
        cons_max = cons_max.max(tape.value(cons).item().abs());

        let zc = unit_rows(t_len - 1, dim, &mut rng);
        let key = unit_rows(1, dim, &mut rng);
        let mut zp = Tensor2D::zeros(t_len, dim);
        for r in 0..t_len {
            for c in 0..dim {
                zp.set(r, c, key.get(0, c));
            }
        }
        let (fwd, _) = both_contrastive(&zc, &zp, &alphas, 0.1);
        logt_dev = logt_dev.max((fwd - (t_len as f64).ln()).abs());

        let zp = unit_rows(t_len, dim, &mut rng);
        let q = orthogonal(dim, &mut rng);
        let (a, b) = both_contrastive(&zc, &zp, &alphas, 0.1);
        let (ra, rb) = both_contrastive(&zc.matmul(&q).unwrap(), &zp.matmul(&q).unwrap(), &alphas, 0.1);
        rot_dev = rot_dev.max((a - ra).abs()).max((b - rb).abs());
    }
    check(
        parent_dev <= 1e-5 && cons_max == 0.0 && logt_dev <= 1e-9 && rot_dev <= 1e-9,
        format!(
            "alpha->1 {parent_dev:.1e}, cons {cons_max:.1e}, log T {logt_dev:.1e}, rotation {rot_dev:.1e}"
        ),
    )
}

fn beta_moments() -> Outcome {
    let a = sample_alphas(10_001, 2.0, 2024).map_err(|e| e.to_string())?;
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    check(
        (mean - 0.5).abs() <= 0.02 && (var - 0.05).abs() <= 0.01,
        format!("{} draws, mean {mean:.4}, variance {var:.4}", a.len()),
    )
}

struct SeedResult {
    seed: u64,
    base_map: f64,
    c3bn_map: f64,
    base_h: f64,
    c3bn_h: f64,
    swap_base: f64,
    swap_boundary: f64,
}

fn benchmark() -> Result<(Vec<SeedResult>, f64), String> {
    let start = Instant::now();
    let exec = RayonExecutor::new(std::thread::available_parallelism().map_or(1, |n| n.get()))
        .map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for seed in [1u64, 2, 3] {
        let s = Settings::default();
        let gen = GeneratorConfig::default();
        let ds = generate_dataset(&gen, seed).map_err(|e| e.to_string())?;
        let mut cfg = s.train.clone();
        cfg.seed = seed;
        cfg.model.baseline = Baseline::Mil;
        cfg.model.classes = gen.classes;
        cfg.model.feature_dim = gen.feature_dim;
        let thresholds = ladder(0.1, 0.1, 0.7).map_err(|e| e.to_string())?;
        let mut infer = s.infer.clone();
        infer.topk_divisor = cfg.weights.r;
        let c = compare(&ds, &cfg, &infer, &thresholds, EvalOptions::default(), &exec).map_err(|e| e.to_string())?;
        let cell = |i: usize| c.swap.cells[i].1.avg_map;
        out.push(SeedResult {
            seed,
            base_map: c.base.2.report.avg_map,
            c3bn_map: c.c3bn.2.report.avg_map,
            base_h: c.base.2.report.entropy.unwrap_or(f64::NAN),
            c3bn_h: c.c3bn.2.report.entropy.unwrap_or(f64::NAN),
            swap_base: cell(0),
            swap_boundary: cell(1),
        });
    }
    Ok((out, start.elapsed().as_secs_f64()))
}

fn directional(results: &[SeedResult], secs: f64) -> Outcome {
    let n = results.len() as f64;
    let mean = |f: fn(&SeedResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    let (bm, cm) = (mean(|r| r.base_map), mean(|r| r.c3bn_map));
    let (bh, ch) = (mean(|r| r.base_h), mean(|r| r.c3bn_h));
    check(
        cm > bm && ch < bh && secs < 600.0,
        format!("AVG mAP {bm:.4} -> {cm:.4}, H(d_t) {bh:.4} -> {ch:.4}, {secs:.1}s"),
    )
}

fn swap_ordering(results: &[SeedResult]) -> Outcome {
    let wins = results.iter().filter(|r| r.swap_boundary >= r.swap_base).count();
    let detail: Vec<String> = results
        .iter()
        .map(|r| format!("seed {}: {:.4} vs {:.4}", r.seed, r.swap_boundary, r.swap_base))
        .collect();
    check(wins >= 2, format!("{wins}/3 seeds ({})", detail.join("; ")))
}

fn inference_oracle() -> Outcome {
    let gen = GeneratorConfig {
        noise: 0.0,
        crossfade: 0,
        train_videos: 1,
        test_videos: 1,
        ..GeneratorConfig::default()
    };
    let ds = generate_dataset(&gen, 8).map_err(|e| e.to_string())?;
    let v = &ds.test[0];
    let dur = v.sequence.snippet_duration;
    let t_len = v.sequence.len();
    let mut tcas = Tensor2D::zeros(t_len, gen.classes);
    for g in &v.segments {
        let (s, e) = ((g.t_start / dur).round() as usize, (g.t_end / dur).round() as usize);
        for t in s..e {
            tcas.set(t, g.class_id, 1.0);
        }
    }
    let video_probs: Vec<f64> = v.sequence.label.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let cfg = InferConfig::default();
    let o = infer_from_scores(&v.sequence.video_id, dur, video_probs, tcas.clone(), tcas, &cfg)
        .map_err(|e| e.to_string())?;
    let key = |c: usize, s: f64, e: f64| (c, (s * 1e6).round() as i64, (e * 1e6).round() as i64);
    let mut got: Vec<_> = o.proposals.iter().map(|p| key(p.class_id, p.t_start, p.t_end)).collect();
    let mut want: Vec<_> = v.segments.iter().map(|g| key(g.class_id, g.t_start, g.t_end)).collect();
    got.sort_unstable();
    want.sort_unstable();
    let report = map_ladder(&o.proposals, &v.segments, &ladder(0.1, 0.1, 0.7).unwrap(), gen.classes)
        .map_err(|e| e.to_string())?;
    check(
        got == want && report.avg_map == 1.0,
        format!("{} proposals for {} segments, AVG mAP {}", got.len(), want.len(), report.avg_map),
    )
}

fn soft_nms_closed_form() -> Outcome {
    let p = |s: f64, e: f64, score: f64| Proposal {
        video_id: "v".into(),
        class_id: 0,
        t_start: s,
        t_end: e,
        score,
    };
    let kept = soft_nms(&[p(0.0, 4.0, 0.9), p(2.0, 4.0, 0.8)], 0.5, 0.0);
    let decayed = kept.iter().find(|q| q.t_start == 2.0).map(|q| q.score).unwrap_or(f64::NAN);
    let factor = decayed / 0.8;
    let dev = (factor - (-0.5f64).exp()).abs();
    check(dev <= 1e-12, format!("factor {factor:.15}, deviation {dev:.1e}"))
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_c3bn"))
        .args(args)
        .env_remove("C3BN_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("c3bn {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

const SMALL: &[&str] = &[
    "--set", "train_videos=10", "--set", "test_videos=5", "--set", "t_max=60",
];

/// Runs every subcommand into `root` and returns the files to compare.
fn pipeline(root: &Path, threads: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();
    let data = p("data");
    let with = |mut v: Vec<String>| {
        v.extend(["--seed", "7", "--threads", threads].map(String::from));
        v.extend(SMALL.iter().map(|s| s.to_string()));
        v
    };
    let call = |v: Vec<String>| {
        let v = with(v);
        run_cli(&v.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    call(s(&["gen", "--out", &data]))?;
    for (dir, flag) in [("base", "off"), ("reg", "on")] {
        call(s(&["train", "--data", &data, "--out", &p(dir), "--c3bn", flag, "--epochs", "3"]))?;
    }
    call(s(&["eval", "--checkpoint", &p("reg/checkpoint.bin"), "--data", &data, "--out", &p("eval"), "--entropy"]))?;
    call(s(&[
        "ablate", "--base", &p("base/checkpoint.bin"), "--c3bn", &p("reg/checkpoint.bin"),
        "--data", &data, "--out", &p("ablate"),
    ]))?;
    call(s(&[
        "plot", "--checkpoint", &p("reg/checkpoint.bin"), "--data", &data, "--video", "test_0000",
        "--out", &p("plot.svg"),
    ]))?;
    let grad = call(s(&["gradcheck"]))?;
    let mut files = vec![("gradcheck stdout".to_string(), grad.into_bytes())];
    for f in [
        "data/train.jsonl",
        "data/test.jsonl",
        "base/train_log.csv",
        "base/checkpoint.bin",
        "reg/train_log.csv",
        "reg/checkpoint.bin",
        "eval/proposals.csv",
        "eval/eval.csv",
        "ablate/ablation.csv",
        "plot.svg",
    ] {
        let bytes = std::fs::read(root.join(f)).map_err(|e| format!("{f}: {e}"))?;
        files.push((f.to_string(), bytes));
    }
    Ok(files)
}

fn reproducibility() -> Outcome {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let first = pipeline(dirs[0].path(), "1")?;
    let rerun = pipeline(dirs[1].path(), "1")?;
    let threaded = pipeline(dirs[2].path(), "4")?;
    let mut diffs = Vec::new();
    for ((name, a), ((_, b), (_, c))) in first.iter().zip(rerun.iter().zip(&threaded)) {
        if a != b {
            diffs.push(format!("{name} differs on rerun"));
        }
        if a != c {
            diffs.push(format!("{name} differs with 4 threads"));
        }
    }
    if diffs.is_empty() {
        Ok(format!("{} outputs identical across reruns and thread counts", first.len()))
    } else {
        Err(diffs.join("; "))
    }
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        let (tag, detail) = match o {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {n:>2} {name}: {detail}");
    };
    report(1, "gradient integrity", gradient_integrity());
    report(2, "baseline recovery", baseline_recovery());
    report(3, "mAP oracle equivalence", map_oracle());
    report(4, "identity suite", identity_suite());
    report(5, "Beta sampling", beta_moments());
    match benchmark() {
        Ok((results, secs)) => {
            report(6, "directional benchmark", directional(&results, secs));
            report(7, "swap ablation ordering", swap_ordering(&results));
        }
        Err(e) => {
            report(6, "directional benchmark", Err(e.clone()));
            report(7, "swap ablation ordering", Err(e));
        }
    }
    report(8, "inference oracle", inference_oracle());
    report(9, "SoftNMS closed form", soft_nms_closed_form());
    report(10, "reproducibility", reproducibility());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
