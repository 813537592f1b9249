use std::path::Path;
use std::process::{Command, Output};

use c3bn::formats::read_checkpoint;

const SMALL: &[&str] = &[
    "--set", "train_videos=6", "--set", "test_videos=3", "--set", "t_max=50", "--seed", "3",
];

fn c3bn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c3bn"))
        .args(args)
        .env_remove("C3BN_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let mut all = args.to_vec();
    all.extend_from_slice(SMALL);
    let out = c3bn(&all);
    assert!(out.status.success(), "{:?}: {}", args, String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dataset(root: &Path) -> String {
    let data = root.join("data");
    ok(&["gen", "--out", s(&data)]);
    data.to_string_lossy().into_owned()
}

fn trained(root: &Path, data: &str, name: &str, extra: &[&str]) -> String {
    let out = root.join(name);
    let mut args = vec!["train", "--data", data, "--out", s(&out), "--epochs", "2"];
    args.extend_from_slice(extra);
    ok(&args);
    out.join("checkpoint.bin").to_string_lossy().into_owned()
}

#[test]
fn invalid_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = c3bn(&["gen", "--out", s(dir.path()), "--set", "gamma=-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma"));

    let out = c3bn(&["gen", "--out", s(dir.path()), "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn missing_inputs_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let missing = dir.path().join("nope.bin");
    let out = c3bn(&["eval", "--checkpoint", s(&missing), "--data", &data, "--out", s(&dir.path().join("e"))]);
    assert_eq!(out.status.code(), Some(2));

    let ckpt = trained(dir.path(), &data, "m", &[]);
    let out = c3bn(&[
        "plot", "--checkpoint", &ckpt, "--data", &data, "--video", "nonexistent", "--out",
        s(&dir.path().join("p.svg")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
}

#[test]
fn same_seed_gives_identical_manifests() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    dataset(a.path());
    dataset(b.path());
    for f in ["train.jsonl", "test.jsonl"] {
        let x = std::fs::read(a.path().join("data").join(f)).unwrap();
        let y = std::fs::read(b.path().join("data").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn zero_lambdas_reproduce_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let zero = trained(dir.path(), &data, "zero", &["--c3bn", "on", "--lambdas", "0,0,0"]);
    let base = trained(dir.path(), &data, "base", &["--c3bn", "off"]);
    let zero = read_checkpoint(Path::new(&zero)).unwrap();
    let base = read_checkpoint(Path::new(&base)).unwrap();
    assert!(zero.c3bn && !base.c3bn);
    for (a, b) in zero.params.tensors().iter().zip(base.params.tensors()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn plot_gt_bands_follow_the_pixel_mapping() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let ckpt = trained(dir.path(), &data, "m", &[]);
    let svg_path = dir.path().join("v.svg");
    ok(&["plot", "--checkpoint", &ckpt, "--data", &data, "--video", "test_0000", "--out", s(&svg_path)]);
    let svg = std::fs::read_to_string(&svg_path).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();

    let comment = doc
        .descendants()
        .find(|n| n.is_comment())
        .and_then(|n| n.text())
        .unwrap()
        .to_string();
    let px: f64 = comment
        .split("t_seconds * ")
        .nth(1)
        .and_then(|r| r.split(';').next())
        .unwrap()
        .trim()
        .parse()
        .unwrap();

    let manifest = std::fs::read_to_string(Path::new(&data).join("test.jsonl")).unwrap();
    let record: serde_json::Value = manifest
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|v| v["id"] == "test_0000")
        .unwrap();
    let segments = record["segments"].as_array().unwrap();
    let bands: Vec<_> = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("gt"))
        .collect();
    assert_eq!(bands.len(), segments.len());
    for (band, seg) in bands.iter().zip(segments) {
        let x: f64 = band.attribute("x").unwrap().parse().unwrap();
        let w: f64 = band.attribute("width").unwrap().parse().unwrap();
        let start = seg["t_start"].as_f64().unwrap();
        let end = seg["t_end"].as_f64().unwrap();
        assert!((x - (60.0 + start * px)).abs() < 1e-2, "{x} vs {start}");
        assert!((x + w - (60.0 + end * px)).abs() < 1e-2);
    }
}

#[test]
fn ablating_a_model_against_itself_gives_equal_cells() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let ckpt = trained(dir.path(), &data, "m", &[]);
    let out = dir.path().join("ab");
    ok(&["ablate", "--base", &ckpt, "--c3bn", &ckpt, "--data", &data, "--out", s(&out)]);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let avg: Vec<&str> = csv
        .lines()
        .filter(|l| l.contains(",AVG,"))
        .map(|l| l.rsplit(',').next().unwrap())
        .collect();
    assert_eq!(avg.len(), 4);
    assert!(avg.iter().all(|v| *v == avg[0]), "{avg:?}");
}

#[test]
fn config_snapshot_is_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    let text = "# tiny run\ntrain_videos = 4\ntest_videos=2\n\nnoise=0.2\n";
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("data");
    let status = c3bn(&["gen", "--out", s(&out), "--config", s(&cfg)]);
    assert!(status.status.success());
    assert_eq!(std::fs::read_to_string(out.join("config.txt")).unwrap(), text);
    let resolved = std::fs::read_to_string(out.join("resolved.txt")).unwrap();
    assert!(resolved.lines().any(|l| l == "seed=0" || l == "seed = 0"), "{resolved}");
    assert!(resolved.lines().any(|l| l.replace(' ', "") == "noise=0.2"));
}

#[test]
fn eval_writes_table_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let ckpt = trained(dir.path(), &data, "m", &[]);
    let out = dir.path().join("e");
    let table = ok(&["eval", "--checkpoint", &ckpt, "--data", &data, "--out", s(&out), "--entropy", "--iou", "0.3,0.5"]);
    assert!(table.starts_with("tIoU"));
    assert!(table.contains("H(d_t)"));
    let csv = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("map,,0.30,")));
    assert!(csv.lines().any(|l| l.starts_with("entropy,,,")));
    assert!(csv.ends_with("seed,,,3\n"));
}

#[test]
fn gradcheck_passes_for_both_baselines() {
    for b in ["mil", "attention"] {
        let out = c3bn(&["gradcheck", "--baseline", b]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
        assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    }
}
