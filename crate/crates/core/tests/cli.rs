use std::path::Path;
use std::process::{Command, Output};

fn hetnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(code(&hetnet(&[])), 1);
    assert_eq!(code(&hetnet(&["train", "--bogus"])), 1);
    assert_eq!(code(&hetnet(&["--help"])), 0);
    assert_eq!(code(&hetnet(&["eval", "--help"])), 0);
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    // the full preset has no data source
    let o = hetnet(&["train", "--epochs", "0"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "epochs = \"many\"\n").unwrap();
    assert_eq!(code(&hetnet(&["train", "--preset", "desk", "--config", p(&bad)])), 1);
    assert_eq!(code(&hetnet(&["bench", "--variant", "vi", "--no-timing"])), 1);
    assert_eq!(
        code(&hetnet(&["eval", "--checkpoint", "/nonexistent.safetensors", "--data-root", "/tmp", "--threshold", "2"])),
        1
    );
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = hetnet(&["bench", "--preset", "tiny", "--size", "50", "--no-timing"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = hetnet(&["ingest", "--src", p(dir.path()), "--dst", p(&dir.path().join("x")), "--split", "train"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn describe_and_bench_report_counts() {
    let o = hetnet(&["describe", "--preset", "tiny", "--size", "64"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("out.main"));
    let o = hetnet(&["bench", "--preset", "full", "--size", "352", "--no-timing", "--csv"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout).to_string();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let params: f64 = row[0].parse().unwrap();
    assert!((42.0..58.0).contains(&params), "{params}");
    let o = hetnet(&["bench", "--preset", "tiny", "--size", "64", "--warmup", "1", "--iters", "2"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FPS"));
}

#[test]
fn synth_train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = hetnet(&["synth-data", "--output", p(&data), "--n-train", "8", "--n-test", "3", "--size", "64"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("train/manifest.txt").exists() && data.join("test/mask").is_dir());

    let run_dir = dir.path().join("run");
    let o = hetnet(&[
        "train",
        "--preset",
        "desk",
        "--data-root",
        p(&data),
        "--output-dir",
        p(&run_dir),
        "--epochs",
        "1",
        "--batch-size",
        "4",
        "--set",
        "data.augmentation.hflip_prob=0.0",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = std::fs::read_to_string(run_dir.join("config.resolved")).unwrap();
    assert!(resolved.contains("hflip_prob = 0.0"));
    let ckpt = run_dir.join("checkpoints/final.safetensors");

    let report = dir.path().join("report.csv");
    let o = hetnet(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data-root",
        p(&data),
        "--size",
        "64",
        "--threshold",
        "adaptive",
        "--report",
        p(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&report).unwrap().lines().count(), 2);

    let out = dir.path().join("pred");
    let o = hetnet(&["predict", "--checkpoint", p(&ckpt), "--input", p(&data.join("test/image")), "--output", p(&out), "--size", "64"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 6);

    let o = hetnet(&["describe", "--checkpoint", p(&ckpt), "--size", "64", "--training-heads"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("out.edge"));
}
