use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{"gen": {"clips": 2, "test_clips": 1}, "train": {"epochs": 1}, "distill": {"epochs": 1}}"#;

fn pavsgg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pavsgg"))
        .args(args)
        .current_dir(dir)
        .env_remove("PAVSGG_THREADS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

#[test]
fn usage_and_config_errors() {
    let dir = tiny_dir();
    let d = dir.path();
    assert_eq!(code(&pavsgg(d, &[])), 1);
    assert_eq!(code(&pavsgg(d, &["frobnicate"])), 1);
    assert_eq!(code(&pavsgg(d, &["--help"])), 0);
    assert_eq!(code(&pavsgg(d, &["train", "--step", "3", "--data", "x", "--out", "y"])), 1);

    std::fs::write(d.join("bad.json"), r#"{"gen": {"clips": 2, "nope": 1}}"#).unwrap();
    let out = pavsgg(d, &["--config", "bad.json", "gen-data", "--out", "data"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));

    let out = pavsgg(d, &["--config", "tiny.json", "ablate", "--rows", "a,TFT", "--out", "abl"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("PAM requires PALS"));
}

#[test]
fn invalid_thread_count_is_a_usage_error() {
    let dir = tiny_dir();
    let out = Command::new(env!("CARGO_BIN_EXE_pavsgg"))
        .args(["gradcheck", "--seeds", "1"])
        .current_dir(dir.path())
        .env("PAVSGG_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn missing_data_exits_two() {
    let dir = tiny_dir();
    let d = dir.path();
    assert_eq!(code(&pavsgg(d, &["ram-match", "--data", "absent", "--out", "ram"])), 2);
    assert_eq!(code(&pavsgg(d, &["eval", "--data", "absent", "--ckpt", "absent", "--out", "ev"])), 2);
}

#[test]
fn step_two_requires_teacher() {
    let dir = tiny_dir();
    let d = dir.path();
    assert_eq!(code(&pavsgg(d, &["--config", "tiny.json", "gen-data", "--out", "data"])), 0);
    let out = pavsgg(d, &["--config", "tiny.json", "train", "--step", "2", "--data", "data", "--out", "s2"]);
    assert_eq!(code(&out), 1);
}

fn assert_seed_column(path: &Path, seed: &str) {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "seed").unwrap_or_else(|| panic!("{path:?} has no seed column"));
    let mut rows = 0;
    for record in reader.records() {
        assert_eq!(&record.unwrap()[col], seed, "{path:?}");
        rows += 1;
    }
    assert!(rows > 0, "{path:?} is empty");
}

fn assert_config_seed(dir: &Path, seed: u64) {
    let text = std::fs::read_to_string(dir.join("run_config.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["seed"], seed);
    assert_eq!(v["gen"]["seed"], seed);
}

#[test]
fn seed_echoed_into_every_output() {
    let dir = tiny_dir();
    let d = dir.path();
    let run = |args: &[&str]| {
        let mut full = vec!["--config", "tiny.json", "--seed", "41"];
        full.extend_from_slice(args);
        let out = pavsgg(d, &full);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["gen-data", "--out", "data"]);
    run(&["ram-match", "--data", "data", "--out", "ram"]);
    run(&["train", "--step", "1", "--data", "data", "--out", "s1"]);
    run(&["eval", "--data", "data", "--ckpt", "s1", "--out", "ev"]);
    run(&["gradcheck", "--seeds", "1", "--out", "gc"]);

    assert_config_seed(&d.join("data"), 41);
    assert_seed_column(&d.join("ram/ram_metrics.csv"), "41");
    assert_seed_column(&d.join("s1/train_log.csv"), "41");
    assert_seed_column(&d.join("ev/metrics.csv"), "41");
    assert_seed_column(&d.join("ev/histograms.csv"), "41");
    for sub in ["ram", "s1", "ev"] {
        assert_config_seed(&d.join(sub), 41);
    }
    let partitions: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("ram/partitions.json")).unwrap()).unwrap();
    assert_eq!(partitions["seed"], 41);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 41);
    let gc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("gc/gradcheck.json")).unwrap()).unwrap();
    assert_eq!(gc["seed"], 41);
    assert_eq!(gc["passed"], true);
}

#[test]
fn histogram_has_twenty_bins() {
    let dir = tiny_dir();
    let d = dir.path();
    assert_eq!(code(&pavsgg(d, &["--config", "tiny.json", "gen-data", "--out", "data"])), 0);
    assert_eq!(code(&pavsgg(d, &["--config", "tiny.json", "train", "--step", "1", "--data", "data", "--out", "s1"])), 0);
    assert_eq!(code(&pavsgg(d, &["--config", "tiny.json", "eval", "--data", "data", "--ckpt", "s1", "--out", "ev"])), 0);
    let bins = csv::Reader::from_path(d.join("ev/histograms.csv")).unwrap().records().count();
    assert_eq!(bins, 20);
}
