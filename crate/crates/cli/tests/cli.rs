use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;

fn pumkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pumkit"))
        .current_dir(dir)
        .env_remove("PUMKIT_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = pumkit(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(dir: &Path, file: &str) -> String {
    std::fs::read_to_string(dir.join(file)).unwrap()
}

fn manifest(dir: &Path, sub: &str) -> Value {
    serde_json::from_str(&read(dir, &format!("{sub}/manifest.json"))).unwrap()
}

const SMALL: &[&str] = &["--split", "24,6,12", "--feature-dim", "6", "--seed", "4"];

fn small_dataset(dir: &Path, name: &str) {
    let mut args = vec!["gen-data", "--out", name];
    args.extend_from_slice(SMALL);
    ok(dir, &args);
}

fn oracle_column(csv: &str, prefix: &str) -> Vec<f64> {
    csv.lines()
        .filter(|l| l.starts_with(prefix))
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn empty_dataset_has_headers() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-data", "--out", "d", "--scenes", "0"]);
    let split = pumkit::data::read_dataset(&tmp.path().join("d")).unwrap();
    assert!(split.train.is_empty() && split.validation.is_empty() && split.test.is_empty());
    assert_eq!(read(tmp.path(), "d/train.jsonl").lines().count(), 1);
}

#[test]
fn gen_data_is_deterministic_and_seed_falls_back_to_env() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path(), "a");
    small_dataset(tmp.path(), "b");
    let out = Command::new(env!("CARGO_BIN_EXE_pumkit"))
        .current_dir(tmp.path())
        .env("PUMKIT_SEED", "4")
        .args(["gen-data", "--out", "c", "--split", "24,6,12", "--feature-dim", "6"])
        .output()
        .unwrap();
    assert!(out.status.success());
    for f in ["train.jsonl", "val.jsonl", "test.jsonl"] {
        let a = read(tmp.path(), &format!("a/{f}"));
        assert_eq!(a, read(tmp.path(), &format!("b/{f}")));
        assert_eq!(a, read(tmp.path(), &format!("c/{f}")));
    }
}

#[test]
fn default_split_sizes_are_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-data", "--out", "d", "--feature-dim", "2"]);
    let cfg = &manifest(tmp.path(), "d")["config"];
    assert_eq!(cfg["train_scenes"], 2000);
    assert_eq!(cfg["val_scenes"], 200);
    assert_eq!(cfg["test_scenes"], 200);
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = [
        vec!["gen-data", "--out", "d", "--scenes", "5", "--split", "1,1,1"],
        vec!["gen-data", "--out", "d", "--split", "1,1"],
        vec!["gen-data", "--out", "d", "--groups", "3,2"],
        vec!["frobnicate"],
    ];
    for args in bad {
        assert_eq!(pumkit(tmp.path(), &args).status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn missing_inputs_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path(), "d");
    let out = pumkit(tmp.path(), &["train", "--data", "nowhere", "--out", "m"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset not found"));
    let out = pumkit(tmp.path(), &["eval", "--model", "nope.json", "--data", "d", "--out", "e"]);
    assert_eq!(out.status.code(), Some(2));
    let out = pumkit(
        tmp.path(),
        &["oracle-sweep", "--pum", "a.json", "--baseline", "b.json", "--data", "d", "--out", "o"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergent_training_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path(), "d");
    let out = pumkit(tmp.path(), &["train", "--data", "d", "--out", "m", "--epochs", "3", "--lr", "1e300"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn ablation_flags_reach_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path(), "d");
    ok(tmp.path(), &["train", "--data", "d", "--out", "dl", "--epochs", "1", "--wo-dl"]);
    ok(tmp.path(), &["train", "--data", "d", "--out", "rt", "--epochs", "1", "--wo-rt"]);
    let dl = manifest(tmp.path(), "dl");
    assert_eq!(dl["config"]["effective_loss"]["lambda"], 1.0);
    assert_eq!(dl["config"]["ablation"]["without_deterministic_loss"], true);
    let rt = manifest(tmp.path(), "rt");
    assert_eq!(rt["config"]["effective_loss"]["alpha"], 0.0);
    assert_eq!(rt["config"]["effective_loss"]["lambda"], 0.1);
}

#[test]
fn train_eval_and_sweep_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    small_dataset(p, "d");
    let train = ["train", "--data", "d", "--epochs", "3", "--seed", "2", "--out"];
    ok(p, &[&train[..], &["m"]].concat());
    ok(p, &[&train[..], &["m2"]].concat());
    assert_eq!(read(p, "m/history.csv"), read(p, "m2/history.csv"));
    assert_eq!(read(p, "m/history.csv").lines().count(), 4);
    ok(p, &[&train[..], &["b", "--wo-pum"]].concat());

    let out = pumkit(p, &["eval", "--model", "m/model.json", "--data", "d", "--out", "e", "--mode", "det", "--m", "3"]);
    assert_eq!(out.status.code(), Some(1));

    let eval = ["eval", "--model", "m/model.json", "--data", "d", "--seed", "7"];
    ok(p, &[&eval[..], &["--out", "s1", "--mode", "stoch", "--m", "1"]].concat());
    ok(p, &[&eval[..], &["--out", "a1", "--mode", "avg", "--k", "1"]].concat());
    assert_eq!(read(p, "s1/metrics.csv"), read(p, "a1/metrics.csv"));

    ok(p, &[&eval[..], &["--out", "s8", "--mode", "stoch", "--m", "8"]].concat());
    let or = oracle_column(&read(p, "s8/metrics.csv"), "oR,");
    assert_eq!(or.len(), 8);
    assert!(or.windows(2).all(|w| w[0] <= w[1]));
    let json: Value = serde_json::from_str(&read(p, "s8/metrics.json")).unwrap();
    assert!(json["recall_at"]["1"].is_number());

    ok(
        p,
        &["oracle-sweep", "--pum", "m/model.json", "--baseline", "b/model.json", "--data", "d", "--out", "o", "--max-m", "5"],
    );
    let csv = read(p, "o/oracle.csv");
    assert!(csv.starts_with("model,M,oR\n"));
    let pum = oracle_column(&csv, "pum,");
    let base = oracle_column(&csv, "baseline,");
    assert_eq!((pum.len(), base.len()), (5, 5));
    assert!(pum.windows(2).all(|w| w[0] <= w[1]));
    assert!(base.iter().all(|&v| v == base[0]));
    assert_eq!(manifest(p, "o")["command"], "oracle-sweep");
}

#[test]
fn grad_check_single_trial_is_fast_and_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let a = ok(tmp.path(), &["grad-check", "--trials", "1", "--seed", "3", "--out", "g"]);
    assert!(start.elapsed().as_secs_f64() < 5.0);
    let b = ok(tmp.path(), &["grad-check", "--trials", "1", "--seed", "3"]);
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).contains("overall PASS"));
    assert_eq!(read(tmp.path(), "g/gradcheck.txt").as_bytes(), &a.stdout[..]);
}

#[test]
fn injected_sign_flip_fails_the_grad_check() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pumkit(tmp.path(), &["grad-check", "--trials", "2", "--inject-sign-flip", "sigmoid"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
