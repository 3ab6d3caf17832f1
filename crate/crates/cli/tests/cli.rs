use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn gram(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gram")).args(args).env_remove("GRAM_WORKERS").output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = gram(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn err_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("stderr: {}", String::from_utf8_lossy(&out.stderr)))
}

fn lines(p: &Path) -> usize {
    fs::read_to_string(p).unwrap().lines().count()
}

/// Every file in `dir` except the frozen config, by name.
fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "config.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn staged_pipeline_composes_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = s(&out);
    ok(&["brir-gen", "--toy", "--rooms", "2", "--seed", "3", "--out", o]);
    let index = out.join("brir-gen/index.jsonl");
    assert_eq!(lines(&index), 2);
    ok(&["scene-mix", "--toy", "--scenes", "4", "--seed", "3", "--out", o, "--workers", "2"]);
    assert_eq!(lines(&out.join("scene-mix/manifest.jsonl")), 4);
    let wavs = fs::read_dir(out.join("scene-mix")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "wav")).count();
    assert_eq!(wavs, 4);
    ok(&["featurize", "--toy", "--seed", "3", "--out", o]);
    ok(&["pretrain", "--toy", "--seed", "3", "--out", o, "--steps", "2"]);
    ok(&["embed", "--toy", "--seed", "3", "--out", o]);
    let res = ok(&["probe", "--toy", "--seed", "3", "--out", o, "--task", "azimuth8", "--folds", "2"]);
    assert_eq!(res["metric"], "accuracy");
    let doa = ok(&["doa-eval", "--toy", "--out", o]);
    assert!(doa["median_deg"].as_f64().unwrap() <= 180.0);
    ok(&["rt60", "--toy", "--out", o]);

    for stage in ["brir-gen", "scene-mix", "featurize", "pretrain", "embed", "probe", "rt60"] {
        let dir = out.join(stage);
        let frozen = dir.join("config.json");
        assert!(frozen.exists(), "{stage}");
        let again = tmp.path().join(format!("again-{stage}"));
        ok(&[stage, "--config", s(&frozen), "--out", s(&again), "--workers", "3"]);
        assert_eq!(outputs(&dir), outputs(&again.join(stage)), "{stage}");
    }
}

#[test]
fn pretraining_twice_gives_identical_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = s(&out);
    ok(&["brir-gen", "--toy", "--rooms", "1", "--out", o]);
    ok(&["scene-mix", "--toy", "--scenes", "2", "--out", o]);
    ok(&["featurize", "--toy", "--out", o]);
    let read = || (fs::read(out.join("pretrain/checkpoint.json")).unwrap(), fs::read(out.join("pretrain/checkpoint.bin")).unwrap());
    ok(&["pretrain", "--toy", "--steps", "3", "--out", o]);
    let first = read();
    ok(&["pretrain", "--toy", "--steps", "3", "--out", o]);
    assert_eq!(first, read());
    let ck: Value = serde_json::from_slice(&first.0).unwrap();
    assert_eq!(ck["meta"]["steps_done"], 3);
}

#[test]
fn invalid_config_lists_every_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"scenes": {"snr_range_db": [1.0, 60.0]}, "eval": {"fdr_q": 2.0}}"#).unwrap();
    let out = gram(&["brir-gen", "--config", s(&cfg), "--workers", "0", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let e = err_json(&out);
    assert_eq!(e["error"], "invalid_config");
    let fields: Vec<&str> = e["fields"].as_array().unwrap().iter().map(|f| f["field"].as_str().unwrap()).collect();
    assert_eq!(fields, vec!["workers", "scenes.snr_range_db", "eval.fdr_q"]);
    assert!(!tmp.path().join("brir-gen").exists());
}

#[test]
fn missing_input_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gram(&["featurize", "--toy", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
    let e = err_json(&out);
    assert_eq!(e["error"], "missing_input");
    assert!(e["path"].as_str().unwrap().ends_with("manifest.jsonl"));
}

fn results_file(dir: &Path, name: &str, correct: &[bool]) -> PathBuf {
    let items: Vec<Value> = correct.iter().enumerate().map(|(i, c)| serde_json::json!({"id": format!("x{i}"), "correct": c})).collect();
    let acc = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
    let v = serde_json::json!([{"task": "t", "metric": "accuracy", "value": acc, "n": correct.len(), "fold_values": [acc], "items": items}]);
    let p = dir.join(name);
    fs::write(&p, v.to_string()).unwrap();
    p
}

fn choose(n: u64, k: u64) -> u64 {
    (0..k).fold(1u64, |c, i| c * (n - i) / (i + 1))
}

#[test]
fn stats_mcnemar_matches_binomial_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    // 5 items only A gets right, 15 only B, 10 both
    let mut a = vec![true; 5];
    a.extend(vec![false; 15]);
    a.extend(vec![true; 10]);
    let mut b = vec![false; 5];
    b.extend(vec![true; 15]);
    b.extend(vec![true; 10]);
    let (pa, pb) = (results_file(tmp.path(), "a.json", &a), results_file(tmp.path(), "b.json", &b));
    let r = ok(&["stats", "mcnemar", "--a", s(&pa), "--b", s(&pb), "--out", s(tmp.path())]);
    let pair = &r["report"]["pairs"][0];
    let oracle = 2.0 * (0..=5).map(|k| choose(20, k)).sum::<u64>() as f64 / (1u64 << 20) as f64;
    assert!((pair["raw_p"].as_f64().unwrap() - oracle).abs() < 1e-12);
    // a single test is its own BH adjustment
    assert_eq!(pair["adjusted_p"], pair["raw_p"]);
    assert_eq!(pair["outcomes"]["n10"], 5);
    assert!(tmp.path().join("stats/report.json").exists());
}

#[test]
fn stats_bh_and_sample_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let r = ok(&["stats", "bh", "--p", "0.005,0.01,0.03,0.04", "--out", s(tmp.path())]);
    let adj: Vec<f64> = r["report"]["adjusted"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let p = [0.005, 0.01, 0.03, 0.04];
    for i in 0..4 {
        let direct = (i..4).map(|j| p[j] * 4.0 / (j + 1) as f64).fold(1.0f64, f64::min);
        assert!((adj[i] - direct).abs() < 1e-15);
    }
    let r = ok(&["stats", "samples-seen", "--batch", "32", "--steps-per-epoch", "180000", "--out", s(tmp.path())]);
    assert_eq!(r["report"]["samples_seen"], 5_760_000);
}

#[test]
fn workers_fall_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gram"))
        .args(["brir-gen", "--toy", "--rooms", "1", "--out", s(tmp.path())])
        .env("GRAM_WORKERS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    let frozen: Value = serde_json::from_slice(&fs::read(tmp.path().join("brir-gen/config.json")).unwrap()).unwrap();
    assert_eq!(frozen["workers"], 2);
    let out = Command::new(env!("CARGO_BIN_EXE_gram"))
        .args(["brir-gen", "--toy", "--rooms", "1", "--workers", "3", "--out", s(tmp.path())])
        .env("GRAM_WORKERS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    let frozen: Value = serde_json::from_slice(&fs::read(tmp.path().join("brir-gen/config.json")).unwrap()).unwrap();
    assert_eq!(frozen["workers"], 3);
}

#[test]
fn help_exits_cleanly() {
    let out = gram(&["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("scene-mix"));
}
