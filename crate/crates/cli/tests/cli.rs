use std::path::Path;
use std::process::{Command, Output};

use maw::model::MawModel;

fn maw(dir: &Path, args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_maw"));
    cmd.current_dir(dir).args(args).env_remove("MAW_SEED");
    if let Some(s) = env_seed {
        cmd.env("MAW_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn small_config(dir: &Path, epochs: usize) -> String {
    let text = format!(
        r#"{{"model": {{"epochs": {epochs}, "d_prime": 8, "batch_size": 32}},
            "data": {{"source": "synthetic", "dim": 6}},
            "split": {{"n_train": 60, "n_test": 30, "c_test": [0.3]}},
            "output_dir": "out"}}"#
    );
    std::fs::write(dir.join("cfg.json"), text).unwrap();
    "cfg.json".into()
}

fn error_line(out: &Output) -> serde_json::Value {
    let line = String::from_utf8_lossy(&out.stderr);
    assert_eq!(line.trim().lines().count(), 1, "stderr: {line}");
    serde_json::from_str(line.trim()).expect("stderr is one JSON line")
}

#[test]
fn theory_report_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = maw(dir.path(), &["theory", "--out", "theory.json"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("theory.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    assert!(report["propositions"].as_array().unwrap().len() >= 4);
}

#[test]
fn zero_epoch_training_returns_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 0);
    let out = maw(dir.path(), &["train", "--config", &cfg, "--seed", "4"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model = MawModel::load(&dir.path().join("out/checkpoint.json")).unwrap();
    assert_eq!(model, MawModel::new(6, model.hp.clone(), 4).unwrap());
    let text = std::fs::read_to_string(dir.path().join("out/checkpoint.json")).unwrap();
    let ck: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(ck["meta"]["seed"], 4);
    assert_eq!(ck["meta"]["config"]["model"]["epochs"], 0);
    let losses = std::fs::read_to_string(dir.path().join("out/losses.csv")).unwrap();
    assert!(losses.starts_with("# maw config="));
    assert_eq!(losses.lines().count(), 2);
}

#[test]
fn missing_data_exits_3_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = maw(dir.path(), &["eval", "--data", "nope.csv", "--output-dir", "out"], None);
    assert_eq!(out.status.code(), Some(3));
    let err = error_line(&out);
    assert_eq!(err["error"]["kind"], "data");
    assert!(err["error"]["message"].as_str().unwrap().contains("nope.csv"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn malformed_csv_reports_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.csv"), "a,b,label\n1,2,0\n3,x,1\n").unwrap();
    let out = maw(dir.path(), &["train", "--data", "bad.csv", "--output-dir", "out"], None);
    assert_eq!(out.status.code(), Some(3));
    let msg = error_line(&out)["error"]["message"].as_str().unwrap().to_string();
    assert!(msg.contains("row 2, column 2"), "{msg}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn bad_config_exits_2_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.json"), r#"{"model": {"eta": 0.4}}"#).unwrap();
    let out = maw(dir.path(), &["eval", "--config", "a.json"], None);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"]["path"], "model.eta");
    std::fs::write(dir.path().join("b.json"), r#"{"split": {"n_tset": 3}}"#).unwrap();
    let out = maw(dir.path(), &["eval", "--config", "b.json"], None);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"]["path"], "split.n_tset");
    let out = maw(dir.path(), &["eval", "--config", "missing.json"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("maw-out").exists());
}

#[test]
fn train_and_score_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    assert!(maw(dir.path(), &["gen-data", "--dim", "6", "--n", "30", "--seed", "2", "--out", "d.csv"], None).status.success());
    let mut runs = Vec::new();
    for _ in 0..2 {
        let out_dir = "run";
        let out = maw(dir.path(), &["train", "--config", &cfg, "--output-dir", out_dir], None);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let ck = format!("{out_dir}/checkpoint.json");
        let scores = format!("{out_dir}/scores.csv");
        assert!(maw(dir.path(), &["score", "--model", &ck, "--data", "d.csv", "--out", &scores], None).status.success());
        runs.push((std::fs::read(dir.path().join(&ck)).unwrap(), std::fs::read(dir.path().join(&scores)).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
    let scores = String::from_utf8(runs[0].1.clone()).unwrap();
    let mut lines = scores.lines();
    assert!(lines.next().unwrap().starts_with("# maw config="));
    assert_eq!(lines.next(), Some("index,score,label"));
    assert_eq!(lines.count(), 36);
}

#[test]
fn seed_precedence_flag_over_env_over_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 0);
    let seed_of = |args: &[&str], env: Option<&str>| {
        let mut all = vec!["train", "--config", cfg.as_str()];
        all.extend_from_slice(args);
        let out = maw(dir.path(), &all, env);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        MawModel::load(&dir.path().join("out/checkpoint.json")).unwrap().seed
    };
    assert_eq!(seed_of(&[], None), 0);
    assert_eq!(seed_of(&[], Some("7")), 7);
    assert_eq!(seed_of(&["--seed", "3"], Some("7")), 3);
    let out = maw(dir.path(), &["train", "--config", &cfg], Some("seven"));
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"]["path"], "MAW_SEED");
}

#[test]
fn eval_and_sweep_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1);
    let out = maw(dir.path(), &["eval", "--config", &cfg], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 0);
    assert_eq!(report["config"]["split"]["n_train"], 60);
    let auc = report["reports"][0]["auc_mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    let out = maw(dir.path(), &["sweep", "--config", &cfg, "--param", "d", "--values", "2,4", "--output-dir", "sw"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sw/report.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("maw,")).count(), 2);
    let out = maw(dir.path(), &["sweep", "--config", &cfg, "--param", "d", "--values", "3", "--output-dir", "sw2"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("sw2").exists());
}
