use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_frozen-attn"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn fixtures(dir: &Path) {
    std::fs::write(dir.join("X.csv"), "2,4\n0.1,-0.2,0.3,0.4\n0.2,0.1,-0.3,0.0\n").unwrap();
    std::fs::write(
        dir.join("target.json"),
        r#"{"W_K":[[0.3,-0.2],[0.1,0.4]],"W_Q":[[0.2,0.1],[-0.3,0.2]],"W_V":[[0.5,-0.1]]}"#,
    )
    .unwrap();
    std::fs::write(
        dir.join("lib.json"),
        r#"[{"name":"a","kind":"target_head","params":{"weights":{"W_K":[[0.3,-0.2]],"W_Q":[[0.2,0.1]],"W_V":[[0.5,-0.1]]}}},
            {"name":"b","kind":"target_head","params":{"weights":{"W_K":[[-0.3,0.2]],"W_Q":[[0.4,0.1]],"W_V":[[0.1,0.3]]}}},
            {"name":"c","kind":"target_head","params":{"weights":{"W_K":[[0.1,0.1]],"W_Q":[[0.2,-0.4]],"W_V":[[-0.2,0.2]]}}}]"#,
    )
    .unwrap();
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn emulate_writes_a_report_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    for construction in ["interpolation", "coordinate-grid"] {
        let out = run(
            dir.path(),
            &["emulate", "--construction", construction, "--target", "target.json", "--input", "X.csv", "--out", "report.json"],
        );
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let report = read_json(&dir.path().join("report.json"));
        let measured = report["measured_error"].as_f64().unwrap();
        assert!(measured <= report["theoretical_budget"].as_f64().unwrap());
        assert!(report["plan"].is_object());
        assert_eq!(report["weight_checksum"].as_str().unwrap().len(), 64);
    }
}

#[test]
fn swap_keeps_one_checksum() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path());
    let out = run(dir.path(), &["swap", "--library", "lib.json", "--input", "X.csv", "--out", "swap.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("swap.json"));
    let checksum = report["weight_checksum"].as_str().unwrap();
    let members = report["reports"].as_array().unwrap();
    assert_eq!(members.len(), 3);
    assert!(members.iter().all(|r| r["weight_checksum"] == checksum));
}

#[test]
fn verify_lemmas_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = run(dir.path(), &["verify-lemmas", "--trials", "200", "--out", "res"]);
    assert_eq!(code(&ok), 0);
    assert!(dir.path().join("res/verify_lemmas.json").exists());
    assert!(dir.path().join("res/verify_lemmas_metrics.csv").exists());
    // A quarter of the planned temperature cannot meet the bound.
    let bad = run(dir.path(), &["verify-lemmas", "--trials", "200", "--beta-scale", "0.25", "--out", "res2"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["bogus"])), 2);
    assert_eq!(code(&run(dir.path(), &["gd"])), 2);
    let missing = run(
        dir.path(),
        &["emulate", "--construction", "interpolation", "--target", "none.json", "--input", "none.csv"],
    );
    assert_eq!(code(&missing), 2);
    std::fs::write(dir.path().join("cfg.json"), r#"{"epochs": 1, "no_such_field": 3}"#).unwrap();
    assert_eq!(code(&run(dir.path(), &["train", "sim-f", "--config", "cfg.json"])), 2);
}

#[test]
fn gd_stack_tracks_exact_descent() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gd", "--steps", "4", "--seed", "3", "--out", "gd.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("gd.json"));
    let dev = report["deviation"].as_array().unwrap();
    assert_eq!(dev.len(), 5);
    for (l, d) in dev.iter().enumerate() {
        assert!(d.as_f64().unwrap() <= l as f64 * 0.01);
    }
}

#[test]
fn small_training_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"experiment":"sim_f","n":4,"d":2,"hidden":4,"slots":2,"train_size":40,"test_size":10,"epochs":2,"seeds":[0,1]}"#,
    )
    .unwrap();
    let out = run(dir.path(), &["train", "sim-f", "--config", "cfg.json", "--out", "res"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let record = read_json(&dir.path().join("res/sim_f.json"));
    assert_eq!(record["config"]["epochs"], 2);
    let metric = &record["metrics"][0];
    let values: Vec<f64> = metric["values"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(values.len(), 2);
    let mean = (values[0] + values[1]) / 2.0;
    assert!((metric["mean"].as_f64().unwrap() - mean).abs() <= 1e-12 * mean.abs().max(1.0));
    assert!(dir.path().join("res/sim_f_history_seed0.csv").exists());
    let csv = std::fs::read_to_string(dir.path().join("res/sim_f_history_seed1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "header plus epochs 0..=2");
}
