use std::path::Path;
use std::process::Command;

use serde_json::Value;

const SMALL_GRID: &str = r#""grid": {"d": 1, "nx": 32, "nv": 32, "Lx": 16.0, "Lv": 8.0, "dt": 0.0078125}"#;

fn run(dir: &Path, verb: &str, config: &str) -> (i32, Value) {
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, config).unwrap();
    let out = dir.join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_kfp"))
        .args([verb, "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    let report = std::fs::read_to_string(out.join("report.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or(Value::Null);
    (status.status.code().unwrap(), report)
}

#[test]
fn invalid_configs_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        r#"{"bogus": true}"#.to_string(),
        r#"{"field": {"kind": "constant", "d": 1,
            "params": {"matrix": [[1.0]], "declared_lambda": 2.0, "declared_Lambda": 1.0}}}"#
            .to_string(),
        r#"{"window": {"s": 0.0, "t": 0.3001}}"#.to_string(),
        "not json".to_string(),
    ];
    for c in &cases {
        assert_eq!(run(dir.path(), "verify", c).0, 2, "{c}");
    }
    let missing = Command::new(env!("CARGO_BIN_EXE_kfp"))
        .args(["verify", "--config", "/nonexistent/kfp.json"])
        .status()
        .unwrap();
    assert_eq!(missing.code(), Some(2));
}

#[test]
fn empty_sweeps_and_zero_width_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let (code, report) = run(dir.path(), "decay", &format!(r#"{{{SMALL_GRID}, "decay": {{"cases": []}}}}"#));
    assert_eq!(code, 2);
    assert_eq!(report["overall_pass"], Value::Bool(false));
    let (code, _) = run(dir.path(), "moser", r#"{"moser": {"cylinders": []}}"#);
    assert_eq!(code, 2);
    let (code, _) = run(dir.path(), "kernel", &format!(r#"{{{SMALL_GRID}, "kernel": {{"delta_width": 0.0}}}}"#));
    assert_eq!(code, 2);
}

#[test]
fn kernel_writes_column_heatmap_and_overlay() {
    let dir = tempfile::tempdir().unwrap();
    let (code, report) = run(dir.path(), "kernel", &format!(r#"{{{SMALL_GRID}}}"#));
    assert_eq!(code, 0);
    let suite = &report["suites"][0];
    assert_eq!(suite["status"], "pass");
    assert!(suite["details"]["mass_defect"].as_f64().unwrap() <= 1e-9);
    assert!(suite["details"]["oracle_overlay"]["l1_relative"].as_f64().unwrap().is_finite());
    let out = dir.path().join("out");
    assert!(out.join("kernel.csv").exists());
    assert!(std::fs::read_to_string(out.join("kernel.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn decay_sweep_identity_and_rough_margins_are_nonnegative() {
    let dir = tempfile::tempdir().unwrap();
    let rough = r#""field": {"kind": "random-piecewise", "d": 1, "seed": 3,
        "params": {"cell": [0.25, 1.0, 1.0], "eig_min": 0.5, "eig_max": 2.0}}"#;
    for field in ["", rough] {
        let sep = if field.is_empty() { "" } else { ", " };
        let (code, report) = run(dir.path(), "decay", &format!(r#"{{{SMALL_GRID}{sep}{field}}}"#));
        assert_eq!(code, 0, "{report}");
        for r in report["suites"][0]["details"]["reports"].as_array().unwrap() {
            assert!(r["margin"].as_f64().unwrap() >= 0.0);
        }
        let csv = std::fs::read_to_string(dir.path().join("out/decay.csv")).unwrap();
        assert!(csv.starts_with("theoretical,measured,margin\n"));
        assert_eq!(csv.lines().count(), 5);
    }
}

#[test]
fn moser_closed_form_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let (code, report) = run(dir.path(), "moser", "{}");
    assert_eq!(code, 0);
    assert!(report["suites"][0]["details"]["B_hat"].as_f64().unwrap() > 0.0);
    let column = r#"{"grid": {"d": 1, "nx": 64, "nv": 128, "Lx": 16.0, "Lv": 8.0, "dt": 0.0078125},
        "window": {"s": 0.0, "t": 1.0}, "kernel": {"source": {"x": [0.0], "v": [0.0]}},
        "moser": {"source": "column", "cylinders": [
            {"t": 1.0, "x": [0.0], "v": [0.0], "r": 0.5, "orientation": "backward"}]}}"#;
    let (code, report) = run(dir.path(), "moser", column);
    assert_eq!(code, 0, "{report}");
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_kfp"))
        .args(["moser", "--seed", "17", "--threads", "1", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seed"], 17);
    assert_eq!(report["command"], "moser");
}
