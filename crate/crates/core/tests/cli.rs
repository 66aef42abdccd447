//! End-to-end runs of the command-line tool.

use std::path::Path;
use std::process::Command;

fn dmpsc(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dmpsc")).args(args).output().expect("binary runs")
}

fn text(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_then_verify_tube() {
    let dir = tempfile::tempdir().unwrap();
    let artifacts = dir.path().join("artifacts.json");
    let model = dir.path().join("model.json");
    let out = dmpsc(&["synth", "--out", path(&artifacts), "--model-out", path(&model)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let ok = dmpsc(&["verify-tube", "--model", path(&model), "--artifacts", path(&artifacts), "--samples", "2000"]);
    assert!(ok.status.success());
    assert!(text(&ok).contains("0 violations"));

    let bad = dmpsc(&["verify-tube", "--artifacts", path(&artifacts), "--samples", "500", "--corrupt", "100"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn certify_run_writes_trace_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = dmpsc(&["certify-run", "--steps", "3", "--seed", "4", "--out", path(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(text(&out).contains("state violations 0"));
    assert!(out_dir.join("trace.csv").exists());
    assert!(out_dir.join("trace.json").exists());
}

#[test]
fn certify_run_with_distributed_solver_writes_telemetry() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = dmpsc(&[
        "certify-run",
        "--steps",
        "2",
        "--solver",
        "distributed",
        "--rho",
        "1.0",
        "--max-iter",
        "3000",
        "--consensus-tol",
        "1e-5",
        "--out",
        path(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let telemetry = std::fs::read_to_string(out_dir.join("telemetry.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(telemetry.lines().next().unwrap()).unwrap();
    assert!(first.get("primal_residual").is_some());
    assert!(first.get("solve").is_some());
}

#[test]
fn external_policy_and_explicit_state() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = dir.path().join("inputs.json");
    std::fs::write(&inputs, serde_json::to_string(&vec![vec![0.5; 9]; 2]).unwrap()).unwrap();
    let policy = format!("external:{}", path(&inputs));
    let x0 = vec!["0"; 18].join(",");
    let out = dmpsc(&[
        "certify-run",
        "--policy",
        &policy,
        "--controller",
        "raw",
        "--steps",
        "2",
        "--x0",
        &x0,
        "--out",
        path(&dir.path().join("run")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn wrong_state_length_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmpsc(&["certify-run", "--x0", "0,0,0", "--out", path(&dir.path().join("run"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("x0"));
}

#[test]
fn compare_writes_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("cmp");
    let out = dmpsc(&["compare", "--runs", "2", "--steps", "3", "--horizon", "5", "--out", path(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["variants"].as_array().unwrap().len(), 3);
}
