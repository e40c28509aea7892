use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn dsde_lab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsde-lab"))
        .args(args)
        .current_dir(dir)
        .env_remove("DSDE_THREADS")
        .output()
        .expect("binary runs")
}

fn run_config(dir: &Path, sub: &str, config: &str, extra: &[&str]) -> Output {
    let path = dir.join("config.json");
    fs::write(&path, config).unwrap();
    let mut args = vec![sub, "--config", path.to_str().unwrap()];
    args.extend_from_slice(extra);
    dsde_lab(&args, dir)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

#[test]
fn check_on_monotone_builtin_reports_no_violations() {
    let dir = TempDir::new().unwrap();
    let out = run_config(
        dir.path(),
        "check",
        r#"{"problem": {"builtin": "monotone_linear", "rate": 1.5}, "sampler": {"samples": 800}}"#,
        &["--out", "res"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("res/report.json"));
    assert_eq!(report["violation_count"], 0);
    assert_eq!(report["monotonicity"]["samples_tested"], 800);
    assert_eq!(report["passed"], true);
}

#[test]
fn check_reports_violations_without_failing() {
    let dir = TempDir::new().unwrap();
    // A reversed drift breaks monotonicity.
    let config = r#"{"problem": {"builtin": "linear", "spec": {
        "n": 1, "m": 1, "coupling": [[1.0]],
        "f": {"p": [[-1.0]]},
        "F": {"x": [[1.0]]},
        "phi": {"matrix": [[1.0]], "constant": [0.0]},
        "constants": {"mu1": 1.0, "mu2": 0.0, "beta1": 1.0, "beta2": 0.0, "c": 2.0, "gamma": 0.5}
    }}, "sampler": {"samples": 200}}"#;
    let out = run_config(dir.path(), "check", config, &["--out", "res"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("res/report.json"));
    assert!(report["violation_count"].as_u64().unwrap() > 0);
    assert_eq!(report["passed"], false);
}

#[test]
fn zero_builtin_solves_to_zeros() {
    let dir = TempDir::new().unwrap();
    let out = run_config(
        dir.path(),
        "solve-fbdsdep",
        r#"{"problem": {"builtin": "zero"}, "grid": {"horizon": 1.0, "steps": 8}, "ensemble": {"paths": 20}, "output": "zero"}"#,
        &[],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("zero/solution.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "path,node,t,X1,P1");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 20 * 9);
    for row in rows {
        let cells: Vec<f64> = row.split(',').skip(3).map(|c| c.parse().unwrap()).collect();
        assert!(cells.iter().all(|v| *v == 0.0), "{row}");
    }
    let trace = fs::read_to_string(dir.path().join("zero/trace.csv")).unwrap();
    assert!(trace.starts_with("step,alpha,delta,inner_iters,last_distance,ratio\n"));
    assert!(trace.lines().last().unwrap().starts_with("4,1.0000000000000000e0,"));
}

#[test]
fn malformed_json_exits_2_without_files() {
    let dir = TempDir::new().unwrap();
    let out = run_config(dir.path(), "check", "{\"problem\": {\"builtin\": \"zero\"},\n  oops", &["--out", "res"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("res").exists());
    let err = stderr_json(&out);
    assert_eq!(err["kind"], "config");
    assert_eq!(err["line"], 2);
}

#[test]
fn unknown_field_is_named_in_the_diagnostic() {
    let dir = TempDir::new().unwrap();
    let out = run_config(dir.path(), "check", r#"{"problem": {"builtin": "zero"}, "sead": 3}"#, &["--out", "res"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("sead"));
    assert!(!dir.path().join("res").exists());
}

#[test]
fn unknown_subcommand_exits_64() {
    let dir = TempDir::new().unwrap();
    let out = dsde_lab(&["frobnicate", "--config", "x.json"], dir.path());
    assert_eq!(out.status.code(), Some(64));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = dsde_lab(&["check"], dir.path());
    assert_eq!(out.status.code(), Some(64));
}

#[test]
fn validation_errors_exit_2_with_report() {
    let dir = TempDir::new().unwrap();
    let out = run_config(dir.path(), "solve-fbdsdep", r#"{"problem": {"builtin": "zero"}, "grid": {"steps": 0}}"#, &["--out", "res"]);
    assert_eq!(out.status.code(), Some(2));
    let err = read_json(&dir.path().join("res/error.json"));
    assert_eq!(err["kind"], "validation");
    assert_eq!(err["error"], "InvalidArgument");
    let out = run_config(dir.path(), "solve-bdsdep", r#"{"problem": {"builtin": "zero"}}"#, &["--out", "res2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(dir.path().join("res2/error.json").exists());
}

#[test]
fn solver_failure_exits_3_and_keeps_trace() {
    let dir = TempDir::new().unwrap();
    let config = r#"{"problem": {"builtin": "monotone_linear"}, "grid": {"steps": 8}, "ensemble": {"paths": 100},
        "homotopy": {"max_inner": 1, "inner_tol": 1e-14}}"#;
    let out = run_config(dir.path(), "solve-fbdsdep", config, &["--out", "res"]);
    assert_eq!(out.status.code(), Some(3));
    let err = read_json(&dir.path().join("res/error.json"));
    assert_eq!(err["kind"], "solver");
    assert_eq!(err["error"], "ContinuationFailure");
    assert!(dir.path().join("res/trace.csv").exists());
    assert!(!dir.path().join("res/solution.csv").exists());
}

#[test]
fn invalid_thread_cap_exits_2() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"problem": {"builtin": "zero"}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dsde-lab"))
        .args(["check", "--config", "c.json"])
        .current_dir(dir.path())
        .env("DSDE_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn backward_solve_writes_every_replicate() {
    let dir = TempDir::new().unwrap();
    let config = r#"{"problem": {"builtin": "backward", "terminal": {"kind": "constant", "value": 1.0},
        "driver": {"p": 0.5}}, "grid": {"steps": 16}, "ensemble": {"paths": 400, "b_replicates": 2}}"#;
    let out = run_config(dir.path(), "solve-bdsdep", config, &["--out", "res"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("res/solution.csv")).unwrap();
    assert!(csv.starts_with("path,node,t,P1,Q1\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 400 * 17);
    // Deterministic driver: P_0 = exp(-0.5) up to the Euler error.
    let summary = read_json(&dir.path().join("res/summary.json"));
    let p0 = summary["replicates"][1]["p0"].as_f64().unwrap();
    assert!((p0 - (-0.5f64).exp()).abs() < 0.02, "{p0}");
}

#[test]
fn feynman_kac_writes_field_and_comparison() {
    let dir = TempDir::new().unwrap();
    let config = r#"{"problem": {"builtin": "pide", "case": {"drift": 1.0, "terminal": {"kind": "sine"}}},
        "grid": {"steps": 8}, "ensemble": {"paths": 200},
        "feynman_kac": {"times": [0.0, 0.5], "xs": [-1.0, 0.0, 1.0], "fd": {"lower": -4.0, "upper": 4.0, "space_nodes": 201}}}"#;
    let out = run_config(dir.path(), "feynman-kac", config, &["--out", "res"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let field = fs::read_to_string(dir.path().join("res/field.csv")).unwrap();
    assert!(field.starts_with("t,x,u,stderr\n"));
    for row in field.lines().skip(1) {
        let v: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
        assert!((v[2] - (v[1] + 1.0 - v[0]).sin()).abs() < 1e-10, "{row}");
    }
    let cmp = fs::read_to_string(dir.path().join("res/comparison.csv")).unwrap();
    assert_eq!(cmp.lines().count(), 7);
    assert!(cmp.lines().skip(1).all(|r| r.ends_with(",1")));
}

#[test]
fn identical_configs_give_identical_bytes() {
    let dir = TempDir::new().unwrap();
    let config = r#"{"problem": {"builtin": "monotone_linear"}, "grid": {"steps": 8}, "ensemble": {"paths": 64}, "seed": 5}"#;
    let mut files = Vec::new();
    for (i, seed) in [None, None, Some("5"), Some("6")].into_iter().enumerate() {
        let out_dir = format!("run{i}");
        let mut extra = vec!["--out", out_dir.as_str()];
        if let Some(s) = seed {
            extra.extend(["--seed", s]);
        }
        let out = run_config(dir.path(), "solve-fbdsdep", config, &extra);
        assert_eq!(out.status.code(), Some(0));
        files.push(fs::read(dir.path().join(&out_dir).join("solution.csv")).unwrap());
    }
    assert_eq!(files[0], files[1]);
    assert_eq!(files[0], files[2]);
    assert_ne!(files[0], files[3]);
}
