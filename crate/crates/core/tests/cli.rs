use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_girsanov-grad");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("GIRSANOV_GRAD_THREADS")
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn estimate_in(dir: &Path, threads: &str) -> Output {
    run(&[
        "estimate",
        "--problem",
        "double-well",
        "--dt",
        "1e-2",
        "--n",
        "400",
        "--seed",
        "9",
        "--a",
        "0.1,-0.2,0.3",
        "--threads",
        threads,
        "--out-dir",
        dir.to_str().unwrap(),
    ])
}

#[test]
fn missing_seed_is_a_usage_error() {
    let out = run(&["estimate", "--problem", "quadratic"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn unknown_method_is_a_usage_error() {
    let out = run(&["optimize", "--seed", "1", "--method", "bfgs"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_grid_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "sweep",
        "--seed",
        "1",
        "--grid",
        "",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_ne!(out.status.code(), Some(0));
    assert!(!dir.path().join("sweep.csv").exists());
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"seed": 1, "sede": 2}"#).unwrap();
    let out = run(&["estimate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn estimate_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "estimate",
        "--problem",
        "brownian-exit",
        "--b",
        "1",
        "--a",
        "1",
        "--dt",
        "1e-2",
        "--n",
        "500",
        "--seed",
        "4",
        "--dump-paths",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["phi.json", "gradient.json", "hessian.json", "kl.json", "free_energy.json"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let phi = read_json(&dir.path().join("phi.json"));
    assert_eq!(phi["n_samples"], 500);
    let hessian = read_json(&dir.path().join("hessian.json"));
    assert_eq!(hessian["values"].as_array().unwrap().len(), 1);

    let paths = fs::read_to_string(dir.path().join("paths.csv")).unwrap();
    let mut lines = paths.lines();
    assert_eq!(lines.next().unwrap(), "tau,censored,phi,m_0,gram_0_0");
    assert_eq!(lines.count(), 500);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"problem": "quadratic", "seed": 3, "n_samples": 300, "a": [0.5]}"#,
    )
    .unwrap();
    let out_a = dir.path().join("a");
    let out = run(&[
        "estimate",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out_a.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_json(&out_a.join("phi.json"))["n_samples"], 300);

    let out_b = dir.path().join("b");
    let out = run(&[
        "estimate",
        "--config",
        cfg.to_str().unwrap(),
        "--n",
        "200",
        "--out-dir",
        out_b.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(read_json(&out_b.join("phi.json"))["n_samples"], 200);
}

#[test]
fn estimates_identical_across_thread_counts() {
    let dirs: Vec<_> = (0..4).map(|_| tempfile::tempdir().unwrap()).collect();
    for (dir, threads) in dirs.iter().zip(["1", "4", "8", "1"]) {
        let out = estimate_in(dir.path(), threads);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["phi.json", "gradient.json", "hessian.json", "kl.json", "free_energy.json"] {
        let first = fs::read(dirs[0].path().join(name)).unwrap();
        for d in &dirs[1..] {
            assert_eq!(first, fs::read(d.path().join(name)).unwrap(), "{name} differs");
        }
    }
}

#[test]
fn threads_default_comes_from_the_environment() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let direct = estimate_in(a.path(), "3");
    assert_eq!(direct.status.code(), Some(0));
    let out = Command::new(BIN)
        .args([
            "estimate",
            "--problem",
            "double-well",
            "--dt",
            "1e-2",
            "--n",
            "400",
            "--seed",
            "9",
            "--a",
            "0.1,-0.2,0.3",
            "--out-dir",
            b.path().to_str().unwrap(),
        ])
        .env("GIRSANOV_GRAD_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        fs::read(a.path().join("gradient.json")).unwrap(),
        fs::read(b.path().join("gradient.json")).unwrap()
    );

    let bad = Command::new(BIN)
        .args(["estimate", "--seed", "1"])
        .env("GIRSANOV_GRAD_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn optimize_writes_trace_and_is_reproducible() {
    let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for (dir, threads) in dirs.iter().zip(["1", "4"]) {
        let out = run(&[
            "optimize",
            "--problem",
            "quadratic",
            "--method",
            "gd",
            "--a0",
            "1",
            "--n",
            "500",
            "--max-iter",
            "10",
            "--seed",
            "2",
            "--threads",
            threads,
            "--out-dir",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let csv = fs::read_to_string(dirs[0].path().join("trace.csv")).unwrap();
    assert!(csv.starts_with("j,a_0,phi_mean,phi_se,grad_norm,step\n"));
    assert_eq!(
        fs::read(dirs[0].path().join("trace.json")).unwrap(),
        fs::read(dirs[1].path().join("trace.json")).unwrap()
    );
    let trace = read_json(&dirs[0].path().join("trace.json"));
    assert_eq!(trace["method"], "gd");
}

#[test]
fn newton_runs_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "optimize",
        "--problem",
        "quadratic",
        "--method",
        "newton",
        "--a0",
        "-0.5",
        "--n",
        "2000",
        "--grad-tol",
        "1e-9",
        "--max-iter",
        "3",
        "--seed",
        "2",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let trace = read_json(&dir.path().join("trace.json"));
    assert_eq!(trace["method"], "newton");
    assert_eq!(trace["iterates"].as_array().unwrap().len(), 4);
}

#[test]
fn verify_exit_law_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "verify",
        "--suite",
        "exit-law",
        "--n",
        "4000",
        "--dt",
        "1e-2",
        "--seed",
        "5",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    let code = out.status.code();
    assert!(code == Some(0) || code == Some(1));
    let report = read_json(&dir.path().join("verify_report.json"));
    let checks = report.as_array().unwrap();
    assert!(!checks.is_empty());
    for c in checks {
        for key in ["check_name", "value", "oracle", "tolerance", "pass"] {
            assert!(c.get(key).is_some(), "missing {key}");
        }
    }
    let all_pass = checks.iter().all(|c| c["pass"] == true);
    assert_eq!(code == Some(0), all_pass);
}

#[test]
fn sweep_over_b_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "sweep",
        "--problem",
        "brownian-exit",
        "--over",
        "b",
        "--grid",
        "0.5:1.5:0.5",
        "--a",
        "1",
        "--n",
        "300",
        "--dt",
        "1e-2",
        "--seed",
        "8",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn json_problem_file_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let problem = dir.path().join("problem.json");
    fs::write(&problem, include_str!("data/ou_exit.json")).unwrap();
    let out = run(&[
        "estimate",
        "--problem",
        problem.to_str().unwrap(),
        "--n",
        "200",
        "--seed",
        "1",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("gradient.json").exists());
}
