//! End-to-end runs of the `carcal` binary.

mod common;

use std::path::Path;
use std::process::{Command, Output};

fn carcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_carcal")).args(args).env_remove("CARCAL_THREADS").output().unwrap()
}

fn body_rows(path: &Path) -> Vec<csv::StringRecord> {
    let text = std::fs::read_to_string(path).unwrap();
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    csv::Reader::from_reader(body.as_bytes()).records().map(|r| r.unwrap()).collect()
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
    let idx = header.split(',').position(|c| c == name).unwrap();
    body_rows(path).iter().map(|r| r[idx].to_string()).collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small trial with a predictive covariate `x1` and a noise covariate `x2`.
fn write_small_trial(dir: &Path) -> std::path::PathBuf {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut g = common::rng(77);
    let path = dir.join("trial.csv");
    let mut w = csv::Writer::from_path(&path).unwrap();
    w.write_record(["y", "a", "stratum", "x1", "x2"]).unwrap();
    for i in 0..400 {
        let s = i % 4;
        let a = (i / 4) % 2;
        let x1: f64 = g.random::<f64>() * 10.0;
        let x2: f64 = g.sample(StandardNormal);
        let e: f64 = g.sample(StandardNormal);
        let y = 3.0 * (x1 + 1.0).powf(0.481) + 2.0 * x1 + a as f64 + s as f64 + e;
        w.write_record([y.to_string(), a.to_string(), format!("S{s}"), x1.to_string(), x2.to_string()]).unwrap();
    }
    w.flush().unwrap();
    path
}

#[test]
fn simulate_writes_rows_for_default_estimators() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m1.csv");
    let args = [
        "simulate", "--model", "1", "--n", "300", "--reps", "4", "--design", "stratified-block", "--block", "6", "--pi",
        "0.5", "--proxy", "ols-within", "--seed", "42", "--out", p(&out),
    ];
    let o = carcal(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(column(&out, "estimator"), ["sdim", "aipw", "cal"]);
    assert!(out.with_extension("txt").exists());
    let first = std::fs::read(&out).unwrap();
    assert!(carcal(&args).status.success());
    assert_eq!(first, std::fs::read(&out).unwrap());
    let text = String::from_utf8(first).unwrap();
    assert!(text.contains("# config: seed = 42") && text.contains("# config: proxy = ols-within"));
}

#[test]
fn simulate_records_minimization_settings() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("min.csv");
    let o = carcal(&[
        "simulate", "--n", "200", "--reps", "3", "--design", "minimization", "--biased-coin", "0.75", "--estimators",
        "sdim", "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("# config: design = minimization"));
    assert!(text.contains("# config: biased-coin = 0.75"));
}

#[test]
fn simulate_config_file_and_invalid_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let out = dir.path().join("c.csv");
    std::fs::write(&cfg, format!("# study\nn = 200\nreps = 3\nestimators = sdim\nout = {}\n", p(&out))).unwrap();
    assert!(carcal(&["simulate", "--config", p(&cfg)]).status.success());
    assert!(std::fs::read_to_string(&out).unwrap().contains("# config: n = 200"));

    for bad in [["--n", "ten"], ["--pi", "1.5"], ["--design", "coinflip"], ["--model", "9"]] {
        let o = carcal(&["simulate", "--reps", "2", bad[0], bad[1], "--out", p(&out)]);
        assert_eq!(o.status.code(), Some(2), "{bad:?}");
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    }
    std::fs::write(&cfg, "colour = blue\n").unwrap();
    assert_eq!(carcal(&["simulate", "--config", p(&cfg)]).status.code(), Some(2));
}

#[test]
fn estimate_power_proxy_beats_sdim() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_small_trial(dir.path());
    let out = dir.path().join("est.csv");
    let o = carcal(&[
        "estimate", "--data", p(&data), "--covariates", "x1,x2", "--proxy", "raw:x1,pow:x1^0.481+1", "--discrepancy",
        "quadratic", "--level", "0.95", "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(column(&out, "estimator"), ["sdim", "cal"]);
    let se: Vec<f64> = column(&out, "se").iter().map(|s| s.parse().unwrap()).collect();
    assert!(se[1] < se[0], "{se:?}");
    assert_eq!(column(&out, "proxy")[1], "raw:x1;pow:(x1+1)^0.481");
}

#[test]
fn estimate_reports_solver_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_small_trial(dir.path());
    let out = dir.path().join("el.csv");
    let o = carcal(&[
        "estimate", "--data", p(&data), "--proxy", "within:ols", "--discrepancy", "emp-likelihood", "--cross-fit",
        "true", "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(column(&out, "estimator"), ["sdim", "cal", "cal-cf"]);
    let iters: usize = column(&out, "iterations")[1].parse().unwrap();
    assert!(iters > 0);
    assert_eq!(column(&out, "converged")[1], "true");
    assert_eq!(column(&out, "all_weights_positive")[1], "true");
}

#[test]
fn estimate_marks_external_columns() {
    let dir = tempfile::tempdir().unwrap();
    let (data, external) = common::write_twin(dir.path(), 5);
    let out = dir.path().join("ext.csv");
    let o = carcal(&[
        "estimate", "--data", p(&data), "--proxy", "raw:x+external", "--external", p(&external), "--prune", "6", "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let proxy = &column(&out, "proxy")[1];
    assert!(proxy.starts_with("raw:x;") && proxy.ends_with("[external]"), "{proxy}");
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("# pruned: removed "));
}

#[test]
fn estimate_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_small_trial(dir.path());
    let out = dir.path().join("e.csv");
    let cases: [&[&str]; 4] = [
        &["estimate", "--proxy", "raw:x1", "--out", p(&out)],
        &["estimate", "--data", "/nonexistent.csv", "--proxy", "raw:x1", "--out", p(&out)],
        &["estimate", "--data", p(&data), "--proxy", "raw:nope", "--out", p(&out)],
        &["estimate", "--data", p(&data), "--proxy", "raw:x1", "--winsorize", "1.5", "--out", p(&out)],
    ];
    for args in cases {
        let o = carcal(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn rho_check_text_and_json() {
    let o = carcal(&["rho-check"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|l| l.starts_with("PASS ")));

    let o = carcal(&["rho-check", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let refs: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r["reference"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect())
        .collect();
    assert_eq!(refs, [vec![1.0, -1.0, 0.0], vec![1.0, -1.0, 1.0], vec![1.0, -1.0, 2.0]]);
    assert!(rows.iter().all(|r| r["pass"] == serde_json::Value::Bool(true)));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = carcal(&["plot"]);
    assert!(!o.status.success());
    assert_ne!(o.status.code(), Some(0));
}
