use std::path::Path;
use std::process::{Command, Output};

fn smlmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smlmc")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = smlmc(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_fit_cluster_impute() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "[train]\nq = 2\nr = 1\nn_random_init = 20\nmax_outer_iters = 3\nscg_max_iters = 20\n\n[simulate]\njitter = 0.3\n",
    )
    .unwrap();
    let data = dir.path().join("cohort.csv");
    let models = dir.path().join("models");
    let pop = dir.path().join("pop.json");
    let imputed = dir.path().join("imputed");

    let out = ok(&["simulate", "--out", p(&data), "--patients", "3", "--dense", "1", "--sparse", "1", "--horizon", "96", "--seed", "4"]);
    assert!(out.contains("3 patients"));
    ok(&["fit", "--data", p(&data), "--out", p(&models), "--config", p(&config), "--eta", "0.1"]);
    assert_eq!(std::fs::read_dir(&models).unwrap().count(), 3);

    // no fits match this eta
    let out = smlmc(&["cluster", "--models", p(&models), "--out", p(&pop), "--eta", "1.0"]);
    assert_eq!(out.status.code(), Some(7));

    let out = ok(&["cluster", "--models", p(&models), "--out", p(&pop), "--eta", "0.1", "--seed", "2"]);
    assert!(out.contains("population kernels"));
    ok(&["impute", "--model", p(&pop), "--data", p(&data), "--out", p(&imputed)]);

    let records = std::fs::read_to_string(imputed.join("records.csv")).unwrap();
    let cohort = std::fs::read_to_string(&data).unwrap();
    let n_obs = cohort.lines().count() - 1;
    for method in ["joint", "independent", "naive"] {
        assert_eq!(records.lines().filter(|l| l.starts_with(&format!("{method},"))).count(), n_obs, "{method}");
    }
    let summary = std::fs::read_to_string(imputed.join("summary.csv")).unwrap();
    assert!(summary.starts_with("method,covariate,n,mae,coverage95"));
    assert_eq!(summary.lines().count(), 1 + 3 * 2);
}

#[test]
fn bench_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("bench.json");
    let out = ok(&["bench", "--out", p(&out_path), "--sizes", "40,80", "--q", "2", "--d", "3", "--r", "2", "--workers", "1,2"]);
    assert!(out.starts_with("t\tworkers"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
    assert!(report["max_objective_diff"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = smlmc(&["fit", "--data", p(&missing), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error [io]"));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "patient_id,covariate_name,time_hours,value\na,hr,oops,1\n").unwrap();
    let out = smlmc(&["fit", "--data", p(&bad), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}
