use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn vbfactor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vbfactor"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = vbfactor(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json_file(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate_fa(dir: &TempDir, p: usize, n: usize, j: usize) -> std::path::PathBuf {
    let out = dir.path().join("sim");
    let (p, n, j) = (p.to_string(), n.to_string(), j.to_string());
    ok(&["simulate", "--model", "fa", "--p", &p, "--n", &n, "--j", &j, "--seed", "2", "--outdir", s(&out)]);
    out
}

#[test]
fn fit_writes_state_with_converged_flag_and_repeats_byte_for_byte() {
    let dir = TempDir::new().unwrap();
    let sim = simulate_fa(&dir, 12, 80, 2);
    let data = sim.join("data.csv");
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for out in [&a, &b] {
        ok(&["fit", "--model", "fa", "--algo", "cavi", "--data", s(&data), "--jstar", "5", "--seed", "1", "--out", s(out), "--omit-timing"]);
    }
    let doc = json_file(&a);
    assert_eq!(doc["converged"], true);
    assert_eq!(doc["model"], "fa");
    assert!(doc["elapsed_seconds"].is_null());
    assert_eq!(doc["dims"]["p"], 12);
    assert_eq!(doc["loadings"].as_array().unwrap().len(), 12);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    ok(&["fit", "--data", s(&data), "--out", s(&a)]);
    assert!(json_file(&a)["elapsed_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn svi_fit_records_its_configuration() {
    let dir = TempDir::new().unwrap();
    let sim = simulate_fa(&dir, 10, 100, 2);
    let out = dir.path().join("r.json");
    ok(&["fit", "--algo", "svi", "--batch", "0.2", "--data", s(&sim.join("data.csv")), "--out", s(&out), "--omit-timing"]);
    let doc = json_file(&out);
    assert_eq!(doc["algorithm"], "svi");
    assert_eq!(doc["config"]["svi"]["batch_fractions"][0], 0.2);
    assert!(!doc["trace"].as_array().unwrap().is_empty());
}

#[test]
fn missing_data_is_a_usage_error() {
    let out = vbfactor(&["fit", "--model", "fa", "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("a.csv"), "1,2,3\n4,5,7\n2,2,2\n").unwrap();
    fs::write(dir.path().join("b.csv"), "1,2\n3,5\n1,1\n").unwrap();
    let manifest = dir.path().join("m.json");
    fs::write(&manifest, r#"{"studies": ["a.csv", "b.csv"]}"#).unwrap();
    let out = dir.path().join("r.json");
    let r = vbfactor(&["fit", "--model", "msfa", "--data", s(&manifest), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());

    let a = dir.path().join("a.csv");
    let r = vbfactor(&["fit", "--algo", "svi", "--batch", "0.1", "--data", s(&a), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2), "batch floor");
    assert!(String::from_utf8_lossy(&r.stderr).contains("empty minibatch"));

    let r = vbfactor(&["fit", "--data", s(&dir.path().join("missing.csv")), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2), "unreadable input");

    let r = vbfactor(&["simulate", "--p", "0", "--n", "5", "--j", "1", "--outdir", s(dir.path())]);
    assert_eq!(r.status.code(), Some(2), "invalid dims");
}

#[test]
fn simulate_writes_data_and_truth() {
    let dir = TempDir::new().unwrap();
    let sim = simulate_fa(&dir, 7, 30, 2);
    let text = fs::read_to_string(sim.join("data.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 31);
    assert!(lines[0].starts_with("V1,V2"));
    let truth = json_file(&sim.join("truth.json"));
    assert_eq!(truth["model"], "fa");
    assert_eq!(truth["lambda"].as_array().unwrap().len(), 7);
    assert_eq!(truth["lambda"][0].as_array().unwrap().len(), 2);

    let ms = dir.path().join("ms");
    ok(&["simulate", "--model", "msfa", "--p", "9", "--ns", "20,15", "--k", "2", "--js", "1,3", "--seed", "4", "--outdir", s(&ms)]);
    assert_eq!(json_file(&ms.join("manifest.json"))["studies"][1], "study_2.csv");
    assert_eq!(fs::read_to_string(ms.join("study_2.csv")).unwrap().lines().count(), 16);
    let truth = json_file(&ms.join("truth.json"));
    assert_eq!(truth["lambdas"][1][0].as_array().unwrap().len(), 3);
}

#[test]
fn benchmark_cells_report_accuracy_spread_and_batch_size() {
    let dir = TempDir::new().unwrap();
    let grid = dir.path().join("grid.json");
    fs::write(
        &grid,
        r#"{"model": "fa", "p": [100], "n": [1000], "algorithms": ["cavi"], "replicates": 1, "j": 4, "j_star": 5, "seed": 3}"#,
    )
    .unwrap();
    let out = dir.path().join("bench");
    ok(&["benchmark", "--grid", s(&grid), "--out", s(&out)]);
    let doc = json_file(&out.with_extension("json"));
    let cell = &doc["cells"][0];
    assert!(cell["rv_mean"].as_f64().unwrap() >= 0.95, "{cell}");
    assert!(cell["seconds_mean"].as_f64().unwrap() > 0.0);
    let csv = fs::read_to_string(out.with_extension("csv")).unwrap();
    assert!(csv.starts_with("model,p,n,studies,algorithm,batch_fraction,batch_size"));
    assert_eq!(csv.lines().count(), 2);

    fs::write(
        &grid,
        r#"{"model": "fa", "p": [20], "n": [100], "algorithms": ["svi"], "batch_fractions": [0.05], "replicates": 2, "j": 2, "j_star": 3}"#,
    )
    .unwrap();
    ok(&["benchmark", "--grid", s(&grid), "--out", s(&out)]);
    let doc = json_file(&out.with_extension("json"));
    let cell = &doc["cells"][0];
    assert_eq!(cell["batch_size"], 5);
    assert_eq!(cell["replicates"], 2);
    for key in ["seconds_sd", "rv_sd", "iterations_sd"] {
        assert!(cell[key].is_f64(), "{key}: {cell}");
    }
    assert_eq!(doc["metadata"]["grid"]["batch_fractions"][0], 0.05);

    fs::write(&grid, r#"{"model": "fa", "p": [20]}"#).unwrap();
    assert_eq!(vbfactor(&["benchmark", "--grid", s(&grid), "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn predicting_noise_free_training_data_is_near_exact() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("x.csv");
    let mut text = String::new();
    for i in 0..60 {
        let (a, b) = (((i * 7) % 11) as f64 - 5.0, ((i * 5) % 13) as f64 - 6.0);
        let row = [a, b, a + b, 2.0 * a - b, 0.5 * b, a - 3.0 * b];
        text.push_str(&row.map(|v| v.to_string()).join(","));
        text.push('\n');
    }
    fs::write(&data, text).unwrap();
    let state = dir.path().join("r.json");
    ok(&["fit", "--data", s(&data), "--jstar", "3", "--out", s(&state)]);
    let pred = dir.path().join("pred.csv");
    let out = ok(&["predict", "--state", s(&state), "--data", s(&data), "--out", s(&pred)]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["mse"].as_f64().unwrap() < 1e-6, "{report}");
    assert_eq!(fs::read_to_string(&pred).unwrap().lines().count(), 60);
}

#[test]
fn cross_validation_reports_each_fold_and_a_summary() {
    let dir = TempDir::new().unwrap();
    let ms = dir.path().join("ms");
    ok(&["simulate", "--model", "msfa", "--p", "15", "--ns", "40,30", "--k", "2", "--js", "1", "--seed", "1", "--outdir", s(&ms)]);
    let table = dir.path().join("cv.csv");
    let report = dir.path().join("cv.json");
    ok(&[
        "predict", "--cv", "10", "--data", s(&ms.join("manifest.json")), "--kstar", "3", "--jstar", "2",
        "--fa-jstar", "4", "--max-iter", "100", "--out", s(&table), "--report", s(&report),
    ]);
    let text = fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "fold,msfa,independent,stacked");
    assert_eq!(lines.len(), 12);
    assert!(lines[11].starts_with("mean(sd),"));
    assert!(lines[11].contains('('));
    let doc = json_file(&report);
    assert_eq!(doc["folds"].as_array().unwrap().len(), 10);
    assert_eq!(doc["relative_mse"]["msfa"], 1.0);
}

#[test]
fn edges_on_identity_covariance_is_header_only() {
    let dir = TempDir::new().unwrap();
    let cov = dir.path().join("cov.csv");
    fs::write(&cov, "1,0,0\n0,1,0\n0,0,1\n").unwrap();
    let out = dir.path().join("edges.csv");
    ok(&["edges", "--cov", s(&cov), "--out", s(&out)]);
    assert_eq!(fs::read_to_string(&out).unwrap(), "source,target,weight\n");

    fs::write(&cov, "a,b,c\n1,0.7,0.1\n0.7,1,-0.6\n0.1,-0.6,1\n").unwrap();
    ok(&["edges", "--cov", s(&cov), "--out", s(&out)]);
    assert_eq!(fs::read_to_string(&out).unwrap(), "source,target,weight\na,b,0.7\nb,c,-0.6\n");
}

#[test]
fn metrics_scores_against_truth_and_rejects_other_models() {
    let dir = TempDir::new().unwrap();
    let sim = simulate_fa(&dir, 20, 300, 3);
    let state = dir.path().join("r.json");
    ok(&["fit", "--data", s(&sim.join("data.csv")), "--jstar", "5", "--out", s(&state)]);
    let out = ok(&["metrics", "--state", s(&state), "--truth", s(&sim.join("truth.json"))]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let rv = report["rv_mean"].as_f64().unwrap();
    assert!(rv > 0.8 && rv <= 1.0, "{report}");
    assert_eq!(report["near_zero"].as_array().unwrap().len(), 5);

    let ms = dir.path().join("ms");
    ok(&["simulate", "--model", "msfa", "--p", "20", "--ns", "10", "--k", "1", "--js", "1", "--outdir", s(&ms)]);
    let r = vbfactor(&["metrics", "--state", s(&state), "--truth", s(&ms.join("truth.json"))]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn variance_filter_is_recorded_and_reapplied() {
    let dir = TempDir::new().unwrap();
    let sim = simulate_fa(&dir, 20, 100, 2);
    let data = sim.join("data.csv");
    let state = dir.path().join("r.json");
    ok(&["fit", "--data", s(&data), "--jstar", "3", "--filter-top-var", "0.25", "--scale", "--out", s(&state)]);
    let doc = json_file(&state);
    assert_eq!(doc["selected_columns"].as_array().unwrap().len(), 5);
    assert_eq!(doc["dims"]["p"], 5);
    assert_eq!(doc["variable_names"].as_array().unwrap().len(), 5);
    let pred = dir.path().join("pred.csv");
    ok(&["predict", "--state", s(&state), "--data", s(&data), "--out", s(&pred)]);
    assert!(fs::read_to_string(&pred).unwrap().lines().next().unwrap().split(',').count() == 5);
}
