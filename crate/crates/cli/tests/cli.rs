use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use expfam_cli::read_predictions;
use expfam_core::ExpFamilyKind;
use serde_json::{json, Value};
use tempfile::TempDir;

fn run(dir: &Path, tag: &str, args: &[&str], config: &Value) -> (Output, PathBuf) {
    let cfg_path = dir.join(format!("{tag}.json"));
    fs::write(&cfg_path, config.to_string()).unwrap();
    let out = dir.join(tag);
    let output = Command::new(env!("CARGO_BIN_EXE_expfam-proj"))
        .args(args)
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    (output, out)
}

fn run_ok(dir: &Path, tag: &str, args: &[&str], config: &Value) -> PathBuf {
    let (output, out) = run(dir, tag, args, config);
    assert!(output.status.success(), "{tag}: {}", String::from_utf8_lossy(&output.stderr));
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_csv(dir: &Path, name: &str, rows: &[Vec<f64>]) -> PathBuf {
    let path = dir.join(name);
    let text: Vec<String> = rows
        .iter()
        .map(|r| r.iter().map(f64::to_string).collect::<Vec<_>>().join(","))
        .collect();
    fs::write(&path, text.join("\n")).unwrap();
    path
}

/// A 2x2 binary matrix with one EPCA component.
fn tiny_epca(dir: &Path) -> Value {
    let csv = write_csv(dir, "tiny.csv", &[vec![1.0, 0.0], vec![0.0, 1.0]]);
    json!({
        "data": {"source": "csv", "csv": csv, "view_widths": [2, 0], "families": ["bernoulli", "bernoulli"]},
        "layout": {"model": "epca", "dims": {"d1": 2, "k_shared": 1}, "families": ["bernoulli", "bernoulli"]},
        "engine": {"kind": "map"},
    })
}

/// Binary data with a 3-column and a 2-column view.
fn two_view_rows() -> Vec<Vec<f64>> {
    (0..12)
        .map(|i| (0..5).map(|j| ((i * 7 + j * 3) % 5 < 2) as u8 as f64).collect())
        .collect()
}

#[test]
fn map_fit_writes_model_and_trace() {
    let dir = TempDir::new().unwrap();
    let out = run_ok(dir.path(), "fit", &["fit"], &tiny_epca(dir.path()));
    assert!(out.join("model/manifest.json").is_file());
    assert!(out.join("trace.csv").is_file());
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["command"], "fit");
    assert_eq!(summary["result"]["engine"], "map");
    assert!(summary["result"]["objective"].as_f64().unwrap().is_finite());
}

#[test]
fn same_config_gives_identical_manifests() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_epca(dir.path());
    let a = run_ok(dir.path(), "a", &["fit"], &cfg);
    let b = run_ok(dir.path(), "b", &["fit"], &cfg);
    let read = |d: &Path| fs::read(d.join("model/manifest.json")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn gibecca_fits_a_two_view_layout() {
    let dir = TempDir::new().unwrap();
    let csv = write_csv(dir.path(), "views.csv", &two_view_rows());
    let cfg = json!({
        "data": {"source": "csv", "csv": csv, "view_widths": [3, 2], "families": ["bernoulli", "bernoulli"]},
        "layout": {"model": "epls", "dims": {"d1": 3, "d2": 2, "k_shared": 1, "k_second": 1}, "families": ["bernoulli", "bernoulli"]},
        "prior": {"beta": 0.2},
        "engine": {"kind": "gibecca", "n_samples": 40, "burn_in": 10},
    });
    let out = run_ok(dir.path(), "gib", &["fit"], &cfg);
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["result"]["samples"], 40);
    let rate = summary["result"]["acceptance_rate"].as_f64().unwrap();
    assert!(rate > 0.0 && rate <= 1.0, "rate {rate}");
    assert!(out.join("chain").is_dir());
}

#[test]
fn one_heldout_entry_gives_one_prediction() {
    let dir = TempDir::new().unwrap();
    let mut cfg = tiny_epca(dir.path());
    cfg["holdout"] = json!({"entries": [[0, 1]]});
    let out = run_ok(dir.path(), "impute", &["impute"], &cfg);
    let preds = read_predictions(&out.join("predictions.csv")).unwrap();
    assert_eq!(preds.len(), 1);
    assert_eq!((preds[0].row, preds[0].col, preds[0].heldout), (0, 1, true));
    assert_eq!(read_json(&out.join("summary.json"))["heldout_entries"], 1);
}

#[test]
fn flat_gaussian_full_rank_fit_reproduces_inputs() {
    let dir = TempDir::new().unwrap();
    let rows: Vec<Vec<f64>> = (0..6).map(|i| (0..3).map(|j| ((i * 3 + j) as f64 * 0.37).sin()).collect()).collect();
    let csv = write_csv(dir.path(), "gauss.csv", &rows);
    let cfg = json!({
        "data": {"source": "csv", "csv": csv, "view_widths": [3, 0], "families": ["gaussian", "gaussian"]},
        "layout": {"model": "epca", "dims": {"d1": 3, "k_shared": 3}, "families": ["gaussian", "gaussian"]},
        "prior": {"sigma2_u": 1e8, "sigma2_v": 1e8},
        "engine": {"kind": "map", "grad_tol": 1e-10, "max_iter": 20000},
        "predict_all": true,
    });
    let out = run_ok(dir.path(), "identity", &["impute"], &cfg);
    let preds = read_predictions(&out.join("predictions.csv")).unwrap();
    assert_eq!(preds.len(), 18);
    for p in &preds {
        assert!((p.predicted - rows[p.row][p.col]).abs() < 1e-5, "{p:?}");
    }
}

#[test]
fn summary_loglik_matches_predictions_file() {
    let dir = TempDir::new().unwrap();
    let csv = write_csv(dir.path(), "views.csv", &two_view_rows());
    let cfg = json!({
        "data": {"source": "csv", "csv": csv, "view_widths": [3, 2], "families": ["bernoulli", "bernoulli"]},
        "layout": {"model": "sepca", "dims": {"d1": 3, "d2": 2, "k_shared": 2}, "families": ["bernoulli", "bernoulli"]},
        "engine": {"kind": "map"},
        "holdout": {"fraction": 0.2},
        "seed": 3,
    });
    let out = run_ok(dir.path(), "ll", &["impute"], &cfg);
    let preds = read_predictions(&out.join("predictions.csv")).unwrap();
    let summary = read_json(&out.join("summary.json"));
    let held: Vec<_> = preds.iter().filter(|p| p.heldout).collect();
    assert_eq!(held.len() as u64, summary["heldout_entries"].as_u64().unwrap());
    assert!(!held.is_empty());
    let recomputed: f64 = held
        .iter()
        .map(|p| ExpFamilyKind::Bernoulli.log_pdf(p.actual, p.theta).unwrap())
        .sum();
    let reported = summary["heldout_loglik"].as_f64().unwrap();
    assert!((recomputed - reported).abs() < 1e-9 * reported.abs().max(1.0), "{recomputed} vs {reported}");
}

#[test]
fn bad_beta_is_a_config_error_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let mut cfg = tiny_epca(dir.path());
    cfg["prior"] = json!({"beta": 1.5});
    let (output, _) = run(dir.path(), "bad", &["fit"], &cfg);
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("prior.beta"));
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = TempDir::new().unwrap();
    let mut cfg = tiny_epca(dir.path());
    cfg["priors"] = json!({});
    let (output, _) = run(dir.path(), "unknown", &["fit"], &cfg);
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("priors"));
}
