use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aqp_core::pipeline::{Provenance, TrainingExample, TrainingTable};
use aqp_core::predictor::{build_network, LRParams, Mode};
use aqp_core::{BBox, HistogramGrid, Seed};

fn aqp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aqp"))
        .args(args)
        .env("AQP_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

const SMALL_CONFIG: &str = r#"
seed = 3

[data]
n = 3000
datasets = ["uniform", "gaussian(sigma=0.1,cx=0.5,cy=0.5)", "diagonal"]

[grid]
sigmas = [0.01, 0.05, 0.2, 1.0]
qs = [0.05, 0.1]
queries = 10
draws = 2

[training]
h = 4
max_epochs = 5

[relationship]
datasets = ["uniform", "sierpinski"]

[histogram_resolution]
sizes = [1, 4]
"#;

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL_CONFIG).unwrap();
    path
}

#[test]
fn generate_writes_points_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.csv");
    let o = aqp(&["generate", "--spec", "uniform", "--n", "10", "--seed", "1", "--out", p(&out)]);
    assert_ok(&o);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert!(text.lines().all(|l| l.split(',').count() == 2));
    let meta = std::fs::read_to_string(dir.path().join("p.csv.meta")).unwrap();
    assert!(meta.contains("family=uniform") && meta.contains("n=10") && meta.contains("seed=1"));

    let again = aqp(&["generate", "--spec", "uniform", "--n", "10", "--seed", "1", "--out", p(&out)]);
    assert_ok(&again);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), text);
}

#[test]
fn histogram_of_generated_points() {
    let dir = tempfile::tempdir().unwrap();
    let pts = dir.path().join("p.csv");
    let hist = dir.path().join("p.hist");
    assert_ok(&aqp(&["generate", "--spec", "bit(p=0.3)", "--n", "500", "--seed", "2", "--out", p(&pts)]));
    assert_ok(&aqp(&["histogram", "--points", p(&pts), "--h", "8", "--out", p(&hist)]));
    let grid = HistogramGrid::read(&hist).unwrap();
    assert_eq!(grid.h(), 8);
    assert!((grid.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn zero_weight_model_predicts_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = build_network(Mode::AccuracyPrediction, 4, Seed(1)).unwrap();
    model.network.zero_weights();
    let model_path = dir.path().join("zero.json");
    model.save(&model_path).unwrap();
    let hist_path = dir.path().join("h.hist");
    HistogramGrid::new(4, BBox::unit(), vec![1.0 / 16.0; 16]).unwrap().write(&hist_path).unwrap();
    let o = aqp(&[
        "predict-accuracy", "--model", p(&model_path), "--q", "0.05", "--sigma", "0.01", "--hist", p(&hist_path),
    ]);
    assert_ok(&o);
    assert_eq!(stdout(&o).trim(), "0.0");

    let wrong = aqp(&[
        "estimate-ratio", "--model", p(&model_path), "--q", "0.05", "--alpha", "0.9", "--hist", p(&hist_path),
    ]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn perfect_predictor_evaluates_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let rows = (0..6)
        .map(|i| TrainingExample {
            dataset_id: format!("d{i}"),
            distribution: "uniform".into(),
            n: 100,
            q: 0.01 * (i + 1) as f64,
            sigma: 0.1,
            mean_accuracy: 0.5,
        })
        .collect();
    let table = TrainingTable { rows, provenance: Provenance::default() };
    let table_path = dir.path().join("t.csv");
    table.write(&table_path).unwrap();
    let lr_path = dir.path().join("lr.txt");
    LRParams { mode: Mode::AccuracyPrediction, intercept: 0.5, q: 0.0, driver: 0.0 }
        .save(&lr_path)
        .unwrap();
    let o = aqp(&["evaluate", "--model", p(&lr_path), "--table", p(&table_path)]);
    assert_ok(&o);
    assert_eq!(stdout(&o).trim(), "0.0");
}

#[test]
fn usage_errors_exit_1() {
    let o = aqp(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
    assert!(o.stdout.is_empty());
    let o = aqp(&["generate", "--spec", "uniform", "--n", "ten", "--seed", "1", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn data_errors_exit_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("h.hist");
    let o = aqp(&["histogram", "--points", p(&dir.path().join("missing.csv")), "--h", "4", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());

    let pts = dir.path().join("p.csv");
    assert_ok(&aqp(&["generate", "--spec", "uniform", "--n", "20", "--seed", "1", "--out", p(&pts)]));
    let o = aqp(&["histogram", "--points", p(&pts), "--h", "0", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());

    let bad = aqp(&["generate", "--spec", "zigzag", "--n", "5", "--seed", "1", "--out", p(&dir.path().join("z.csv"))]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("invalid distribution spec"));
}

#[test]
fn table_train_predict_evaluate_chain() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let table = dir.path().join("table.csv");
    assert_ok(&aqp(&["build-table", "--config", p(&config), "--out", p(&table)]));
    let parsed = TrainingTable::read(&table).unwrap();
    assert_eq!(parsed.len(), 24);
    assert!(std::fs::read_to_string(&table).unwrap().starts_with("# config-hash="));
    let hists = dir.path().join("hists");
    assert_eq!(std::fs::read_dir(&hists).unwrap().count(), 3);

    let model = dir.path().join("acc.json");
    let o = aqp(&[
        "train", "--mode", "accuracy", "--table", p(&table), "--out-model", p(&model), "--config", p(&config),
    ]);
    assert_ok(&o);
    let out = stdout(&o);
    assert!(out.contains("train_mape=") && out.contains("validation_mape="), "{out}");

    let hist = hists.join("uniform-00.hist");
    let o = aqp(&["predict-accuracy", "--model", p(&model), "--q", "0.05", "--sigma", "0.02", "--hist", p(&hist)]);
    assert_ok(&o);
    let alpha: f64 = stdout(&o).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&alpha));

    let o = aqp(&["evaluate", "--model", p(&model), "--table", p(&table)]);
    assert_ok(&o);
    let mape: f64 = stdout(&o).trim().parse().unwrap();
    assert!(mape >= 0.0);

    let ratio = dir.path().join("ratio.json");
    assert_ok(&aqp(&[
        "train", "--mode", "ratio", "--table", p(&table), "--hists", p(&hists), "--out-model", p(&ratio),
        "--config", p(&config),
    ]));
    let o = aqp(&["estimate-ratio", "--model", p(&ratio), "--q", "0.05", "--alpha", "0.9", "--hist", p(&hist)]);
    assert_ok(&o);
    let sigma: f64 = stdout(&o).trim().parse().unwrap();
    assert!((1e-5..=1.0).contains(&sigma));

    let lr = dir.path().join("lr.txt");
    assert_ok(&aqp(&["train", "--mode", "ratio", "--table", p(&table), "--out-model", p(&lr), "--baseline"]));
    let o = aqp(&["estimate-ratio", "--model", p(&lr), "--q", "0.05", "--alpha", "0.9"]);
    assert_ok(&o);

    let bytes = std::fs::read(&model).unwrap();
    assert_ok(&aqp(&[
        "train", "--mode", "accuracy", "--table", p(&table), "--out-model", p(&model), "--config", p(&config),
    ]));
    assert_eq!(std::fs::read(&model).unwrap(), bytes);
}

#[test]
fn experiments_write_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = dir.path().join("out");
    for kind in ["relationship", "distribution-count", "histogram-resolution"] {
        assert_ok(&aqp(&["experiment", kind, "--config", p(&config), "--out-dir", p(&out)]));
    }
    let rel = std::fs::read_to_string(out.join("relationship.csv")).unwrap();
    assert!(rel.starts_with("# config-hash="));
    assert_eq!(rel.lines().count(), 2 + 2 * 4 * 2);
    let dc = std::fs::read_to_string(out.join("distribution_count.csv")).unwrap();
    let ks: Vec<&str> = dc.lines().skip(2).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ks.len(), 3 * 4);
    assert!(ks.iter().all(|k| ["1", "2", "3"].contains(k)));
    let hr = std::fs::read_to_string(out.join("histogram_resolution.csv")).unwrap();
    assert_eq!(hr.lines().nth(1), Some("h,test_mape,epochs,best_epoch"));
    assert!(out.join("histogram_resolution_timing.csv").exists());

    let again = dir.path().join("again");
    assert_ok(&aqp(&["experiment", "relationship", "--config", p(&config), "--out-dir", p(&again)]));
    assert_eq!(std::fs::read_to_string(again.join("relationship.csv")).unwrap(), rel);
}
