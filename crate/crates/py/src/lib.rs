//! Python bindings: datasets, histograms, accuracy measurement, training
//! tables, models and experiments.

use std::collections::HashMap;

use aqp_core::config::Config;
use aqp_core::pipeline::{
    self, build_corpus, experiment_distribution_count, experiment_histogram_resolution,
    experiment_relationship,
};
use aqp_core::predictor::{self, LRParams, Mode, TabularFeatures, TrainConfig};
use aqp_core::{BBox, Error, HistogramGrid, Seed};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for aqp_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn parse_mode(mode: &str) -> PyResult<Mode> {
    mode.parse().py()
}

/// A set of 2D points.
#[pyclass(name = "PointSet", module = "aqp")]
struct PyPointSet {
    inner: aqp_core::PointSet,
}

#[pymethods]
impl PyPointSet {
    #[new]
    fn new(points: Vec<(f64, f64)>) -> PyResult<Self> {
        let pts = points.into_iter().map(|(x, y)| aqp_core::Point::new(x, y)).collect();
        Ok(Self {
            inner: aqp_core::PointSet::new(pts).py()?,
        })
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: aqp_core::PointSet::read(path).py()?,
        })
    }

    fn write(&self, path: &str) -> PyResult<()> {
        self.inner.write(path).py()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn points(&self) -> Vec<(f64, f64)> {
        self.inner.iter().map(|p| (p.x, p.y)).collect()
    }

    /// `(min_x, min_y, max_x, max_y)`.
    fn mbr(&self) -> PyResult<(f64, f64, f64, f64)> {
        let b = self.inner.mbr().py()?;
        Ok((b.min_x, b.min_y, b.max_x, b.max_y))
    }
}

/// Seeded synthetic points, e.g. `generate("gaussian(sigma=0.1)", 1000, 7)`.
#[pyfunction]
fn generate(spec: &str, n: usize, seed: u64) -> PyResult<PyPointSet> {
    let spec: aqp_core::DistributionSpec = spec.parse().py()?;
    Ok(PyPointSet {
        inner: aqp_core::generate(&spec, n, Seed(seed)).py()?,
    })
}

/// Equi-width h x h frequency grid over a point set's bounding box.
#[pyclass(name = "Histogram", module = "aqp")]
struct PyHistogram {
    inner: HistogramGrid,
}

#[pymethods]
impl PyHistogram {
    #[staticmethod]
    fn build(points: PyRef<'_, PyPointSet>, h: usize) -> PyResult<Self> {
        Ok(Self {
            inner: aqp_core::build_histogram(&points.inner, h).py()?,
        })
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: HistogramGrid::read(path).py()?,
        })
    }

    fn write(&self, path: &str) -> PyResult<()> {
        self.inner.write(path).py()
    }

    #[getter]
    fn h(&self) -> usize {
        self.inner.h()
    }

    /// Row-major cell frequencies; row 0 is the lowest y band.
    fn values(&self) -> Vec<f64> {
        self.inner.flatten()
    }

    fn get(&self, row: usize, col: usize) -> PyResult<f64> {
        let h = self.inner.h();
        if row >= h || col >= h {
            return Err(PyValueError::new_err(format!("cell ({row},{col}) outside {h}x{h}")));
        }
        Ok(self.inner.get(row, col))
    }
}

/// `max(0, 1 - |truth - estimate| / truth)`.
#[pyfunction]
fn accuracy(estimate: f64, truth: u64) -> PyResult<f64> {
    aqp_core::accuracy(estimate, truth).py()
}

/// Exact count of points inside the closed box.
#[pyfunction]
fn ground_truth(points: PyRef<'_, PyPointSet>, min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> PyResult<u64> {
    let bbox = BBox::new(min_x, min_y, max_x, max_y).py()?;
    let area = bbox.area();
    Ok(aqp_core::ground_truth(&points.inner, &aqp_core::QuerySpec { bbox, q: area }))
}

/// Mean estimate accuracy over `m` random queries and `r` samples each.
#[pyfunction]
#[pyo3(signature = (points, sigma, q, m = 50, r = 5, seed = 0))]
fn measure_mean_accuracy(
    py: Python<'_>,
    points: PyRef<'_, PyPointSet>,
    sigma: f64,
    q: f64,
    m: usize,
    r: usize,
    seed: u64,
) -> PyResult<f64> {
    let data = points.inner.clone();
    py.detach(|| aqp_core::measure_mean_accuracy(&data, sigma, q, m, r, Seed(seed)))
        .py()
}

/// Experiment configuration (TOML).
#[pyclass(name = "Config", module = "aqp")]
struct PyConfig {
    inner: Config,
}

#[pymethods]
impl PyConfig {
    /// The desk-scale defaults.
    #[new]
    fn new() -> Self {
        Self {
            inner: Config::default(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Config::from_toml(text).py()?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Config::load(path).py()?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn hash(&self) -> String {
        self.inner.hash()
    }
}

/// Measured (dataset, sigma, q, mean accuracy) rows.
#[pyclass(name = "TrainingTable", module = "aqp")]
struct PyTrainingTable {
    inner: pipeline::TrainingTable,
}

#[pymethods]
impl PyTrainingTable {
    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: pipeline::TrainingTable::read(path).py()?,
        })
    }

    fn write(&self, path: &str) -> PyResult<()> {
        self.inner.write(path).py()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn rows<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .rows
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("dataset_id", &r.dataset_id)?;
                d.set_item("distribution", &r.distribution)?;
                d.set_item("n", r.n)?;
                d.set_item("q", r.q)?;
                d.set_item("sigma", r.sigma)?;
                d.set_item("mean_accuracy", r.mean_accuracy)?;
                Ok(d)
            })
            .collect()
    }

    /// Seeded row-level split into `(train, test)`.
    fn split(&self, train_fraction: f64, seed: u64) -> PyResult<(Self, Self)> {
        let (a, b) = pipeline::split(&self.inner, train_fraction, Seed(seed)).py()?;
        Ok((Self { inner: a }, Self { inner: b }))
    }
}

/// Generates a config's datasets and measures its training table.
/// Returns `(table, {dataset_id: PointSet})`.
#[pyfunction]
fn build_table(py: Python<'_>, config: PyRef<'_, PyConfig>) -> PyResult<(PyTrainingTable, HashMap<String, PyPointSet>)> {
    let config = config.inner.clone();
    let corpus = py.detach(|| build_corpus(&config)).py()?;
    let datasets = corpus
        .datasets
        .into_iter()
        .map(|d| (d.id, PyPointSet { inner: d.points }))
        .collect();
    Ok((PyTrainingTable { inner: corpus.table }, datasets))
}

fn histogram_map(hists: &Bound<'_, PyDict>) -> PyResult<HashMap<String, HistogramGrid>> {
    hists
        .iter()
        .map(|(k, v)| {
            let grid: PyRef<'_, PyHistogram> = v.extract()?;
            Ok((k.extract::<String>()?, grid.inner.clone()))
        })
        .collect()
}

/// Dual-branch accuracy / sampling-ratio model.
#[pyclass(name = "Model", module = "aqp")]
struct PyModel {
    inner: predictor::Model,
}

#[pymethods]
impl PyModel {
    /// Fresh seeded model; `mode` is `"accuracy"` or `"ratio"`.
    #[staticmethod]
    fn build(mode: &str, h: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: predictor::build_network(parse_mode(mode)?, h, Seed(seed)).py()?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: predictor::Model::load(path).py()?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).py()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.name()
    }

    #[getter]
    fn h(&self) -> usize {
        self.inner.h
    }

    fn param_count(&self) -> usize {
        self.inner.network.param_count()
    }

    fn zero_weights(&mut self) {
        self.inner.network.zero_weights();
    }

    fn predict_accuracy(&self, q: f64, sigma: f64, hist: PyRef<'_, PyHistogram>) -> PyResult<f64> {
        if self.inner.mode != Mode::AccuracyPrediction {
            return Err(PyValueError::new_err("model is not in accuracy mode"));
        }
        self.inner
            .predict(&TabularFeatures::for_accuracy(q, sigma).py()?, &hist.inner)
            .py()
    }

    fn estimate_ratio(&self, q: f64, alpha: f64, hist: PyRef<'_, PyHistogram>) -> PyResult<f64> {
        predictor::estimate_sampling_ratio(&self.inner, q, alpha, &hist.inner).py()
    }
}

/// Least-squares baseline over `[1, q, driver]`.
#[pyclass(name = "LinearBaseline", module = "aqp")]
struct PyLinearBaseline {
    inner: LRParams,
}

#[pymethods]
impl PyLinearBaseline {
    #[staticmethod]
    fn fit(mode: &str, table: PyRef<'_, PyTrainingTable>) -> PyResult<Self> {
        Ok(Self {
            inner: predictor::lr_fit(parse_mode(mode)?, &table.inner.rows).py()?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: LRParams::load(path).py()?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).py()
    }

    /// `(intercept, q, driver)`.
    fn coefficients(&self) -> (f64, f64, f64) {
        (self.inner.intercept, self.inner.q, self.inner.driver)
    }

    /// `driver` is `log10(sigma)` in accuracy mode and `alpha` in ratio mode.
    fn predict(&self, q: f64, driver: f64) -> f64 {
        predictor::lr_predict(&self.inner, &TabularFeatures { q, driver })
    }
}

/// Trains a fresh model; returns `(model, history)` where history is a list
/// of per-epoch dicts.
#[pyfunction]
#[pyo3(signature = (mode, table, hists, seed = 0, max_epochs = 500, patience = 20, batch_size = 32, learning_rate = 1e-3))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    mode: &str,
    table: PyRef<'_, PyTrainingTable>,
    hists: &Bound<'py, PyDict>,
    seed: u64,
    max_epochs: usize,
    patience: usize,
    batch_size: usize,
    learning_rate: f64,
) -> PyResult<(PyModel, Vec<Bound<'py, PyDict>>)> {
    let mode = parse_mode(mode)?;
    let grids = histogram_map(hists)?;
    let h = grids
        .values()
        .next()
        .map(|g| g.h())
        .ok_or_else(|| PyValueError::new_err("no histograms given"))?;
    let mut config = TrainConfig {
        batch_size,
        max_epochs,
        patience,
        seed: Seed(seed),
        ..TrainConfig::default()
    };
    config.adam.learning_rate = learning_rate;
    let rows = table.inner.rows.clone();
    let (model, history) = py
        .detach(|| {
            predictor::train(predictor::build_network(mode, h, Seed(seed))?, &rows, &grids, &config)
        })
        .py()?;
    let epochs = history
        .epochs
        .iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("epoch", e.epoch)?;
            d.set_item("train_mape", e.train_mape)?;
            d.set_item("validation_mape", e.validation_mape)?;
            d.set_item("best_validation_mape", e.best_validation_mape)?;
            d.set_item("elapsed_seconds", e.elapsed_seconds)?;
            Ok(d)
        })
        .collect::<PyResult<_>>()?;
    Ok((PyModel { inner: model }, epochs))
}

/// MAPE of a `Model` or `LinearBaseline` on a table.
#[pyfunction]
#[pyo3(signature = (model, table, hists = None))]
fn evaluate_mape(
    model: &Bound<'_, PyAny>,
    table: PyRef<'_, PyTrainingTable>,
    hists: Option<&Bound<'_, PyDict>>,
) -> PyResult<f64> {
    let grids = match hists {
        Some(h) => histogram_map(h)?,
        None => HashMap::new(),
    };
    if let Ok(m) = model.extract::<PyRef<'_, PyModel>>() {
        return pipeline::evaluate_mape(&m.inner, &table.inner.rows, &grids).py();
    }
    let lr: PyRef<'_, PyLinearBaseline> = model.extract()?;
    pipeline::evaluate_mape(&lr.inner, &table.inner.rows, &grids).py()
}

/// Runs `relationship`, `distribution-count` or `histogram-resolution` and
/// writes its CSVs into `out_dir`; returns the written paths.
#[pyfunction]
fn run_experiment(py: Python<'_>, kind: &str, config: PyRef<'_, PyConfig>, out_dir: &str) -> PyResult<Vec<String>> {
    let config = config.inner.clone();
    let artifacts = py
        .detach(|| -> aqp_core::Result<Vec<pipeline::CsvArtifact>> {
            Ok(match kind {
                "relationship" => vec![experiment_relationship(&config)?.artifact],
                "distribution-count" => vec![experiment_distribution_count(&build_corpus(&config)?)?.artifact],
                "histogram-resolution" => {
                    let r = experiment_histogram_resolution(&build_corpus(&config)?)?;
                    vec![r.artifact, r.timing]
                }
                other => return Err(Error::InvalidArgument(format!("unknown experiment `{other}`"))),
            })
        })
        .py()?;
    artifacts
        .iter()
        .map(|a| Ok(a.write_to(out_dir).py()?.display().to_string()))
        .collect()
}

#[pymodule]
fn aqp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointSet>()?;
    m.add_class::<PyHistogram>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTrainingTable>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyLinearBaseline>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(ground_truth, m)?)?;
    m.add_function(wrap_pyfunction!(measure_mean_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(build_table, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_mape, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
