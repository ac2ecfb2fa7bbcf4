//! The dual-branch accuracy / sampling-ratio model and its linear baseline.
//!
//! Both modes share one architecture. A tabular branch reads the query size
//! `q` and a driver (`log10(sigma)` when predicting accuracy, the target
//! accuracy `alpha` when estimating a ratio); a histogram branch reads the
//! dataset's `h x h` frequency grid; a dense head maps the concatenation to
//! a single linear unit.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::histogram::{HistogramGrid, SUPPORTED_SIZES};
use crate::io::write_string_atomic;
use crate::nn::{mape_loss, AdamConfig, Gradients, LayerSpec, Network, OptimizerState, Tensor};
use crate::pipeline::TrainingExample;
use crate::rng::{Seed, SeededRng};

pub const MIN_RATIO: f64 = 1e-5;
pub const MAX_RATIO: f64 = 1.0;

const TABULAR_WIDTH: usize = 32;
const SMALL_HIST_WIDTH: usize = 32;
/// Smallest `h` that gets the convolutional histogram branch.
const CONV_MIN_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "accuracy")]
    AccuracyPrediction,
    #[serde(rename = "ratio")]
    RatioEstimation,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::AccuracyPrediction => "accuracy",
            Mode::RatioEstimation => "ratio",
        }
    }

    /// Features for a training row under this mode.
    pub fn features(self, row: &TrainingExample) -> TabularFeatures {
        match self {
            Mode::AccuracyPrediction => TabularFeatures {
                q: row.q,
                driver: row.sigma.log10(),
            },
            Mode::RatioEstimation => TabularFeatures {
                q: row.q,
                driver: row.mean_accuracy,
            },
        }
    }

    /// The column this mode regresses.
    pub fn target(self, row: &TrainingExample) -> f64 {
        match self {
            Mode::AccuracyPrediction => row.mean_accuracy,
            Mode::RatioEstimation => row.sigma,
        }
    }

    /// The target in the space the network regresses: `alpha`, or `log10(sigma)`.
    fn raw_target(self, row: &TrainingExample) -> f64 {
        match self {
            Mode::AccuracyPrediction => row.mean_accuracy,
            Mode::RatioEstimation => row.sigma.log10(),
        }
    }

    /// Clamps a prediction into the mode's valid output range; NaN maps to
    /// the lower bound.
    pub fn clamp(self, v: f64) -> f64 {
        let (lo, hi) = match self {
            Mode::AccuracyPrediction => (0.0, 1.0),
            Mode::RatioEstimation => (MIN_RATIO, MAX_RATIO),
        };
        if v.is_nan() {
            lo
        } else {
            v.clamp(lo, hi)
        }
    }

    /// Raw network output to prediction.
    pub fn transform(self, raw: f64) -> f64 {
        match self {
            Mode::AccuracyPrediction => self.clamp(raw),
            Mode::RatioEstimation => self.clamp(10f64.powf(raw)),
        }
    }

    /// Training-time transform: the clamped prediction and a straight-through
    /// derivative, so rows clamped at a bound still receive a gradient.
    fn training_transform(self, raw: f64) -> (f64, f64) {
        let pred = self.transform(raw);
        match self {
            Mode::AccuracyPrediction => (pred, 1.0),
            Mode::RatioEstimation => (pred, std::f64::consts::LN_10 * pred),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" | "accuracy-prediction" => Ok(Mode::AccuracyPrediction),
            "ratio" | "ratio-estimation" => Ok(Mode::RatioEstimation),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mode `{s}` (expected accuracy or ratio)"
            ))),
        }
    }
}

/// Tabular model input: query size and the mode's driver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TabularFeatures {
    pub q: f64,
    pub driver: f64,
}

impl TabularFeatures {
    pub fn for_accuracy(q: f64, sigma: f64) -> Result<Self> {
        unit_open("q", q)?;
        unit_open("sigma", sigma)?;
        Ok(Self {
            q,
            driver: sigma.log10(),
        })
    }

    pub fn for_ratio(q: f64, alpha: f64) -> Result<Self> {
        unit_open("q", q)?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("alpha={alpha} outside [0,1]")));
        }
        Ok(Self { q, driver: alpha })
    }

    fn validate(&self, mode: Mode) -> Result<()> {
        unit_open("q", self.q)?;
        let ok = match mode {
            Mode::AccuracyPrediction => self.driver.is_finite() && self.driver <= 0.0,
            Mode::RatioEstimation => (0.0..=1.0).contains(&self.driver),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "driver {} invalid for {mode} mode",
                self.driver
            )))
        }
    }
}

fn unit_open(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name}={v} outside (0,1]")))
    }
}

/// Affine input normalization stored with the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub q_mean: f64,
    pub q_std: f64,
    pub driver_mean: f64,
    pub driver_std: f64,
    /// Histogram cell `v` enters the network as `ln(1 + histogram_scale * v)`;
    /// the scale is `h^2`, so a uniform grid reads `ln 2` at every `h`.
    pub histogram_scale: f64,
    /// Raw output is `output_mean + output_std * network output`.
    pub output_mean: f64,
    pub output_std: f64,
}

impl FeatureScaling {
    fn identity(h: usize) -> Self {
        Self {
            q_mean: 0.0,
            q_std: 1.0,
            driver_mean: 0.0,
            driver_std: 1.0,
            histogram_scale: (h * h) as f64,
            output_mean: 0.0,
            output_std: 1.0,
        }
    }

    fn fit(features: &[TabularFeatures], raw_targets: &[f64], h: usize) -> Self {
        let stats = |xs: Vec<f64>| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            (mean, if std > 1e-12 { std } else { 1.0 })
        };
        let (q_mean, q_std) = stats(features.iter().map(|f| f.q).collect());
        let (driver_mean, driver_std) = stats(features.iter().map(|f| f.driver).collect());
        let (output_mean, output_std) = stats(raw_targets.to_vec());
        Self {
            q_mean,
            q_std,
            driver_mean,
            driver_std,
            histogram_scale: (h * h) as f64,
            output_mean,
            output_std,
        }
    }

    fn output(&self, network_output: f64) -> f64 {
        self.output_mean + self.output_std * network_output
    }

    fn tabular(&self, f: &TabularFeatures) -> Tensor {
        Tensor::vector(vec![
            (f.q - self.q_mean) / self.q_std,
            (f.driver - self.driver_mean) / self.driver_std,
        ])
    }

    fn histogram(&self, grid: &HistogramGrid) -> Tensor {
        let h = grid.h();
        let data = grid
            .values()
            .iter()
            .map(|v| (v * self.histogram_scale).ln_1p())
            .collect();
        Tensor::new(vec![h, h], data).expect("h*h values")
    }
}

/// Training hyperparameters, recorded in the model file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub patience: usize,
    pub max_epochs: usize,
    pub validation_fraction: f64,
    pub min_improvement: f64,
    pub seed: Seed,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            adam: AdamConfig::default(),
            patience: 20,
            max_epochs: 500,
            validation_fraction: 0.2,
            min_improvement: 1e-4,
            seed: Seed(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mape: f64,
    pub validation_mape: f64,
    pub best_validation_mape: f64,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub seconds: f64,
}

impl TrainingHistory {
    pub fn final_train_mape(&self) -> f64 {
        self.epochs.get(self.best_epoch).map_or(f64::NAN, |e| e.train_mape)
    }

    pub fn final_validation_mape(&self) -> f64 {
        self.epochs.get(self.best_epoch).map_or(f64::NAN, |e| e.validation_mape)
    }
}

const MODEL_FORMAT: &str = "aqp-dual-branch-model";
const MODEL_VERSION: u32 = 1;

/// A dual-branch network together with its mode, histogram size, input
/// scaling and training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub format: String,
    pub version: u32,
    pub mode: Mode,
    pub h: usize,
    pub scaling: FeatureScaling,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainConfig>,
    pub network: Network,
}

/// Fresh seeded model for `mode` at histogram resolution `h`.
pub fn build_network(mode: Mode, h: usize, seed: Seed) -> Result<Model> {
    if !SUPPORTED_SIZES.contains(&h) {
        return Err(Error::InvalidArgument(format!(
            "unsupported histogram size h={h} (expected one of {SUPPORTED_SIZES:?})"
        )));
    }
    let tabular = [
        LayerSpec::Dense { inputs: 2, outputs: TABULAR_WIDTH },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: TABULAR_WIDTH, outputs: TABULAR_WIDTH },
        LayerSpec::Relu,
    ];
    let (histogram, hist_width) = histogram_branch(h);
    let head = [
        LayerSpec::Dense { inputs: TABULAR_WIDTH + hist_width, outputs: 64 },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: 64, outputs: 32 },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: 32, outputs: 1 },
    ];
    let network = Network::new(seed, 2, h, &tabular, &histogram, &head)?;
    Ok(Model {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        mode,
        h,
        scaling: FeatureScaling::identity(h),
        training: None,
        network,
    })
}

/// Histogram-branch layers and their output width. A 2x2 pool is skipped
/// when the feature map is already narrower than 2.
fn histogram_branch(h: usize) -> (Vec<LayerSpec>, usize) {
    if h < CONV_MIN_SIDE {
        return (
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: h * h, outputs: SMALL_HIST_WIDTH },
                LayerSpec::Relu,
            ],
            SMALL_HIST_WIDTH,
        );
    }
    let mut layers = Vec::new();
    let mut side = h;
    for (cin, cout) in [(1, 8), (8, 16)] {
        layers.push(LayerSpec::Conv2d { in_channels: cin, out_channels: cout });
        layers.push(LayerSpec::Relu);
        side -= 2;
        if side >= 2 {
            layers.push(LayerSpec::MaxPool2x2);
            side /= 2;
        }
    }
    layers.push(LayerSpec::Flatten);
    (layers, side * side * 16)
}

impl Model {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_string_atomic(path.as_ref(), &text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Model = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        if model.format != MODEL_FORMAT || model.version != MODEL_VERSION {
            return Err(Error::parse(path, format!("unsupported model format {} v{}", model.format, model.version)));
        }
        if model.network.histogram_side != model.h {
            return Err(Error::parse(path, "network histogram size disagrees with h"));
        }
        Ok(model)
    }

    fn check_hist(&self, hist: &HistogramGrid) -> Result<()> {
        if hist.h() != self.h {
            return Err(Error::HistogramMismatch { expected: self.h, actual: hist.h() });
        }
        Ok(())
    }

    /// Raw output before the mode transform.
    pub fn raw_output(&self, features: &TabularFeatures, hist: &HistogramGrid) -> Result<f64> {
        self.check_hist(hist)?;
        let out = self
            .network
            .output(&self.scaling.tabular(features), &self.scaling.histogram(hist))?;
        Ok(self.scaling.output(out))
    }

    /// Accuracy in `[0, 1]` or sampling ratio in `[1e-5, 1]`, by mode.
    pub fn predict(&self, features: &TabularFeatures, hist: &HistogramGrid) -> Result<f64> {
        features.validate(self.mode)?;
        Ok(self.mode.transform(self.raw_output(features, hist)?))
    }
}

pub fn predict(model: &Model, features: &TabularFeatures, hist: &HistogramGrid) -> Result<f64> {
    model.predict(features, hist)
}

/// Sampling ratio the ratio-mode model recommends for accuracy `alpha`.
pub fn estimate_sampling_ratio(model: &Model, q: f64, alpha: f64, hist: &HistogramGrid) -> Result<f64> {
    if model.mode != Mode::RatioEstimation {
        return Err(Error::InvalidArgument("model is not in ratio mode".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha={alpha} outside (0,1]")));
    }
    model.predict(&TabularFeatures::for_ratio(q, alpha)?, hist)
}

/// One training row resolved against its histogram.
struct Prepared {
    tabular: Tensor,
    dataset: usize,
    target: f64,
}

struct PreparedSet {
    rows: Vec<Prepared>,
    hists: Vec<Tensor>,
}

fn prepare(
    model: &Model,
    rows: &[&TrainingExample],
    hists: &HashMap<String, HistogramGrid>,
) -> Result<PreparedSet> {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    let mut tensors = Vec::new();
    let mut prepared = Vec::with_capacity(rows.len());
    for row in rows {
        let target = model.mode.target(row);
        if !(target > 0.0) {
            return Err(Error::ZeroTarget);
        }
        let dataset = match ids.get(row.dataset_id.as_str()) {
            Some(&i) => i,
            None => {
                let grid = hists
                    .get(&row.dataset_id)
                    .ok_or_else(|| Error::MissingHistogram(row.dataset_id.clone()))?;
                model.check_hist(grid)?;
                tensors.push(model.scaling.histogram(grid));
                ids.insert(&row.dataset_id, tensors.len() - 1);
                tensors.len() - 1
            }
        };
        prepared.push(Prepared {
            tabular: model.scaling.tabular(&model.mode.features(row)),
            dataset,
            target,
        });
    }
    Ok(PreparedSet { rows: prepared, hists: tensors })
}

/// Clamped-prediction MAPE over `subset`, sharing histogram-branch passes.
fn evaluate_prepared(model: &Model, set: &PreparedSet, subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Ok(f64::NAN);
    }
    let mut features: Vec<Option<Tensor>> = vec![None; set.hists.len()];
    let mut total = 0.0;
    for &i in subset {
        let row = &set.rows[i];
        let f = match &features[row.dataset] {
            Some(f) => f.clone(),
            None => {
                let f = model.network.forward_histogram(&set.hists[row.dataset])?.0;
                features[row.dataset] = Some(f.clone());
                f
            }
        };
        let raw = model.scaling.output(model.network.forward_tail(&row.tabular, &f)?.0);
        let pred = model.mode.transform(raw);
        total += (row.target - pred).abs() / row.target;
    }
    Ok(total / subset.len() as f64)
}

/// Mini-batch MAPE gradient; rows sharing a histogram share one
/// histogram-branch forward/backward pass.
fn batch_gradients(model: &Model, set: &PreparedSet, batch: &[usize]) -> Result<(f64, Gradients)> {
    let net = &model.network;
    let mut grads = net.zero_gradients();
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for &i in batch {
        let d = set.rows[i].dataset;
        match groups.iter_mut().find(|(g, _)| *g == d) {
            Some((_, members)) => members.push(i),
            None => groups.push((d, vec![i])),
        }
    }
    let n = batch.len();
    let mut loss = 0.0;
    for (dataset, members) in groups {
        let (features, hist_caches) = net.forward_histogram(&set.hists[dataset])?;
        let mut feature_grad = features.zeros_like();
        for i in members {
            let row = &set.rows[i];
            let (out, cache) = net.forward_tail(&row.tabular, &features)?;
            let (pred, dpred) = model.mode.training_transform(model.scaling.output(out));
            let (l, g) = mape_loss(&[pred], &[row.target])?;
            loss += l / n as f64;
            let g = g[0] / n as f64 * dpred * model.scaling.output_std;
            feature_grad.add_assign(&net.backward_tail(&cache, g, &mut grads)?);
        }
        net.backward_histogram(&hist_caches, feature_grad, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Trains `model` on `rows` by mini-batch Adam on MAPE with early stopping
/// on a held-back validation fraction. Returns the best-validation weights.
pub fn train(
    mut model: Model,
    rows: &[TrainingExample],
    hists: &HashMap<String, HistogramGrid>,
    config: &TrainConfig,
) -> Result<(Model, TrainingHistory)> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("empty training table".into()));
    }
    if config.batch_size == 0 || config.max_epochs == 0 {
        return Err(Error::InvalidArgument("batch_size and max_epochs must be positive".into()));
    }
    if !(0.0..1.0).contains(&config.validation_fraction) {
        return Err(Error::InvalidArgument(format!(
            "validation_fraction={} outside [0,1)",
            config.validation_fraction
        )));
    }
    let start = Instant::now();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    SeededRng::new(config.seed.derive(&[0])).shuffle(&mut order);
    let n_val = if rows.len() >= 5 && config.validation_fraction > 0.0 {
        ((config.validation_fraction * rows.len() as f64).round() as usize).clamp(1, rows.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);

    let train_features: Vec<TabularFeatures> =
        train_idx.iter().map(|&i| model.mode.features(&rows[i])).collect();
    let raw_targets: Vec<f64> = train_idx.iter().map(|&i| model.mode.raw_target(&rows[i])).collect();
    model.scaling = FeatureScaling::fit(&train_features, &raw_targets, model.h);
    model.training = Some(*config);

    let all: Vec<&TrainingExample> = rows.iter().collect();
    let set = prepare(&model, &all, hists)?;
    let mut train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();

    let mut state = OptimizerState::new(config.adam, model.network.params());
    let mut history = TrainingHistory::default();
    let mut best = (f64::INFINITY, model.network.clone(), 0usize);
    let mut stale_epochs = 0;

    for epoch in 0..config.max_epochs {
        SeededRng::new(config.seed.derive(&[1, epoch as u64])).shuffle(&mut train_idx);
        for batch in train_idx.chunks(config.batch_size) {
            let (_, grads) = batch_gradients(&model, &set, batch)?;
            state.step(model.network.params_mut(), &grads.0);
        }
        let train_mape = evaluate_prepared(&model, &set, &train_idx)?;
        let validation_mape = if val_idx.is_empty() {
            train_mape
        } else {
            evaluate_prepared(&model, &set, &val_idx)?
        };
        if validation_mape < best.0 - config.min_improvement {
            best = (validation_mape, model.network.clone(), epoch);
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_mape,
            validation_mape,
            best_validation_mape: best.0,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        });
        if stale_epochs >= config.patience {
            break;
        }
    }
    model.network = best.1;
    history.best_epoch = best.2;
    history.seconds = start.elapsed().as_secs_f64();
    Ok((model, history))
}

/// Ordinary-least-squares baseline over `[1, q, driver]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LRParams {
    pub mode: Mode,
    pub intercept: f64,
    pub q: f64,
    pub driver: f64,
}

const DEGENERATE_CONDITION: f64 = 1e-10;

pub fn lr_fit(mode: Mode, rows: &[TrainingExample]) -> Result<LRParams> {
    let samples: Vec<(TabularFeatures, f64)> = rows
        .iter()
        .map(|r| (mode.features(r), mode.target(r)))
        .collect();
    lr_fit_samples(mode, &samples)
}

pub fn lr_fit_samples(mode: Mode, samples: &[(TabularFeatures, f64)]) -> Result<LRParams> {
    if samples.len() < 3 {
        return Err(Error::DegenerateTable);
    }
    if samples
        .iter()
        .any(|(f, t)| !(f.q.is_finite() && f.driver.is_finite() && t.is_finite()))
    {
        return Err(Error::InvalidArgument("non-finite regression input".into()));
    }
    let x = DMatrix::from_fn(samples.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => samples[i].0.q,
        _ => samples[i].0.driver,
    });
    let y = DVector::from_iterator(samples.len(), samples.iter().map(|(_, t)| *t));
    let svd = x.svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if !(max_sv > 0.0) || min_sv / max_sv < DEGENERATE_CONDITION {
        return Err(Error::DegenerateTable);
    }
    let beta = svd
        .solve(&y, 0.0)
        .map_err(|e| Error::InvalidArgument(format!("least squares failed: {e}")))?;
    Ok(LRParams {
        mode,
        intercept: beta[0],
        q: beta[1],
        driver: beta[2],
    })
}

pub fn lr_predict(params: &LRParams, features: &TabularFeatures) -> f64 {
    params
        .mode
        .clamp(params.intercept + params.q * features.q + params.driver * features.driver)
}

impl LRParams {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = format!(
            "mode={}\nintercept={}\nq={}\ndriver={}\n",
            self.mode, self.intercept, self.q, self.driver
        );
        write_string_atomic(path.as_ref(), &text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|m| Error::parse(path, m))
    }

    fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut fields: HashMap<&str, &str> = HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| format!("bad line `{line}`"))?;
            fields.insert(k.trim(), v.trim());
        }
        let real = |k: &str| -> std::result::Result<f64, String> {
            fields
                .get(k)
                .ok_or_else(|| format!("missing `{k}`"))?
                .parse()
                .map_err(|_| format!("bad value for `{k}`"))
        };
        let mode = fields
            .get("mode")
            .ok_or("missing `mode`")?
            .parse::<Mode>()
            .map_err(|e| e.to_string())?;
        Ok(Self {
            mode,
            intercept: real("intercept")?,
            q: real("q")?,
            driver: real("driver")?,
        })
    }
}

/// Anything that maps a training row to a prediction of its mode's target.
pub trait Predictor {
    fn mode(&self) -> Mode;

    /// `hist` is `None` only when the dataset has no stored histogram.
    fn predict_features(&self, features: &TabularFeatures, hist: Option<&HistogramGrid>) -> Result<f64>;

    fn needs_histogram(&self) -> bool;
}

impl Predictor for Model {
    fn mode(&self) -> Mode {
        self.mode
    }

    fn predict_features(&self, features: &TabularFeatures, hist: Option<&HistogramGrid>) -> Result<f64> {
        let hist = hist.ok_or_else(|| Error::MissingHistogram(String::new()))?;
        self.predict(features, hist)
    }

    fn needs_histogram(&self) -> bool {
        true
    }
}

impl Predictor for LRParams {
    fn mode(&self) -> Mode {
        self.mode
    }

    fn predict_features(&self, features: &TabularFeatures, _hist: Option<&HistogramGrid>) -> Result<f64> {
        Ok(lr_predict(self, features))
    }

    fn needs_histogram(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn flat_hist(h: usize) -> HistogramGrid {
        HistogramGrid::new(h, BBox::unit(), vec![1.0 / (h * h) as f64; h * h]).unwrap()
    }

    fn row(id: &str, q: f64, sigma: f64, acc: f64) -> TrainingExample {
        TrainingExample {
            dataset_id: id.into(),
            distribution: "uniform".into(),
            n: 1000,
            q,
            sigma,
            mean_accuracy: acc,
        }
    }

    #[test]
    fn histogram_branch_widths() {
        assert_eq!(histogram_branch(16).1, 64);
        assert_eq!(histogram_branch(8).1, 16);
        assert_eq!(histogram_branch(32).1, 576);
        assert_eq!(histogram_branch(64).1, 3136);
        assert_eq!(
            histogram_branch(1).0[1],
            LayerSpec::Dense { inputs: 1, outputs: 32 }
        );
        assert_eq!(histogram_branch(4).1, 32);
    }

    #[test]
    fn build_is_deterministic_and_validates_h() {
        for h in SUPPORTED_SIZES {
            let a = build_network(Mode::AccuracyPrediction, h, Seed(1)).unwrap();
            let b = build_network(Mode::AccuracyPrediction, h, Seed(1)).unwrap();
            assert_eq!(a, b);
            assert!(a.predict(&TabularFeatures::for_accuracy(0.05, 0.01).unwrap(), &flat_hist(h)).is_ok());
        }
        assert!(build_network(Mode::RatioEstimation, 12, Seed(1)).is_err());
    }

    #[test]
    fn zero_weight_predictions() {
        let mut acc = build_network(Mode::AccuracyPrediction, 16, Seed(1)).unwrap();
        acc.network.zero_weights();
        let f = TabularFeatures::for_accuracy(0.05, 0.02).unwrap();
        assert_eq!(acc.predict(&f, &flat_hist(16)).unwrap(), 0.0);

        let mut ratio = build_network(Mode::RatioEstimation, 16, Seed(1)).unwrap();
        ratio.network.zero_weights();
        assert_eq!(estimate_sampling_ratio(&ratio, 0.05, 0.9, &flat_hist(16)).unwrap(), 1.0);
    }

    #[test]
    fn histogram_size_mismatch() {
        let m = build_network(Mode::AccuracyPrediction, 16, Seed(1)).unwrap();
        let f = TabularFeatures::for_accuracy(0.05, 0.02).unwrap();
        let err = m.predict(&f, &flat_hist(8)).unwrap_err();
        assert!(matches!(err, Error::HistogramMismatch { expected: 16, actual: 8 }));
    }

    #[test]
    fn clamps_hold_for_extreme_weights() {
        for mode in [Mode::AccuracyPrediction, Mode::RatioEstimation] {
            let mut m = build_network(mode, 4, Seed(3)).unwrap();
            for scale in [1e6, -1e6] {
                for t in m.network.params_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v = scale);
                }
                let f = match mode {
                    Mode::AccuracyPrediction => TabularFeatures::for_accuracy(0.1, 0.5).unwrap(),
                    Mode::RatioEstimation => TabularFeatures::for_ratio(0.1, 0.5).unwrap(),
                };
                let p = m.predict(&f, &flat_hist(4)).unwrap();
                let (lo, hi) = match mode {
                    Mode::AccuracyPrediction => (0.0, 1.0),
                    Mode::RatioEstimation => (MIN_RATIO, MAX_RATIO),
                };
                assert!(p >= lo && p <= hi, "{mode}: {p}");
            }
        }
    }

    #[test]
    fn model_file_round_trip() {
        let m = build_network(Mode::RatioEstimation, 8, Seed(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back, m);
        let f = TabularFeatures::for_ratio(0.02, 0.8).unwrap();
        let h = flat_hist(8);
        assert_eq!(
            back.predict(&f, &h).unwrap().to_bits(),
            m.predict(&f, &h).unwrap().to_bits()
        );
    }

    #[test]
    fn constant_target_is_learned() {
        let mut rows = Vec::new();
        for (i, q) in [0.01, 0.02, 0.05, 0.1].into_iter().enumerate() {
            for sigma in [0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2] {
                rows.push(row(&format!("d{}", i % 2), q, sigma, 0.9));
            }
        }
        let hists: HashMap<String, HistogramGrid> =
            ["d0", "d1"].iter().map(|id| (id.to_string(), flat_hist(4))).collect();
        let model = build_network(Mode::AccuracyPrediction, 4, Seed(5)).unwrap();
        let config = TrainConfig {
            batch_size: 8,
            adam: AdamConfig { learning_rate: 1e-4, ..AdamConfig::default() },
            max_epochs: 500,
            patience: 100,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        };
        let (trained, history) = train(model.clone(), &rows, &hists, &config).unwrap();
        assert!(history.final_train_mape() < 0.01, "{}", history.final_train_mape());
        let best: Vec<f64> = history.epochs.iter().map(|e| e.best_validation_mape).collect();
        assert!(best.windows(2).all(|w| w[1] <= w[0]));

        let (again, _) = train(model, &rows, &hists, &config).unwrap();
        assert_eq!(again, trained);
    }

    #[test]
    fn training_rejects_bad_inputs() {
        let hists: HashMap<String, HistogramGrid> = [("d".to_string(), flat_hist(4))].into();
        let model = build_network(Mode::AccuracyPrediction, 4, Seed(5)).unwrap();
        let zero = vec![row("d", 0.1, 0.1, 0.0)];
        assert!(matches!(
            train(model.clone(), &zero, &hists, &TrainConfig::default()),
            Err(Error::ZeroTarget)
        ));
        let missing = vec![row("e", 0.1, 0.1, 0.5)];
        assert!(matches!(
            train(model, &missing, &hists, &TrainConfig::default()),
            Err(Error::MissingHistogram(id)) if id == "e"
        ));
    }

    #[test]
    fn lr_recovers_exact_linear_model() {
        let mut rows = Vec::new();
        for q in [0.01, 0.03, 0.07, 0.1] {
            for sigma in [0.01, 0.05, 0.2, 1.0] {
                let acc = 0.2 + 0.3 * q + 0.1 * f64::log10(sigma);
                rows.push(row("d", q, sigma, acc));
            }
        }
        let p = lr_fit(Mode::AccuracyPrediction, &rows).unwrap();
        assert!((p.intercept - 0.2).abs() < 1e-9);
        assert!((p.q - 0.3).abs() < 1e-9);
        assert!((p.driver - 0.1).abs() < 1e-9);
    }

    #[test]
    fn lr_rejects_degenerate_tables() {
        let constant: Vec<TrainingExample> = (0..5).map(|_| row("d", 0.05, 0.01, 0.7)).collect();
        let err = lr_fit(Mode::AccuracyPrediction, &constant).unwrap_err();
        assert_eq!(err.to_string(), "degenerate training table");
        let same_q: Vec<TrainingExample> =
            [0.01, 0.1, 0.2].iter().map(|&s| row("d", 0.05, s, 0.7)).collect();
        assert!(lr_fit(Mode::AccuracyPrediction, &same_q).is_err());
        assert!(lr_fit(Mode::AccuracyPrediction, &constant[..2]).is_err());
    }

    #[test]
    fn lr_predictions_are_clamped() {
        let p = LRParams { mode: Mode::RatioEstimation, intercept: -5.0, q: 0.0, driver: 0.0 };
        assert_eq!(lr_predict(&p, &TabularFeatures { q: 0.1, driver: 0.5 }), MIN_RATIO);
        let p = LRParams { mode: Mode::AccuracyPrediction, intercept: 3.0, q: 0.0, driver: 0.0 };
        assert_eq!(lr_predict(&p, &TabularFeatures { q: 0.1, driver: -2.0 }), 1.0);
    }

    #[test]
    fn lr_file_round_trip() {
        let p = LRParams { mode: Mode::RatioEstimation, intercept: 0.1, q: -2.5, driver: 1.0 / 3.0 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lr.txt");
        p.save(&path).unwrap();
        assert_eq!(LRParams::load(&path).unwrap(), p);
    }
}
