//! Training corpora, splits, evaluation, and the three experiments.
//!
//! Every experiment artifact is a CSV whose first line is
//! `# config-hash=<sha256 hex>` followed by a header row.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::datagen::{generate, DistributionSpec, Family};
use crate::error::{Error, Result};
use crate::geometry::PointSet;
use crate::histogram::{build_histogram, HistogramGrid};
use crate::io::write_string_atomic;
use crate::predictor::{build_network, lr_fit, train, Mode, Model, Predictor, TrainingHistory};
use crate::rng::{str_tag, Seed, SeededRng};
use crate::selectivity::IndexedPointSet;

/// One measured (dataset, sigma, q) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub dataset_id: String,
    pub distribution: String,
    pub n: usize,
    pub q: f64,
    pub sigma: f64,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: Seed,
    /// Cells dropped because every query was empty.
    pub skipped: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingTable {
    pub rows: Vec<TrainingExample>,
    pub provenance: Provenance,
}

const TABLE_HEADER: [&str; 6] = ["dataset_id", "distribution", "n", "q", "sigma", "mean_accuracy"];

impl TrainingTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn with_rows(&self, rows: Vec<TrainingExample>) -> Self {
        Self {
            rows,
            provenance: self.provenance.clone(),
        }
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let p = &self.provenance;
        let mut out = format!(
            "# config-hash={}\n# seed={}\n# skipped={}\n",
            p.config_hash, p.seed, p.skipped
        );
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(TABLE_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.dataset_id.clone(),
                r.distribution.clone(),
                r.n.to_string(),
                r.q.to_string(),
                r.sigma.to_string(),
                r.mean_accuracy.to_string(),
            ])?;
        }
        out.push_str(&csv_body(w)?);
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_string_atomic(path.as_ref(), &self.to_csv_string()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut provenance = Provenance::default();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let Some(comment) = line.strip_prefix('#') else { break };
            let Some((k, v)) = comment.trim().split_once('=') else { continue };
            let bad = || Error::parse(path, format!("bad provenance line `{line}`"));
            match k {
                "config-hash" => provenance.config_hash = v.to_string(),
                "seed" => provenance.seed = Seed(v.parse().map_err(|_| bad())?),
                "skipped" => provenance.skipped = v.parse().map_err(|_| bad())?,
                _ => {}
            }
        }
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| Error::parse(path, e.to_string()))?;
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<TrainingExample>, _>>()
            .map_err(|e| Error::parse(path, e.to_string()))?;
        Ok(Self { rows, provenance })
    }
}

fn csv_body(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// A generated dataset of the corpus.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: String,
    pub spec: DistributionSpec,
    pub points: PointSet,
}

impl Dataset {
    pub fn family(&self) -> Family {
        self.spec.family()
    }
}

/// Generates `specs` in parallel; dataset `i` is seeded by `seed.derive([i])`.
pub fn generate_datasets(
    prefix: &str,
    specs: &[DistributionSpec],
    n: usize,
    seed: Seed,
) -> Result<Vec<Dataset>> {
    specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            Ok(Dataset {
                id: format!("{prefix}{}-{i:02}", spec.family().name()),
                spec: spec.clone(),
                points: generate(spec, n, seed.derive(&[i as u64]))?,
            })
        })
        .collect()
}

/// One row per (dataset, sigma, q) with its measured mean accuracy. The
/// workload seed of a cell depends on the dataset and q but not on sigma,
/// so a curve over sigma reuses the same queries and draw streams.
pub fn build_training_table(
    datasets: &[Dataset],
    sigmas: &[f64],
    qs: &[f64],
    m: usize,
    r: usize,
    seed: Seed,
) -> Result<TrainingTable> {
    if datasets.is_empty() || sigmas.is_empty() || qs.is_empty() {
        return Err(Error::InvalidArgument("empty dataset, sigma or q grid".into()));
    }
    if let Some(v) = sigmas.iter().chain(qs).find(|v| !(**v > 0.0 && **v <= 1.0)) {
        return Err(Error::InvalidArgument(format!("grid value {v} outside (0,1]")));
    }
    let indexed: Vec<IndexedPointSet> = datasets
        .par_iter()
        .map(|d| IndexedPointSet::new(d.points.clone()))
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, usize, usize)> = (0..datasets.len())
        .flat_map(|d| (0..qs.len()).flat_map(move |qi| (0..sigmas.len()).map(move |si| (d, qi, si))))
        .collect();
    let measured: Vec<Option<TrainingExample>> = cells
        .par_iter()
        .map(|&(d, qi, si)| {
            let cell_seed = seed.derive(&[d as u64, qi as u64]);
            match indexed[d].mean_accuracy(sigmas[si], qs[qi], m, r, cell_seed) {
                Ok(acc) => Ok(Some(TrainingExample {
                    dataset_id: datasets[d].id.clone(),
                    distribution: datasets[d].family().name().to_string(),
                    n: datasets[d].points.len(),
                    q: qs[qi],
                    sigma: sigmas[si],
                    mean_accuracy: acc,
                })),
                Err(Error::NoNonemptyQueries) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let skipped = measured.iter().filter(|r| r.is_none()).count();
    let rows: Vec<TrainingExample> = measured.into_iter().flatten().collect();
    let accuracy_is_zero = |r: &TrainingExample| !(r.mean_accuracy > 0.0);
    let zero = rows.iter().filter(|r| accuracy_is_zero(r)).count();
    Ok(TrainingTable {
        rows: rows.into_iter().filter(|r| !accuracy_is_zero(r)).collect(),
        provenance: Provenance {
            config_hash: String::new(),
            seed,
            skipped: skipped + zero,
        },
    })
}

/// Seeded row-level shuffle split; the first part has `round(fraction * N)` rows.
pub fn split(table: &TrainingTable, train_fraction: f64, seed: Seed) -> Result<(TrainingTable, TrainingTable)> {
    check_split(table, train_fraction)?;
    let mut order: Vec<usize> = (0..table.len()).collect();
    SeededRng::new(seed).shuffle(&mut order);
    let cut = (train_fraction * table.len() as f64).round() as usize;
    let pick = |idx: &[usize]| table.with_rows(idx.iter().map(|&i| table.rows[i].clone()).collect());
    Ok((pick(&order[..cut]), pick(&order[cut..])))
}

/// Seeded split of whole datasets: no dataset contributes rows to both parts.
pub fn split_by_dataset(
    table: &TrainingTable,
    train_fraction: f64,
    seed: Seed,
) -> Result<(TrainingTable, TrainingTable)> {
    check_split(table, train_fraction)?;
    let mut ids: Vec<&str> = Vec::new();
    for r in &table.rows {
        if !ids.contains(&r.dataset_id.as_str()) {
            ids.push(&r.dataset_id);
        }
    }
    if ids.len() < 2 {
        return Err(Error::InvalidArgument("dataset-level split needs at least 2 datasets".into()));
    }
    SeededRng::new(seed).shuffle(&mut ids);
    let cut = ((train_fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let train_ids: HashSet<&str> = ids[..cut].iter().copied().collect();
    let (train, test): (Vec<_>, Vec<_>) = table
        .rows
        .iter()
        .cloned()
        .partition(|r| train_ids.contains(r.dataset_id.as_str()));
    Ok((table.with_rows(train), table.with_rows(test)))
}

fn check_split(table: &TrainingTable, fraction: f64) -> Result<()> {
    if table.len() < 2 {
        return Err(Error::InvalidArgument("cannot split a table with fewer than 2 rows".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction {fraction} outside (0,1)")));
    }
    Ok(())
}

/// Mean of `|actual - predicted| / actual` over `rows`, where `actual` is the
/// predictor's mode target.
pub fn evaluate_mape(
    model: &dyn Predictor,
    rows: &[TrainingExample],
    hists: &HashMap<String, HistogramGrid>,
) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty table".into()));
    }
    let mode = model.mode();
    let mut total = 0.0;
    for row in rows {
        let hist = match hists.get(&row.dataset_id) {
            Some(h) => Some(h),
            None if model.needs_histogram() => {
                return Err(Error::MissingHistogram(row.dataset_id.clone()))
            }
            None => None,
        };
        let actual = mode.target(row);
        if !(actual > 0.0) {
            return Err(Error::ZeroTarget);
        }
        let predicted = model.predict_features(&mode.features(row), hist)?;
        total += (actual - predicted).abs() / actual;
    }
    Ok(total / rows.len() as f64)
}

pub fn histograms(datasets: &[Dataset], h: usize) -> Result<HashMap<String, HistogramGrid>> {
    datasets
        .par_iter()
        .map(|d| Ok((d.id.clone(), build_histogram(&d.points, h)?)))
        .collect()
}

/// Named CSV output of an experiment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvArtifact {
    pub file_name: String,
    pub contents: String,
}

impl CsvArtifact {
    fn new(file_name: &str, config_hash: &str, header: &[&str], rows: &[Vec<String>]) -> Result<Self> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let mut contents = String::new();
        writeln!(contents, "# config-hash={config_hash}").expect("string write");
        contents.push_str(&csv_body(w)?);
        Ok(Self {
            file_name: file_name.to_string(),
            contents,
        })
    }

    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(&self.file_name);
        write_string_atomic(&path, &self.contents)?;
        Ok(path)
    }
}

/// The generated datasets and measured table a config describes.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: Config,
    pub datasets: Vec<Dataset>,
    pub table: TrainingTable,
}

const TAG_CORPUS: &str = "corpus";
const TAG_CELLS: &str = "cells";
const TAG_RELATIONSHIP: &str = "relationship";
const TAG_SPLIT: &str = "split";
const TAG_FAMILY_ORDER: &str = "family-order";
const TAG_DISTRIBUTION_COUNT: &str = "distribution-count";
const TAG_RESOLUTION: &str = "histogram-resolution";

fn tagged(config: &Config, tag: &str) -> Seed {
    config.master_seed().derive(&[str_tag(tag)])
}

pub fn build_corpus(config: &Config) -> Result<Corpus> {
    config.validate()?;
    let datasets = generate_datasets("", &config.data.datasets, config.data.n, tagged(config, TAG_CORPUS))?;
    let g = &config.grid;
    let mut table = build_training_table(&datasets, &g.sigmas, &g.qs, g.queries, g.draws, tagged(config, TAG_CELLS))?;
    table.provenance.config_hash = config.hash();
    table.provenance.seed = config.master_seed();
    Ok(Corpus {
        config: config.clone(),
        datasets,
        table,
    })
}

impl Corpus {
    /// The train/test split every model experiment evaluates on.
    pub fn split(&self) -> Result<(TrainingTable, TrainingTable)> {
        let t = &self.config.training;
        let seed = tagged(&self.config, TAG_SPLIT);
        if t.dataset_split {
            split_by_dataset(&self.table, t.train_fraction, seed)
        } else {
            split(&self.table, t.train_fraction, seed)
        }
    }

    /// Families in first-appearance order, then shuffled by the master seed.
    pub fn family_order(&self) -> Vec<Family> {
        let mut families: Vec<Family> = Vec::new();
        for d in &self.datasets {
            if !families.contains(&d.family()) {
                families.push(d.family());
            }
        }
        SeededRng::new(tagged(&self.config, TAG_FAMILY_ORDER)).shuffle(&mut families);
        families
    }
}

/// One sigma/accuracy point of a relationship curve.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationshipPoint {
    pub dataset_id: String,
    pub distribution: String,
    pub spec: String,
    pub q: f64,
    pub sigma: f64,
    pub mean_accuracy: f64,
}

pub struct RelationshipResult {
    pub points: Vec<RelationshipPoint>,
    pub artifact: CsvArtifact,
}

/// Mean accuracy over the sigma x q grid for each relationship dataset.
pub fn experiment_relationship(config: &Config) -> Result<RelationshipResult> {
    config.validate()?;
    let seed = tagged(config, TAG_RELATIONSHIP);
    let datasets = generate_datasets("relationship-", &config.relationship.datasets, config.data.n, seed.derive(&[0]))?;
    let g = &config.grid;
    let table = build_training_table(&datasets, &g.sigmas, &g.qs, g.queries, g.draws, seed.derive(&[1]))?;
    let specs: HashMap<&str, String> = datasets.iter().map(|d| (d.id.as_str(), d.spec.to_string())).collect();
    let points: Vec<RelationshipPoint> = table
        .rows
        .iter()
        .map(|r| RelationshipPoint {
            dataset_id: r.dataset_id.clone(),
            distribution: r.distribution.clone(),
            spec: specs[r.dataset_id.as_str()].clone(),
            q: r.q,
            sigma: r.sigma,
            mean_accuracy: r.mean_accuracy,
        })
        .collect();
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                p.dataset_id.clone(),
                p.distribution.clone(),
                p.spec.clone(),
                p.q.to_string(),
                p.sigma.to_string(),
                p.mean_accuracy.to_string(),
            ]
        })
        .collect();
    let artifact = CsvArtifact::new(
        "relationship.csv",
        &config.hash(),
        &["dataset_id", "distribution", "spec", "q", "sigma", "mean_accuracy"],
        &rows,
    )?;
    Ok(RelationshipResult { points, artifact })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    DeepSampling,
    LinearRegression,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::DeepSampling => "DS",
            ModelKind::LinearRegression => "LR",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionCountRecord {
    pub k: usize,
    pub families: Vec<Family>,
    pub model: ModelKind,
    pub mode: Mode,
    pub train_rows: usize,
    pub test_rows: usize,
    pub mape: f64,
}

pub struct DistributionCountResult {
    pub records: Vec<DistributionCountRecord>,
    pub artifact: CsvArtifact,
    /// DS models trained on all `K` families, accuracy mode first.
    pub final_models: Vec<Model>,
}

impl DistributionCountResult {
    pub fn mape(&self, k: usize, model: ModelKind, mode: Mode) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.k == k && r.model == model && r.mode == mode)
            .map(|r| r.mape)
    }
}

/// Trains DS and LR on the training rows of the first `k` families for
/// `k = 1..=K` and evaluates each on the full test partition.
pub fn experiment_distribution_count(corpus: &Corpus) -> Result<DistributionCountResult> {
    let config = &corpus.config;
    let order = corpus.family_order();
    if order.len() < 2 {
        return Err(Error::InvalidArgument("distribution-count needs at least 2 families".into()));
    }
    let max_k = match config.distribution_count.max_families {
        0 => order.len(),
        k => k.min(order.len()),
    };
    let (train_part, test_part) = corpus.split()?;
    let h = config.training.h;
    let hists = histograms(&corpus.datasets, h)?;
    let family_of: HashMap<&str, Family> = corpus.datasets.iter().map(|d| (d.id.as_str(), d.family())).collect();

    let mut records = Vec::new();
    let mut final_models = Vec::new();
    for k in 1..=max_k {
        let families = &order[..k];
        let rows: Vec<TrainingExample> = train_part
            .rows
            .iter()
            .filter(|r| families.contains(&family_of[r.dataset_id.as_str()]))
            .cloned()
            .collect();
        for (mi, mode) in [Mode::AccuracyPrediction, Mode::RatioEstimation].into_iter().enumerate() {
            let seed = tagged(config, TAG_DISTRIBUTION_COUNT).derive(&[k as u64, mi as u64]);
            let (model, _) = train(
                build_network(mode, h, seed)?,
                &rows,
                &hists,
                &config.training.train_config(seed),
            )?;
            let lr = lr_fit(mode, &rows)?;
            for (kind, predictor) in [
                (ModelKind::DeepSampling, &model as &dyn Predictor),
                (ModelKind::LinearRegression, &lr as &dyn Predictor),
            ] {
                records.push(DistributionCountRecord {
                    k,
                    families: families.to_vec(),
                    model: kind,
                    mode,
                    train_rows: rows.len(),
                    test_rows: test_part.len(),
                    mape: evaluate_mape(predictor, &test_part.rows, &hists)?,
                });
            }
            if k == max_k {
                final_models.push(model);
            }
        }
    }
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.k.to_string(),
                r.families.iter().map(|f| f.name()).collect::<Vec<_>>().join("+"),
                r.model.name().to_string(),
                r.mode.name().to_string(),
                r.train_rows.to_string(),
                r.test_rows.to_string(),
                r.mape.to_string(),
            ]
        })
        .collect();
    let artifact = CsvArtifact::new(
        "distribution_count.csv",
        &config.hash(),
        &["k", "families", "model", "problem", "train_rows", "test_rows", "mape"],
        &rows,
    )?;
    Ok(DistributionCountResult {
        records,
        artifact,
        final_models,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionRecord {
    pub h: usize,
    pub test_mape: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub training_seconds: f64,
}

pub struct HistogramResolutionResult {
    pub records: Vec<ResolutionRecord>,
    /// Seeded outcomes only; byte-identical across reruns.
    pub artifact: CsvArtifact,
    /// Wall-clock training time per `h`.
    pub timing: CsvArtifact,
}

impl HistogramResolutionResult {
    pub fn record(&self, h: usize) -> Option<&ResolutionRecord> {
        self.records.iter().find(|r| r.h == h)
    }
}

/// Trains an accuracy model per histogram size on the same split.
pub fn experiment_histogram_resolution(corpus: &Corpus) -> Result<HistogramResolutionResult> {
    let config = &corpus.config;
    let (train_part, test_part) = corpus.split()?;
    let mut records = Vec::new();
    for &h in &config.histogram_resolution.sizes {
        let hists = histograms(&corpus.datasets, h)?;
        let seed = tagged(config, TAG_RESOLUTION).derive(&[h as u64]);
        let (model, history): (Model, TrainingHistory) = train(
            build_network(Mode::AccuracyPrediction, h, seed)?,
            &train_part.rows,
            &hists,
            &config.training.train_config(seed),
        )?;
        records.push(ResolutionRecord {
            h,
            test_mape: evaluate_mape(&model, &test_part.rows, &hists)?,
            epochs: history.epochs.len(),
            best_epoch: history.best_epoch,
            training_seconds: history.seconds,
        });
    }
    let hash = config.hash();
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.h.to_string(),
                r.test_mape.to_string(),
                r.epochs.to_string(),
                r.best_epoch.to_string(),
            ]
        })
        .collect();
    let artifact = CsvArtifact::new(
        "histogram_resolution.csv",
        &hash,
        &["h", "test_mape", "epochs", "best_epoch"],
        &rows,
    )?;
    let timing_rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| vec![r.h.to_string(), r.training_seconds.to_string()])
        .collect();
    let timing = CsvArtifact::new(
        "histogram_resolution_timing.csv",
        &hash,
        &["h", "training_seconds"],
        &timing_rows,
    )?;
    Ok(HistogramResolutionResult {
        records,
        artifact,
        timing,
    })
}
