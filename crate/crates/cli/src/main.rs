//! `aqp`: generate datasets, build training corpora, train and query the
//! accuracy / sampling-ratio models, and run the experiments.
//!
//! Exit status is 0 on success, 1 on usage errors and 2 on data or model
//! errors. Diagnostics go to stderr; results go to stdout or files.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aqp_core::config::Config;
use aqp_core::io::write_string_atomic;
use aqp_core::pipeline::{
    build_corpus, evaluate_mape, experiment_distribution_count, experiment_histogram_resolution,
    experiment_relationship, TrainingTable,
};
use aqp_core::predictor::{
    build_network, estimate_sampling_ratio, lr_fit, train, LRParams, Mode, Model, Predictor,
    TabularFeatures,
};
use aqp_core::{build_histogram, generate, DistributionSpec, Error, HistogramGrid, PointSet, Seed};
use clap::{Parser, Subcommand, ValueEnum};

const HIST_EXTENSION: &str = "hist";

#[derive(Parser)]
#[command(name = "aqp", version, about = "Sample-based selectivity estimation with learned accuracy and sampling-ratio prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic point file and its `.meta` sidecar.
    Generate {
        /// Distribution, e.g. `uniform` or `gaussian(sigma=0.1,cx=0.5,cy=0.5)`.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build an h x h frequency histogram of a point file.
    Histogram {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        h: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure the training table of a config and write its histograms.
    BuildTable {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Histogram directory; defaults to `hists/` next to the table.
        #[arg(long)]
        hists: Option<PathBuf>,
    },
    /// Train a model on a training table.
    Train {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        hists: Option<PathBuf>,
        #[arg(long)]
        out_model: PathBuf,
        /// Fit the linear baseline instead of the network.
        #[arg(long)]
        baseline: bool,
        /// Hyperparameters come from this config's `[training]` section.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the predicted mean accuracy for a sampling ratio.
    PredictAccuracy {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        hist: Option<PathBuf>,
    },
    /// Print the sampling ratio recommended for a target accuracy.
    EstimateRatio {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        hist: Option<PathBuf>,
    },
    /// Print a model's MAPE on a training table.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        hists: Option<PathBuf>,
    },
    /// Run an experiment and write its CSV files.
    Experiment {
        #[arg(value_enum)]
        kind: ExperimentKind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Accuracy,
    Ratio,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Accuracy => Mode::AccuracyPrediction,
            ModeArg::Ratio => Mode::RatioEstimation,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentKind {
    Relationship,
    DistributionCount,
    HistogramResolution,
}

enum Loaded {
    Network(Box<Model>),
    Baseline(LRParams),
}

impl Loaded {
    fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if text.trim_start().starts_with('{') {
            Model::load(path).map(|m| Loaded::Network(Box::new(m)))
        } else {
            LRParams::load(path).map(Loaded::Baseline)
        }
    }

    fn predictor(&self) -> &dyn Predictor {
        match self {
            Loaded::Network(m) => m.as_ref(),
            Loaded::Baseline(p) => p,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(message) = configure_threads() {
        eprintln!("error: {message}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("AQP_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| format!("AQP_THREADS={value} is not a positive integer"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

/// Round-trip decimal.
fn number(v: f64) -> String {
    format!("{v:?}")
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Generate { spec, n, seed, out } => {
            let spec: DistributionSpec = spec.parse()?;
            let points = generate(&spec, n, Seed(seed))?;
            points.write(&out)?;
            let meta = format!(
                "family={}\nparams={}\nn={n}\nseed={seed}\n",
                spec.family().name(),
                spec.params_string()
            );
            write_string_atomic(&sidecar(&out), &meta)?;
        }
        Command::Histogram { points, h, out } => {
            let data = PointSet::read(&points)?;
            build_histogram(&data, h)?.write(&out)?;
        }
        Command::BuildTable { config, out, hists } => {
            let config = Config::load(&config)?;
            let corpus = build_corpus(&config)?;
            let dir = hists.unwrap_or_else(|| default_hist_dir(&out));
            for d in &corpus.datasets {
                build_histogram(&d.points, config.training.h)?
                    .write(dir.join(format!("{}.{HIST_EXTENSION}", d.id)))?;
            }
            corpus.table.write(&out)?;
            eprintln!(
                "{} rows ({} cells skipped), {} histograms in {}",
                corpus.table.len(),
                corpus.table.provenance.skipped,
                corpus.datasets.len(),
                dir.display()
            );
        }
        Command::Train {
            mode,
            table,
            hists,
            out_model,
            baseline,
            config,
            seed,
        } => {
            let mode = Mode::from(mode);
            let data = TrainingTable::read(&table)?;
            if baseline {
                let params = lr_fit(mode, &data.rows)?;
                params.save(&out_model)?;
                let mape = evaluate_mape(&params, &data.rows, &HashMap::new())?;
                println!("train_mape={}", number(mape));
                return Ok(());
            }
            let grids = load_hists(&hists.unwrap_or_else(|| default_hist_dir(&table)))?;
            let h = common_size(&grids)?;
            let training = match config {
                Some(path) => Config::load(&path)?.training,
                None => Config::default().training,
            };
            let (model, history) = train(
                build_network(mode, h, Seed(seed))?,
                &data.rows,
                &grids,
                &training.train_config(Seed(seed)),
            )?;
            model.save(&out_model)?;
            println!("train_mape={}", number(history.final_train_mape()));
            println!("validation_mape={}", number(history.final_validation_mape()));
            eprintln!(
                "{} epochs, best at epoch {}, {:.1}s",
                history.epochs.len(),
                history.best_epoch,
                history.seconds
            );
        }
        Command::PredictAccuracy { model, q, sigma, hist } => {
            let loaded = Loaded::load(&model)?;
            let p = loaded.predictor();
            expect_mode(p, Mode::AccuracyPrediction)?;
            let hist = read_optional_hist(hist.as_deref(), p)?;
            let v = p.predict_features(&TabularFeatures::for_accuracy(q, sigma)?, hist.as_ref())?;
            println!("{}", number(v));
        }
        Command::EstimateRatio { model, q, alpha, hist } => {
            let loaded = Loaded::load(&model)?;
            let p = loaded.predictor();
            expect_mode(p, Mode::RatioEstimation)?;
            let hist = read_optional_hist(hist.as_deref(), p)?;
            let v = match (&loaded, &hist) {
                (Loaded::Network(m), Some(h)) => estimate_sampling_ratio(m, q, alpha, h)?,
                _ => p.predict_features(&TabularFeatures::for_ratio(q, alpha)?, hist.as_ref())?,
            };
            println!("{}", number(v));
        }
        Command::Evaluate { model, table, hists } => {
            let loaded = Loaded::load(&model)?;
            let data = TrainingTable::read(&table)?;
            let p = loaded.predictor();
            let grids = if p.needs_histogram() {
                load_hists(&hists.unwrap_or_else(|| default_hist_dir(&table)))?
            } else {
                HashMap::new()
            };
            println!("{}", number(evaluate_mape(p, &data.rows, &grids)?));
        }
        Command::Experiment { kind, config, out_dir } => {
            let config = Config::load(&config)?;
            let artifacts = match kind {
                ExperimentKind::Relationship => vec![experiment_relationship(&config)?.artifact],
                ExperimentKind::DistributionCount => {
                    vec![experiment_distribution_count(&build_corpus(&config)?)?.artifact]
                }
                ExperimentKind::HistogramResolution => {
                    let r = experiment_histogram_resolution(&build_corpus(&config)?)?;
                    vec![r.artifact, r.timing]
                }
            };
            for a in artifacts {
                let path = a.write_to(&out_dir)?;
                eprintln!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn sidecar(points: &Path) -> PathBuf {
    let mut name = points.as_os_str().to_owned();
    name.push(".meta");
    PathBuf::from(name)
}

fn default_hist_dir(table: &Path) -> PathBuf {
    table.parent().unwrap_or(Path::new(".")).join("hists")
}

fn expect_mode(p: &dyn Predictor, mode: Mode) -> Result<(), Error> {
    if p.mode() == mode {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "model is in {} mode, this command needs {mode}",
            p.mode()
        )))
    }
}

fn read_optional_hist(path: Option<&Path>, p: &dyn Predictor) -> Result<Option<HistogramGrid>, Error> {
    match path {
        Some(path) => HistogramGrid::read(path).map(Some),
        None if p.needs_histogram() => Err(Error::InvalidArgument("--hist is required for this model".into())),
        None => Ok(None),
    }
}

/// Every `<dataset_id>.hist` file in `dir`, keyed by dataset id.
fn load_hists(dir: &Path) -> Result<HashMap<String, HistogramGrid>, Error> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut grids = HashMap::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .path();
        if path.extension().and_then(|e| e.to_str()) != Some(HIST_EXTENSION) {
            continue;
        }
        if let Some(id) = path.file_stem().and_then(|s| s.to_str()) {
            grids.insert(id.to_string(), HistogramGrid::read(&path)?);
        }
    }
    Ok(grids)
}

fn common_size(grids: &HashMap<String, HistogramGrid>) -> Result<usize, Error> {
    let mut sizes = grids.values().map(|g| g.h());
    let h = sizes
        .next()
        .ok_or_else(|| Error::InvalidArgument("no histogram files found".into()))?;
    match sizes.find(|&s| s != h) {
        Some(other) => Err(Error::HistogramMismatch { expected: h, actual: other }),
        None => Ok(h),
    }
}
