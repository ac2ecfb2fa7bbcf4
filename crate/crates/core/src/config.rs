//! Experiment configuration: a TOML file with one section per concern.
//!
//! Every field has a default, so an empty file yields the desk-scale setup:
//! 20 datasets of 100,000 points (four parameterizations each of the
//! gaussian, diagonal, sierpinski, bit and mixed families), an 8 x 4
//! sigma/q grid, 50 queries and 3 draws per cell.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::DistributionSpec;
use crate::error::{Error, Result};
use crate::histogram::SUPPORTED_SIZES;
use crate::nn::AdamConfig;
use crate::predictor::TrainConfig;
use crate::rng::Seed;

pub const DESK_SIGMAS: [f64; 8] = [0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2];
pub const DESK_QS: [f64; 4] = [0.01, 0.02, 0.05, 0.1];

const DESK_DATASETS: [&str; 20] = [
    "gaussian(sigma=0.05,cx=0.5,cy=0.5)",
    "gaussian(sigma=0.1,cx=0.5,cy=0.5)",
    "gaussian(sigma=0.2,cx=0.5,cy=0.5)",
    "gaussian(sigma=0.1,cx=0.3,cy=0.7)",
    "diagonal(p=0.5,buffer=0.05,theta=0)",
    "diagonal(p=0.2,buffer=0.1,theta=0)",
    "diagonal(p=0.8,buffer=0.02,theta=0)",
    "diagonal(p=0.5,buffer=0.05,theta=0.7853981633974483)",
    "sierpinski",
    "sierpinski",
    "sierpinski",
    "sierpinski",
    "bit(p=0.1,digits=16)",
    "bit(p=0.2,digits=16)",
    "bit(p=0.3,digits=16)",
    "bit(p=0.4,digits=16)",
    "mixed",
    "mixed(0.5*gaussian(sigma=0.05,cx=0.25,cy=0.25),0.5*uniform)",
    "mixed(0.6*diagonal(p=0.5,buffer=0.05,theta=1.5707963267948966),0.4*gaussian(sigma=0.1,cx=0.7,cy=0.3))",
    "mixed(0.5*sierpinski,0.3*bit(p=0.3,digits=16),0.2*uniform)",
];

const RELATIONSHIP_DATASETS: [&str; 5] = [
    "diagonal(p=0.5,buffer=0.05,theta=0.7853981633974483)",
    "diagonal(p=0.5,buffer=0.05,theta=0)",
    "mixed",
    "gaussian(sigma=0.1,cx=0.5,cy=0.5)",
    "sierpinski",
];

fn parse_all(specs: &[&str]) -> Vec<DistributionSpec> {
    specs.iter().map(|s| s.parse().expect("built-in spec")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub grid: GridConfig,
    pub training: TrainingConfig,
    pub relationship: RelationshipConfig,
    pub distribution_count: DistributionCountConfig,
    pub histogram_resolution: HistogramResolutionConfig,
}

/// Datasets of the training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub datasets: Vec<DistributionSpec>,
}

/// Measurement grid for every (dataset, sigma, q) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub sigmas: Vec<f64>,
    pub qs: Vec<f64>,
    pub queries: usize,
    pub draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub h: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub validation_fraction: f64,
    /// Fraction of the corpus used for training; the rest is the test set.
    pub train_fraction: f64,
    /// Split whole datasets instead of rows.
    pub dataset_split: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelationshipConfig {
    pub datasets: Vec<DistributionSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistributionCountConfig {
    /// Largest family count; 0 means all families in the corpus.
    pub max_families: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramResolutionConfig {
    pub sizes: Vec<usize>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 20_190_827,
            data: DataConfig::default(),
            grid: GridConfig::default(),
            training: TrainingConfig::default(),
            relationship: RelationshipConfig::default(),
            distribution_count: DistributionCountConfig::default(),
            histogram_resolution: HistogramResolutionConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 100_000,
            datasets: parse_all(&DESK_DATASETS),
        }
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            sigmas: DESK_SIGMAS.to_vec(),
            qs: DESK_QS.to_vec(),
            queries: 50,
            draws: 3,
        }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            h: 16,
            batch_size: t.batch_size,
            learning_rate: t.adam.learning_rate,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            patience: t.patience,
            max_epochs: t.max_epochs,
            validation_fraction: t.validation_fraction,
            train_fraction: 0.75,
            dataset_split: false,
        }
    }
}

impl Default for RelationshipConfig {
    fn default() -> Self {
        Self {
            datasets: parse_all(&RELATIONSHIP_DATASETS),
        }
    }
}

impl Default for HistogramResolutionConfig {
    fn default() -> Self {
        Self {
            sizes: SUPPORTED_SIZES.to_vec(),
        }
    }
}

impl TrainingConfig {
    /// Optimizer settings with the given run seed.
    pub fn train_config(&self, seed: Seed) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                ..AdamConfig::default()
            },
            patience: self.patience,
            max_epochs: self.max_epochs,
            validation_fraction: self.validation_fraction,
            seed,
            ..TrainConfig::default()
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn master_seed(&self) -> Seed {
        Seed(self.seed)
    }

    /// SHA-256 of the canonical TOML rendering, in hex.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let unit_grid = |name: &str, xs: &[f64]| -> Result<()> {
            if xs.is_empty() {
                return Err(Error::Config(format!("{name} grid is empty")));
            }
            match xs.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
                Some(v) => Err(Error::Config(format!("{name}={v} outside (0,1]"))),
                None => Ok(()),
            }
        };
        if self.data.n == 0 {
            return bad("data.n must be positive".into());
        }
        if self.data.datasets.is_empty() {
            return bad("data.datasets is empty".into());
        }
        for spec in self.data.datasets.iter().chain(&self.relationship.datasets) {
            spec.validate()?;
        }
        unit_grid("sigma", &self.grid.sigmas)?;
        unit_grid("q", &self.grid.qs)?;
        if self.grid.queries == 0 || self.grid.draws == 0 {
            return bad("grid.queries and grid.draws must be positive".into());
        }
        let t = &self.training;
        if !SUPPORTED_SIZES.contains(&t.h) {
            return bad(format!("training.h={} unsupported", t.h));
        }
        if t.batch_size == 0 || t.max_epochs == 0 {
            return bad("training.batch_size and training.max_epochs must be positive".into());
        }
        if !(t.learning_rate > 0.0) {
            return bad("training.learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return bad("training.beta1/beta2 must lie in [0,1)".into());
        }
        if !(t.train_fraction > 0.0 && t.train_fraction < 1.0) {
            return bad("training.train_fraction must lie in (0,1)".into());
        }
        if !(0.0..1.0).contains(&t.validation_fraction) {
            return bad("training.validation_fraction must lie in [0,1)".into());
        }
        if let Some(h) = self
            .histogram_resolution
            .sizes
            .iter()
            .find(|h| !SUPPORTED_SIZES.contains(h))
        {
            return bad(format!("histogram_resolution.sizes contains unsupported h={h}"));
        }
        if self.histogram_resolution.sizes.is_empty() {
            return bad("histogram_resolution.sizes is empty".into());
        }
        Ok(())
    }
}
