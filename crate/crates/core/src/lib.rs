//! Sample-based selectivity estimation for 2D point data, with a learned
//! dual-branch model that predicts estimate accuracy from a sampling ratio
//! or recommends a sampling ratio for a target accuracy.
//!
//! Module map:
//!
//! * [`geometry`]: points, closed boxes, point files.
//! * [`datagen`]: seeded synthetic distributions.
//! * [`selectivity`]: range counting, sampling, the accuracy metric.
//! * [`histogram`]: equi-width distribution features.
//! * [`nn`]: dense/conv/pool layers, MAPE loss, Adam, gradient checks.
//! * [`predictor`]: the dual-branch model and the linear baseline.
//! * [`pipeline`]: training corpora, splits, experiments.

pub mod config;
pub mod datagen;
pub mod error;
pub mod geometry;
pub mod histogram;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod predictor;
pub mod rng;
pub mod selectivity;
pub mod stats;

pub use datagen::{generate, generate_mixed, DistributionSpec, Family};
pub use error::{Error, Result};
pub use geometry::{contains, mbr, BBox, Point, PointSet};
pub use histogram::{build_histogram, HistogramGrid};
pub use rng::Seed;
pub use selectivity::{
    accuracy, draw_sample, estimate_selectivity, ground_truth, measure_mean_accuracy,
    random_query_workload, QuerySpec,
};
