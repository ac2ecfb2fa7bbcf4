use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty point set")]
    EmptyPointSet,

    #[error("invalid distribution spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("undefined accuracy for empty ground truth")]
    EmptyGroundTruth,

    #[error("no nonempty queries; increase q or n")]
    NoNonemptyQueries,

    #[error("MAPE undefined at zero target")]
    ZeroTarget,

    #[error("degenerate training table")]
    DegenerateTable,

    #[error("layer {layer}: shape mismatch, expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        layer: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("layer {layer}: cache does not match layer kind or shape")]
    StaleCache { layer: usize },

    #[error("histogram size mismatch: model expects h={expected}, got h={actual}")]
    HistogramMismatch { expected: usize, actual: usize },

    #[error("missing histogram for dataset `{0}`")]
    MissingHistogram(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
