use std::path::PathBuf;

use ndtensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{0}")]
    Rating(#[from] RatingError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sample {id}: {reason}")]
    Sample { id: String, reason: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RatingError {
    #[error("need at least {min} rater scores, got {got}")]
    TooFewScores { min: usize, got: usize },
    #[error("score {0} outside 1..=5")]
    OutOfRange(u8),
    #[error("predicted class {0} outside 1..=5")]
    InvalidClass(u8),
    #[error("probability vector is not normalized (sum {0})")]
    NotNormalized(f64),
}

pub type Result<T> = std::result::Result<T, Error>;
