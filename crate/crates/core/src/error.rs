use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("beta too strict: no tree reached beta={beta} after {attempts} attempts (best held-out accuracy {best_accuracy:.4})")]
    BetaTooStrict {
        beta: f64,
        attempts: usize,
        best_accuracy: f64,
    },

    #[error("empty forest")]
    EmptyForest,

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("theorem hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("estimator failed on seed {seed}: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
