use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("empty reduction along axis {axis} of shape {shape:?}")]
    EmptyReduction { axis: usize, shape: Vec<usize> },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("{path}: expected a rank-{expected} tensor, found shape {shape:?}")]
    Rank {
        path: PathBuf,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("label count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable category, stable across releases.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::EmptyReduction { .. } => "empty-reduction",
            Error::NonFinite(_) => "non-finite",
            Error::DegenerateInput(_) => "degenerate-input",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Rank { .. } => "rank",
            Error::Range(_) => "range",
            Error::CountMismatch { .. } => "count-mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::Evaluation(_) => "evaluation",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
