use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the change-detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid parameter for {op}: {detail}")]
    Parameter { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("integrity error in sample {index}: {detail}")]
    Integrity { index: usize, detail: String },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("non-finite loss at step {step} in component `{component}`")]
    NanLoss { step: usize, component: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn param(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Parameter {
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
}

pub type Result<T> = std::result::Result<T, Error>;
