use std::path::PathBuf;

use thiserror::Error;

use crate::encoders::store::StoreError;
use crate::erpipeline::clients::ClientError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}: line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{path}: line {line}: duplicate {kind} `{id}`")]
    Duplicate { path: PathBuf, line: usize, kind: &'static str, id: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("missing feature `{0}` in the feature store")]
    MissingFeature(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error(transparent)]
    Store(#[from] StoreError),

    #[error(transparent)]
    Client(#[from] ClientError),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable machine-readable code, used by the CLI's error output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Parse { .. } => "parse",
            Error::Duplicate { .. } => "duplicate",
            Error::InvalidInput(_) => "invalid_input",
            Error::MissingFeature(_) => "missing_feature",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Store(e) => e.code(),
            Error::Client(_) => "client",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
