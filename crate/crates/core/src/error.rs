use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every stage of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("provider `{provider}` failed: {message}")]
    Provider { provider: String, message: String },

    #[error("self-reconstruction failed at index {index}: {source}")]
    Reconstruction {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite activations at level {level}")]
    NonFinite { level: String },

    #[error("non-finite {term} loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        term: &'static str,
    },

    #[error(
        "embedding collapse at epoch {epoch}: mean positive distance {mean_pos:.3e}, \
         mean negative distance {mean_neg:.3e}; negatives are not held outside the sphere"
    )]
    Collapse {
        epoch: usize,
        mean_pos: f64,
        mean_neg: f64,
    },

    #[error("verifier is uncalibrated: run `calibrate` to set the radius first")]
    Uncalibrated,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("failed to load weights from {path}: {message}")]
    WeightsLoad { path: PathBuf, message: String },

    #[error("parse error in {path} at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("image codec error for {path}: {message}")]
    Codec { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            actual,
        }
    }
}
