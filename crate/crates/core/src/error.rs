use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("annotation parse error: {0}")]
    Parse(String),

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("class `{class}` has {available} records, {requested} requested")]
    Capacity {
        class: String,
        available: usize,
        requested: usize,
    },

    #[error("cannot stratify class `{class}`: only {available} record(s)")]
    Stratification { class: String, available: usize },

    #[error("failed to ingest `{locator}`: {reason}")]
    Ingestion { locator: String, reason: String },

    #[error("invalid augmentation policy: {0}")]
    Policy(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { expected: u32, found: u32 },

    #[error("checkpoint digest mismatch: header says {expected}, payload hashes to {found}")]
    CheckpointDigest { expected: String, found: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("incompatible architecture: requested `{requested}`, checkpoint holds `{found}`")]
    IncompatibleArchitecture { requested: String, found: String },

    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("io error on {path}: {source}")]
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
}
