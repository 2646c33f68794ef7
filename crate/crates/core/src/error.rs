use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by stream construction, dataset ingestion, and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error: missing or unreadable {path}: {detail}")]
    Ingestion { path: PathBuf, detail: String },

    #[error("dataset corruption: {0}")]
    Corruption(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss at step {step} (samples seen: {samples_seen}): {detail}")]
    NonFiniteLoss {
        step: usize,
        samples_seen: usize,
        detail: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
