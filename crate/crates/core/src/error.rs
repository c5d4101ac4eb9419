//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image shapes do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// An input value violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),
    /// A file could not be parsed; the message names the offending entry.
    #[error("parse error: {0}")]
    Parse(String),
    /// A dataset references something that does not exist on disk.
    #[error("ingestion error: {0}")]
    Ingestion(String),
    /// Synthetic scene generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),
    /// A patch placement fell entirely outside the image.
    #[error("placement error: {0}")]
    Placement(String),
    /// A detector violated the DetectorModel contract.
    #[error("detector contract violation: {0}")]
    Contract(String),
    /// A binary artifact has the wrong magic or layout.
    #[error("format error: {0}")]
    Format(String),
    /// Training failed to meet its floor or diverged.
    #[error("training error: {0}")]
    Training(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit class: 2 for bad inputs, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Validation(_)
            | Error::Parse(_)
            | Error::Ingestion(_)
            | Error::Format(_) => 2,
            _ => 1,
        }
    }
}
