//! Crate-wide error type.

use std::path::PathBuf;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A timestep or index fell outside its valid range.
    #[error("index out of range: {0}")]
    OutOfRange(String),

    /// A tensor or window had an unexpected shape.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A domain invariant was violated while constructing a value.
    #[error("invalid value: {0}")]
    Invalid(String),

    /// A metric is undefined for the given inputs (e.g. single-class AUROC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// An experimental protocol's preconditions were not met.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// The estimate history does not cover a requested anchor timestep.
    #[error("stale estimate: {0}")]
    StaleEstimate(String),

    /// CSV or trace parsing failed; names the offending row when known.
    #[error("parse error in {path}: {message}{}", row.map(|r| format!(" (row {r})")).unwrap_or_default())]
    Parse {
        path: PathBuf,
        row: Option<usize>,
        message: String,
    },

    /// A checkpoint or model file could not be read back.
    #[error("model file error: {0}")]
    ModelFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, row: Option<usize>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            row,
            message: message.into(),
        }
    }
}
