use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid taxonomy: {0}")]
    Validation(String),

    #[error("unknown label: {0}")]
    UnknownLabel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("truncated input: {0}")]
    Truncation(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid gold labels: {0}")]
    InvalidGold(String),

    #[error("insufficient data for {} leaf path(s): {}", .0.len(), .0.join(", "))]
    InsufficientData(Vec<String>),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status for the CLI: 1 usage, 2 data/format, 3 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::Numerical(_) | Error::Divergence { .. } => 3,
            _ => 2,
        }
    }
}
