use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("payload holds {found} scalars but header declares {expected}")]
    PayloadMismatch { expected: usize, found: usize },

    #[error("unsupported scalar type: {0}")]
    UnsupportedScalar(String),

    #[error("dimension mismatch: {0}")]
    DimsMismatch(String),

    #[error("index ({x}, {y}, {z}) out of range for dims {dims:?}")]
    OutOfRange {
        x: usize,
        y: usize,
        z: usize,
        dims: [usize; 3],
    },

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("patch size mismatch: network expects {expected}, sample has {found}")]
    PatchSizeMismatch { expected: usize, found: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI and the C API.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } | Error::Csv(_) => "io",
            Error::MalformedHeader(_)
            | Error::PayloadMismatch { .. }
            | Error::UnsupportedScalar(_)
            | Error::Checkpoint(_)
            | Error::Json(_) => "format",
            Error::DimsMismatch(_) | Error::PatchSizeMismatch { .. } => "dims",
            Error::Divergence { .. } => "divergence",
            Error::OutOfRange { .. }
            | Error::InvalidLabel(_)
            | Error::InvalidConfig(_)
            | Error::Empty(_) => "invalid",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
