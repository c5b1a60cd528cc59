use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("missing blob {}", .0.display())]
    MissingBlob(PathBuf),
    #[error(
        "blob {}: {found_bytes} bytes do not form {} rows of width {dim} ({} bytes per row)",
        path.display(),
        expected_rows.map_or_else(|| "whole".to_string(), |r| r.to_string()),
        8 * dim
    )]
    BlobShape {
        path: PathBuf,
        dim: usize,
        expected_rows: Option<usize>,
        found_bytes: u64,
    },
    #[error("blob {}: {len} bytes is not a whole number of {unit}-byte rows", path.display())]
    BlobTruncated { path: PathBuf, len: u64, unit: u64 },
    #[error("blob {}: non-finite value at element {index}", path.display())]
    BlobNonFinite { path: PathBuf, index: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Shape { .. }
            | Error::Contract(_)
            | Error::NonFinite(_)
            | Error::NonFiniteGradient(_) => ErrorClass::Numeric,
            Error::Data(_)
            | Error::MissingBlob(_)
            | Error::BlobShape { .. }
            | Error::BlobNonFinite { .. }
            | Error::Checkpoint(_)
            | Error::Json(_) => ErrorClass::Data,
            Error::BlobTruncated { .. } | Error::Io(_) => ErrorClass::Io,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
