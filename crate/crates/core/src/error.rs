use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config field `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("unknown subject `{0}`")]
    UnknownSubject(String),

    #[error("subject `{0}` already exists")]
    DuplicateSubject(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("cannot l2-normalize a zero-norm row (row {row})")]
    ZeroNorm { row: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("frozen parameter group `{0}` changed during calibration")]
    FrozenDrift(String),

    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("bad magic in {path}: expected \"MCDS1\"")]
    BadMagic { path: PathBuf },

    #[error("truncated payload in {path}: header declares {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 validation, 3 numeric failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteLoss { .. } | Error::GradcheckFailed(_) | Error::FrozenDrift(_) => 3,
            Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::VersionMismatch { .. }
            | Error::Header(_)
            | Error::Io { .. }
            | Error::Json(_) => 4,
            _ => 2,
        }
    }
}
