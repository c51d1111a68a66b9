use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("batch-norm running statistics are uninitialized; run a training step first")]
    UninitializedRunningStats,

    #[error("no valid pixels in batch")]
    NoValidPixels,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{0} is undefined (zero denominator)")]
    UndefinedMetric(&'static str),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("infeasible class fractions: {0}")]
    InfeasibleFractions(String),

    #[error("checkpoint has bad magic bytes")]
    BadMagic,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint is truncated")]
    Truncated,

    #[error("checkpoint is inconsistent: {0}")]
    Inconsistent(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: png decode failed: {reason}")]
    Png { path: PathBuf, reason: String },

    #[error("{path}: expected an 8-bit single-channel mask, found {found}")]
    NotEightBitMask { path: PathBuf, found: String },

    #[error("config: {0}")]
    Config(String),

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

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimMismatch(msg.into())
    }
}
