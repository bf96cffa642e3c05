use std::path::PathBuf;

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("empty dataset")]
    EmptyDataset,

    /// Precondition violations: bad counts, rates out of range, zero steps…
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("parse error: {0}")]
    Parse(String),

    /// Malformed or corrupt cache file (bad magic, version, offsets).
    #[error("cache format error: {0}")]
    CacheFormat(String),

    #[error("checkpoint not stored under policy: step {0}")]
    CheckpointUnavailable(u64),

    /// Requested influence mode needs checkpoints the cache policy did not keep.
    #[error("cache lacks per-step checkpoints: {0}")]
    PolicyMismatch(String),

    #[error("non-finite or diverged loss at step {step} (loss {loss}); aborting")]
    Diverged { step: u64, loss: f64 },

    #[error("non-finite influence propagation at step {step}")]
    NonFinitePropagation { step: u64 },

    #[error("unknown instance id {0}")]
    UnknownId(usize),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
