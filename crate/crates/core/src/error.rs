use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file {path}")]
    MissingFile { path: PathBuf },

    #[error("failed to read {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("{what} index {index} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for errors caused by bad user input rather than a runtime fault.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Divergence { .. } | Error::Io(_))
    }

    /// Short machine-readable category used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingFile { .. } => "missing_file",
            Error::Load { .. } => "load",
            Error::Validation(_) => "validation",
            Error::UnknownKey(_) => "unknown_key",
            Error::OutOfRange { .. } => "out_of_range",
            Error::CorruptCheckpoint { .. } => "corrupt_checkpoint",
            Error::CheckpointVersion { .. } => "checkpoint_version",
            Error::Shape(_) => "shape",
            Error::Divergence { .. } => "divergence",
            Error::Io(_) => "io",
        }
    }
}
