use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("subject `{subject}`: {reason}")]
    Subject { subject: String, reason: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("non-finite value in loss term `{term}` (epoch {epoch}, step {step})")]
    NonFinite {
        term: String,
        epoch: usize,
        step: usize,
    },

    #[error("refusing to write into non-empty directory {0}")]
    DirectoryNotEmpty(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("image encoding: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn subject(subject: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Subject {
            subject: subject.into(),
            reason: reason.into(),
        }
    }
}
