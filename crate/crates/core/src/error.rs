use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{kind} `{id}` referenced by an event does not exist")]
    DanglingReference { kind: &'static str, id: String },

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("gradient not available for {0}")]
    UnsupportedGradient(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("optimization diverged for user `{user_id}`")]
    Divergence { user_id: String },

    #[error("ROC AUC is undefined without at least one positive and one negative")]
    UndefinedAuc,

    #[error("{what} hash mismatch: expected {expected}, found {found}")]
    HashMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("model `{0}` not found")]
    MissingModel(String),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("user `{0}` not found")]
    UserNotFound(String),

    #[error("corrupt record in {path}: {message}")]
    CorruptRecord { path: PathBuf, message: String },
}

/// Coarse failure class, used by the command line to choose an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::UnknownModel(_) => ErrorClass::Config,
            Error::NonFinite(_)
            | Error::Divergence { .. }
            | Error::UndefinedAuc
            | Error::UnsupportedGradient(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}
