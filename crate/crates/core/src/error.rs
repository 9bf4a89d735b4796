use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A user-supplied value broke a documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate document id `{0}`")]
    DuplicateId(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("degenerate target distribution: standard deviation is zero")]
    DegenerateSigma,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("low-rank adapters {0}")]
    Adapters(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs rather than by the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }
}
