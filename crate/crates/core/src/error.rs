use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {token} out of vocabulary (size {vocab}) at index {index}")]
    TokenOutOfRange { token: u32, vocab: usize, index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("root variable is not recorded on this tape")]
    ForeignRoot,

    #[error("head is not stationary: {0}")]
    NotStationary(String),

    #[error("token {0} never occurs as a target")]
    UnknownTarget(u32),

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("corrupt file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },

    #[error("missing input: {0}")]
    Missing(String),

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Invariant(_) => "invariant",
            Error::ForeignRoot => "foreign_root",
            Error::NotStationary(_) => "not_stationary",
            Error::UnknownTarget(_) => "unknown_target",
            Error::Parse { .. } => "parse",
            Error::Corrupt { .. } => "corrupt",
            Error::Missing(_) => "missing",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
