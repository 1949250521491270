use std::path::PathBuf;

use crate::types::Trajectory;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value or combination of values is invalid.
    #[error("invalid config: {0}")]
    Config(String),
    /// An input record violates its schema or invariants.
    #[error("invalid record: {0}")]
    Schema(String),
    /// Step labels that break the first-error convention.
    #[error("non-monotone labels: label 0 at {zero} followed by label 1 at {one}")]
    NonMonotone { zero: usize, one: usize },
    /// A prefix that is not a valid path in the environment.
    #[error("invalid prefix: {0}")]
    InvalidPrefix(String),
    #[error("unknown question: {0}")]
    UnknownQuestion(String),
    /// An argument outside the operation's domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Training or labeling was asked to work on nothing.
    #[error("empty input: {0}")]
    Empty(&'static str),
    /// Sampling gave up; carries whatever was collected before the failure.
    #[error("sampling failed after {attempts} attempts ({} partial results): {source}", partial.len())]
    Sampling {
        attempts: usize,
        partial: Vec<Trajectory>,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Remote(#[from] crate::reasoner::remote::RemoteError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad configuration or arguments rather than
    /// by a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArgument(_))
    }
}
