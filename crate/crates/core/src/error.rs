use std::path::PathBuf;

use protodepth_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{what}: {detail}")]
    Domain { what: &'static str, detail: String },
    #[error("non-finite {term} loss")]
    NonFiniteLoss { term: &'static str },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("dataset {path}: {detail}")]
    Dataset { path: PathBuf, detail: String },
    #[error("stage {stage} ({dataset}): {source}")]
    Stage {
        stage: usize,
        dataset: String,
        #[source]
        source: Box<Error>,
    },
    #[error("artifact mismatch: {0}")]
    Artifact(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn domain(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than inputs or I/O.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFiniteLoss { .. } | Error::Numeric(_) => true,
            Error::Tensor(TensorError::NonFinite { .. }) => true,
            Error::Stage { source, .. } => source.is_numeric(),
            _ => false,
        }
    }

    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } | Error::Dataset { .. } => true,
            Error::Tensor(TensorError::Io(_)) => true,
            Error::Stage { source, .. } => source.is_io(),
            _ => false,
        }
    }
}
