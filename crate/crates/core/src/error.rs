//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

use crate::model::HeadId;

/// Everything that can go wrong inside the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed caller input (bad token, empty set, wrong dimension).
    #[error("input error: {0}")]
    Input(String),

    /// Inconsistent or unsatisfiable configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A non-finite value appeared where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Non-finite loss during gradient computation.
    #[error("non-finite loss at batch index {index}")]
    NonFiniteLoss { index: usize },

    /// Training diverged.
    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    /// Decomposition target is not downstream of its source.
    #[error("topology error: target {target} is not downstream of source {source_head}")]
    Topology { source_head: HeadId, target: String },

    /// Label-balanced sampling impossible.
    #[error("balance error: class {class} has no examples")]
    Balance { class: usize },

    /// Discovery could not proceed (e.g. model has no correct predictions).
    #[error("discovery error: {0}")]
    Discovery(String),

    /// Relevance scoring could not be computed.
    #[error("scoring error: {0}")]
    Scoring(String),

    /// A report could not be assembled from its inputs.
    #[error("report error: {0}")]
    Report(String),

    /// Malformed on-disk artifact.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
