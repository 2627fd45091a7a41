//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

use crate::kg::Triplet;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: expected 3 tab-separated fields, found {found}")]
    MalformedTriplet {
        path: PathBuf,
        line: usize,
        found: usize,
    },

    #[error("rule file line {line}: {reason}")]
    MalformedRule { line: usize, reason: String },

    #[error("unknown entity name: {0:?}")]
    UnknownEntity(String),

    #[error("unknown relation name: {0:?}")]
    UnknownRelation(String),

    #[error("rule derives no hypotheses on this graph")]
    EmptyHypothesisSet,

    #[error("split {0:?} is empty")]
    EmptySplit(crate::kg::Split),

    #[error("blanket sample does not cover neighbor {0:?}")]
    MissingNeighbor(Triplet),

    #[error("no annotation for blanket center {0:?}")]
    MissingAnnotation(Triplet),

    #[error("non-finite loss while scoring {0:?}")]
    NonFiniteLoss(Triplet),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("vocabulary hash mismatch: checkpoint was written for a different dataset (expected {expected:#018x}, found {found:#018x})")]
    VocabularyMismatch { expected: u64, found: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps an i/o error with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for numeric failures during training, as opposed to problems
    /// with input data or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss(_))
    }
}
