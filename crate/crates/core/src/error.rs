use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("input is empty: {0}")]
    Empty(String),
    #[error("user {user} has {len} interactions, at least 3 are required")]
    ShortSequence { user: String, len: usize },
    #[error("item index {index} out of range for vocabulary of {vocab}")]
    InvalidItem { index: usize, vocab: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown client {0}")]
    UnknownClient(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("hard subset holds {subset} items, cannot draw {requested} without replacement")]
    SubsetTooSmall { subset: usize, requested: usize },
    #[error("cannot draw {requested} distinct items from a population of {population}")]
    PopulationTooSmall { population: usize, requested: usize },
    #[error("target item {0} is in the exclusion set")]
    TargetExcluded(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
