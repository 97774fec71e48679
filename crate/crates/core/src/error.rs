use thiserror::Error;

use crate::data::IdxError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("bound must be positive and finite, got {0}")]
    NonPositiveBound(f64),
    #[error("vector contains a non-finite entry")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("class {0} has no records")]
    EmptyClass(usize),
    #[error("no submissions to aggregate")]
    NoSubmissions,
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),
    #[error("I/O error: {0}")]
    Io(String),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error(transparent)]
    Sharing(#[from] crate::secure_agg::SharingError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
