use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the decoding engine and experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty probability vector")]
    Empty,

    #[error("negative or non-finite probability {value} at index {index}")]
    InvalidProbability { index: usize, value: f64 },

    #[error("probabilities sum to {sum}, too far from 1 to renormalize")]
    NotNormalized { sum: f64 },

    #[error("no residual mass: target and draft distributions coincide")]
    NoResidualMass,

    #[error("width {width} out of range for vocabulary of {vocab_size}")]
    WidthOutOfRange { width: usize, vocab_size: usize },

    #[error("token {token} out of vocabulary of size {vocab_size}")]
    TokenOutOfVocab { token: u32, vocab_size: usize },

    #[error("bad parameters: {0}")]
    BadParams(String),

    #[error("policy supports {supported} sources, got {got}")]
    UnsupportedArity { supported: usize, got: usize },

    #[error("error rate {0} outside the open interval (0, 1)")]
    EpsOutOfDomain(f64),

    #[error("history cache is empty")]
    EmptyHistory,

    #[error("inconsistent draft block / verification pair: {0}")]
    InconsistentPair(String),

    #[error("run contains no blocks")]
    EmptyRun,

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("config error: {0}")]
    ConfigError(String),

    #[error("reports disagree on scenario set: {0}")]
    ScenarioMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
