//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("{what} must contain only finite values")]
    NonFinite { what: &'static str },

    #[error("{what} must not be empty")]
    Empty { what: &'static str },

    #[error("invalid probability vector: {0}")]
    InvalidProbVec(String),

    #[error("class {class} has no support instances")]
    EmptyClass { class: usize },

    #[error("class {class} out of range for {n_classes} classes")]
    InvalidClass { class: usize, n_classes: usize },

    #[error("ensemble member count mismatch: expected {expected}, got {got}")]
    MemberMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("episode sampling failed: {0}")]
    Sampling(String),

    #[error("query instance {0} does not exist")]
    UnknownInstance(usize),

    #[error("episode failed (seed {seed}): {source}")]
    Episode {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
