//! Multi-target algal detection: a two-stage region-proposal detector with a
//! genus head and an auxiliary biological-class head trained jointly through a
//! lambda-weighted loss, plus the synthetic data, training, and evaluation
//! machinery needed to run it end to end on a desk-scale corpus.

pub mod cli;
pub mod data;
pub mod eval;
pub mod geometry;
pub mod model;

pub mod nn;
pub mod render;
pub mod report;
pub mod synthgen;
pub mod taxonomy;
pub mod train;
pub mod util;

use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration (invalid knobs, inconsistent shapes, missing "else" genus).
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed or unreadable input data (manifest records, taxonomy sidecar).
    #[error("ingestion error: {0}")]
    Ingestion(String),
    /// Input that parsed but violates a contract (out-of-bounds box, unknown genus).
    #[error("validation error: {0}")]
    Validation(String),
    /// Non-finite values or other numeric failures during training/evaluation.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Scene generation could not satisfy the requested layout after bounded retries.
    #[error("generation error: {0}")]
    Generation(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Ingestion(_) => 3,
            Error::Validation(_) | Error::Lookup(_) => 4,
            Error::Numeric(_) => 5,
            Error::Generation(_) => 6,
            Error::Io(_) => 1,
        }
    }
}
