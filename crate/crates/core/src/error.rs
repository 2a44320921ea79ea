//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by the numerics substrate, the learning components and the
/// experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {context} (layer {layer})")]
    NonFinite { context: String, layer: usize },

    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("cannot sample from empty {0} buffer")]
    EmptySource(&'static str),

    #[error("planner candidate {candidate}: {source}")]
    Candidate {
        candidate: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{phase} failed at index {index}: {source}")]
    Phase {
        phase: &'static str,
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape {
            context,
            expected,
            got,
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>, layer: usize) -> Self {
        Error::NonFinite {
            context: context.into(),
            layer,
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
