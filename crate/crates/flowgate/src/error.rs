//! Crate-wide error type.
//!
//! Contract violations (bad shapes, invalid hyperparameters, malformed
//! files) are reported as typed errors rather than panics so the CLI can
//! map them onto stable exit codes.

use thiserror::Error;

/// Errors produced by the flowgate library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape does not satisfy an operation's contract.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// An argument violates an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration file or value could not be parsed or validated.
    #[error("config error: {0}")]
    Config(String),

    /// A serialized artifact (checkpoint, dataset) is malformed.
    #[error("malformed {kind}: {detail}")]
    Format { kind: &'static str, detail: String },

    /// A numerical quantity that must be finite was not.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand for a shape error with formatted expectation strings.
    pub fn shape(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            kind,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
