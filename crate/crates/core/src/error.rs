use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{layer}: shape mismatch, expected {expected:?} but got {actual:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid layer spec `{layer}`: {reason}")]
    InvalidLayer { layer: String, reason: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss term `{term}`")]
    NonFiniteLoss { term: String },

    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged { epoch: usize, step: usize, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic: expected {expected}, found {found}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported version {found} (expected {expected})")]
    UnsupportedVersion { expected: u32, found: u32 },

    #[error("unexpected EOF while reading {0}")]
    UnexpectedEof(String),

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("config error at {pointer}: {reason}")]
    Config { pointer: String, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(layer: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            layer: layer.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    /// Io error whose message names the action that failed.
    pub(crate) fn io_context(err: io::Error, action: impl std::fmt::Display) -> Self {
        Error::Io(io::Error::new(err.kind(), format!("{action}: {err}")))
    }

    /// Maps `UnexpectedEof` io errors onto the format-level diagnostic.
    pub(crate) fn from_read(err: io::Error, what: &str) -> Self {
        if err.kind() == io::ErrorKind::UnexpectedEof {
            Error::UnexpectedEof(what.to_string())
        } else {
            Error::Io(err)
        }
    }
}
