//! Error type shared by every module in the crate.

use std::fmt;
use std::io;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor math, dataset handling, models, attacks and the
/// evaluation harness.
#[derive(Debug)]
pub enum Error {
    /// Two operands had shapes an operation cannot combine.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A tensor had the wrong shape for the requested operation.
    BadShape { op: &'static str, detail: String },
    /// An argument was outside its documented domain.
    InvalidArgument(String),
    /// Gradient bookkeeping failed (non-scalar backward, missing grads, ...).
    Autograd(String),
    /// Input that must be finite contained NaN or infinity.
    NonFinite { context: String },
    /// A numeric procedure failed to produce a usable result.
    Numerical(String),
    /// Dataset generation or loading failed.
    Dataset(String),
    /// Model construction, training or checkpointing failed.
    Model(String),
    /// An attack could not run with the given configuration.
    Attack(String),
    /// Detector state missing or inconsistent.
    Detector(String),
    /// File or directory I/O failure, with the path that caused it.
    Io { path: String, source: io::Error },
    /// A serialized artifact (FGT1 tensor, JSON, CSV) failed to parse.
    Format { path: String, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            Error::BadShape { op, detail } => write!(f, "{op}: {detail}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Autograd(msg) => write!(f, "autograd: {msg}"),
            Error::NonFinite { context } => write!(f, "non-finite values in {context}"),
            Error::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            Error::Dataset(msg) => write!(f, "dataset: {msg}"),
            Error::Model(msg) => write!(f, "model: {msg}"),
            Error::Attack(msg) => write!(f, "attack: {msg}"),
            Error::Detector(msg) => write!(f, "detector: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
            Error::Format { path, detail } => write!(f, "bad format in {path}: {detail}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
