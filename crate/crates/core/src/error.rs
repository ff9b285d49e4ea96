//! Crate-wide error type. Numeric kernels return typed errors at operator
//! boundaries; plain shape bugs inside a kernel are programmer errors and
//! use asserts instead.

use std::fmt;
use std::io;
use std::path::PathBuf;

#[derive(Debug)]
pub enum Error {
    /// An operator was handed data whose shape disagrees with its own.
    ShapeMismatch {
        op: String,
        expected: String,
        got: String,
    },
    /// A scalar or structural parameter is outside its legal range.
    InvalidParameter { name: String, detail: String },
    /// A non-finite value appeared in the iteration state.
    NonFinite { iteration: usize, what: String },
    /// A normalization reference has zero norm.
    DegenerateReference(String),
    /// Random placement could not satisfy the non-overlap constraint.
    PlacementFailed { requested: usize, achieved: usize },
    /// An external denoiser process misbehaved.
    Plugin(String),
    /// File content violates its format contract.
    Format { path: PathBuf, detail: String },
    Io { path: PathBuf, source: io::Error },
    /// Invariant the library itself must uphold was violated.
    Internal(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, expected, got } => {
                write!(f, "{op}: shape mismatch, expected {expected}, got {got}")
            }
            Error::InvalidParameter { name, detail } => {
                write!(f, "invalid parameter {name}: {detail}")
            }
            Error::NonFinite { iteration, what } => {
                write!(f, "non-finite values in {what} at iteration {iteration}")
            }
            Error::DegenerateReference(what) => {
                write!(f, "degenerate zero-norm reference: {what}")
            }
            Error::PlacementFailed {
                requested,
                achieved,
            } => write!(
                f,
                "could not place {requested} non-overlapping shapes (placed {achieved})"
            ),
            Error::Plugin(msg) => write!(f, "external denoiser: {msg}"),
            Error::Format { path, detail } => {
                write!(f, "{}: {detail}", path.display())
            }
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Internal(msg) => write!(f, "internal invariant violated: {msg}"),
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

pub(crate) fn io_err(path: impl Into<PathBuf>, source: io::Error) -> Error {
    Error::Io {
        path: path.into(),
        source,
    }
}

pub(crate) fn bad_param(name: &str, detail: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name: name.to_string(),
        detail: detail.into(),
    }
}
