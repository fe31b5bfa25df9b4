//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible for an operation.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Axis argument outside a tensor's rank.
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    /// API misuse: violated call contract (non-scalar backward root,
    /// consumed tape, N < 2 document sets, empty decode prefix, ...).
    #[error("usage: {0}")]
    Usage(String),

    /// Numerically degenerate input (all-pad target, empty summary, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Corpus ingestion failure.
    #[error("ingest: {path}:{line}: {msg}")]
    Ingest {
        path: String,
        line: usize,
        msg: String,
    },

    /// Bad run configuration or objective selection.
    #[error("config: {0}")]
    Config(String),

    /// Training diverged; the last on-schedule checkpoint is kept.
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: u64, what: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code for the CLI: 2 for usage/config problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Error {
        Error::Usage(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Error {
        Error::Config(msg.into())
    }
}
