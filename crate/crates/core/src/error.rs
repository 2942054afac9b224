//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by corpus parsing, model I/O, and numerical routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at {path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },

    #[error("unsupported corpus schema `{0}`")]
    UnknownSchema(String),

    #[error("{0}")]
    InvalidCorpus(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unknown label `{label}` at {path}:{line}")]
    UnknownLabel {
        label: String,
        path: String,
        line: usize,
    },

    #[error("model file parse error in {path}: {message}")]
    ModelParse { path: String, message: String },

    #[error("model format version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("non-finite value while evaluating thread `{thread}` (event {event}): {what}")]
    NonFinite {
        thread: String,
        event: usize,
        what: String,
    },

    #[error("{0}")]
    InvalidParams(String),

    #[error("Monte Carlo configuration required for the neural-kernel compensator")]
    McRequired,

    #[error("simulation spec unstable: spectral radius of the branching matrix is {0:.6} >= 1")]
    Unstable(f64),

    #[error("{0}")]
    Eval(String),
}

pub type Result<T> = std::result::Result<T, Error>;
