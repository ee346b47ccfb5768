use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward() requires a scalar root, got shape {0:?}")]
    NonScalarRoot((usize, usize)),

    #[error("loss function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("fixed-point iteration did not converge after {iters} iterations (residual ratios: {ratios:?})")]
    Divergence { iters: usize, ratios: Vec<f64> },

    #[error("zero feature vector at row {row}")]
    ZeroRow { row: usize },

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite; parameter norms: {norms}")]
    NanLoss { epoch: usize, step: usize, norms: String },

    #[error("{context}: malformed input at byte offset {offset}: {message}")]
    Format {
        context: String,
        offset: u64,
        message: String,
    },

    #[error("{context}: truncated, expected {expected} bytes but found {actual}")]
    Truncated {
        context: String,
        expected: u64,
        actual: u64,
    },

    #[error("{context}: line {line}: {message}")]
    Line {
        context: String,
        line: usize,
        message: String,
    },

    #[error("{context}: line {line}: unknown label {label:?}")]
    UnknownLabel {
        context: String,
        line: usize,
        label: String,
    },

    #[error("{context}: line {line}: image id {id:?} is not present in the feature file")]
    MissingId { context: String, line: usize, id: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("tensor {name:?}: expected shape {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The OS error is part of the message rather than a source, so
    /// reporters that walk the chain do not print it twice.
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
