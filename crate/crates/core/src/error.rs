use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("training stopped at {best_accuracy:.4} validation accuracy (target {target:.2})")]
    BelowTarget { best_accuracy: f64, target: f64 },

    #[error("sequence of length {len} exceeds the exhaustive search limit of {limit}")]
    TooLong { len: usize, limit: usize },

    #[error("missing input: {}", .0.display())]
    Missing(PathBuf),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status: 1 for problems with the caller's input, 2 for
    /// failures inside the computation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_)
            | Error::Checkpoint(_)
            | Error::TensorShape { .. }
            | Error::TooLong { .. }
            | Error::Missing(_)
            | Error::Parse { .. }
            | Error::Json(_) => 1,
            Error::Shape { .. } | Error::NonScalar(_) | Error::Diverged { .. } | Error::BelowTarget { .. } | Error::Io(_) => 2,
        }
    }
}
