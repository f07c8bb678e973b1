use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent grid sizes, layer counts, selections or sources.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {record}: {message}")]
    Load {
        path: PathBuf,
        record: String,
        message: String,
    },

    #[error("{0} out of range")]
    Index(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// The iterative refinement around the sparse factorization stalled.
    #[error("linear solve failed ({context}): relative residual {residual:.3e}")]
    Solver { context: String, residual: f64 },

    /// A system that must be nonsingular has a numerically null direction.
    #[error("singular system ({context}): {detail}")]
    Singular { context: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Prefixes solver and singularity errors with the caller's context.
    pub fn with_context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Solver { context, residual } => Error::Solver {
                context: format!("{ctx}: {context}"),
                residual,
            },
            Error::Singular { context, detail } => Error::Singular {
                context: format!("{ctx}: {context}"),
                detail,
            },
            other => other,
        }
    }
}
