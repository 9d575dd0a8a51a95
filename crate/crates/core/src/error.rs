use thiserror::Error;

/// Errors surfaced by the solver and verification toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum KfpError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("linear solve did not converge after {iterations} iterations (relative residual {residual:e}, tolerance {tol:e})")]
    SolverDivergence {
        iterations: usize,
        residual: f64,
        tol: f64,
    },

    #[error("degenerate solution: {0}")]
    DegenerateSolution(String),

    #[error("{context}: {source}")]
    Indexed {
        context: String,
        #[source]
        source: Box<KfpError>,
    },

    #[error("i/o: {0}")]
    Io(String),

    #[error("format: {0}")]
    Format(String),
}

impl KfpError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        KfpError::InvalidArgument(msg.into())
    }

    /// True when the error (or the error it wraps) is a linear-solver divergence.
    pub fn is_divergence(&self) -> bool {
        match self {
            KfpError::SolverDivergence { .. } => true,
            KfpError::Indexed { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}

impl From<std::io::Error> for KfpError {
    fn from(e: std::io::Error) -> Self {
        KfpError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, KfpError>;
