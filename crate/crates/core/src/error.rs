use thiserror::Error;

/// Errors raised by the learnreg numerical kernels.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("conductivity must be positive, found {value} at control {index}")]
    Ellipticity { index: usize, value: f64 },

    #[error("mesh mismatch: {0}")]
    MeshMismatch(String),

    #[error("precondition violated: {0}")]
    Precondition(&'static str),

    #[error("{stage}: no strict decrease after {halvings} step halvings")]
    Stagnation { stage: &'static str, halvings: u32 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("inner solve did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
