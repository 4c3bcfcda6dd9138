use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The data cannot support the requested estimate (empty arm, degenerate sample, ...).
    #[error("estimation error: {0}")]
    Estimation(String),

    /// The Sinkhorn iterations did not reach the requested tolerance.
    #[error("no convergence after {iterations} iterations (marginal residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    /// The requested path is not handled by this routine.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A quantity that must be finite was not.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A gradient-flow step broke monotonicity of the transport map.
    #[error("flow step of size {dt} broke monotonicity of the map at grid index {index}")]
    StepTooLarge { dt: f64, index: usize },

    /// Malformed input record.
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
