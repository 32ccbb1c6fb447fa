use thiserror::Error;

/// Errors raised by estimation, tuning and simulation routines.
#[derive(Debug, Error)]
pub enum GaplmError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("singular system: {0}")]
    Singular(String),

    /// The solver hit its iteration cap. `trace` holds the objective value
    /// recorded after every accepted step.
    #[error("no convergence after {iterations} iterations (last objective {:?})", trace.last())]
    Convergence { iterations: usize, trace: Vec<f64> },

    #[error("unsupported operation: {0}")]
    Capability(String),

    #[error("data generation failed: {0}")]
    Generation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, GaplmError>;
