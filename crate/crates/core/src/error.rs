use thiserror::Error;

/// Errors surfaced by the reward-inference toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a precondition (dimension mismatch, bad config, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numerical routine failed (factorisation, non-convergence of a solve).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A model fit diverged or failed to converge. Carries the last iterate
    /// so callers can inspect what the optimiser was doing.
    #[error("fit failed after {iterations} iterations: {message} (last objective {last_objective})")]
    Fit {
        message: String,
        iterations: usize,
        last_objective: f64,
        last_iterate: Vec<f64>,
    },

    /// Neural training produced a non-finite loss.
    #[error("training diverged at step {step}: {message}")]
    Training { message: String, step: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
