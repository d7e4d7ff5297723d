use thiserror::Error;

/// Rejected model construction or model evaluation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("non-finite driver input at t={t}, y={y}")]
    NonFinite { t: f64, y: f64 },
}

impl ModelError {
    pub fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        ModelError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

/// Failures of the simulation, Monte Carlo and finite-difference solvers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite state at path {path}, step {step}")]
    NonFiniteState { path: usize, step: usize },
    #[error("unsupported input: {0}")]
    Unsupported(String),
    #[error("Picard iteration diverged: sup-norm delta grew for 3 consecutive iterations (iteration {iteration}, delta {delta:e})")]
    Diverged { iteration: usize, delta: f64 },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl SolverError {
    pub fn unsupported(msg: impl Into<String>) -> Self {
        SolverError::Unsupported(msg.into())
    }
}
