use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Inputs failed structural validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// The requested operation is not available for this input.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// The Riccati solution grew past the configured cap.
    #[error("Riccati blow-up at node {node} (t = {time}): |psi| = {norm:e} exceeds cap {cap:e}")]
    BlowUp {
        node: usize,
        time: f64,
        norm: f64,
        cap: f64,
    },

    /// A fixed-point iteration did not settle within its iteration budget.
    #[error("fixed-point iteration did not converge at node {node} after {iterations} iterations (last update {last_update:e})")]
    NoConvergence {
        node: usize,
        iterations: usize,
        last_update: f64,
    },

    /// Parameters rejected by an admissibility check.
    #[error("rejected parameters: {0}")]
    RejectedParameters(String),

    /// A computed quantity violated a property it must satisfy.
    #[error("numerical violation: {0}")]
    NumericalViolation(String),

    /// The state left the state space so that a(s, x) is not positive semidefinite.
    #[error("state-space violation: smallest eigenvalue {min_eigenvalue:e} of a(s, x) at s = {time}")]
    StateSpace { time: f64, min_eigenvalue: f64 },

    /// A simulated path produced a non-finite value.
    #[error("simulation failure on path {path} at step {step}: {reason}")]
    SimulationFailure {
        path: usize,
        step: usize,
        reason: String,
    },

    /// Two routes to the same quantity disagree.
    #[error("internal consistency error: {0}")]
    Consistency(String),

    /// Fourier inversion failed.
    #[error("pricing error: {0}")]
    Pricing(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
