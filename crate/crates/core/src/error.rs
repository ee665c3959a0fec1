use thiserror::Error;

/// Errors raised while building models or running experiments.
#[derive(Debug, Error)]
pub enum Error {
    /// A model or configuration violates one of its structural invariants.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// The step size is larger than the self-weight of some agent.
    #[error("step size {alpha} exceeds self-weight {self_weight} of agent {agent}")]
    StepSize {
        agent: usize,
        alpha: f64,
        self_weight: f64,
    },

    /// The communication graph is not connected.
    #[error("graph is disconnected: {0}")]
    Disconnected(String),

    /// The observation chain is not irreducible and aperiodic.
    #[error("chain is not ergodic: {0}")]
    NotErgodic(String),

    /// An iterative routine hit its iteration cap.
    #[error("{what} did not converge within {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
