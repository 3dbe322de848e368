use thiserror::Error;

use crate::mdp::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed argument: wrong dimension, index out of range, bad parameter.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid MDP: {0}")]
    InvalidMdp(ValidationReport),

    /// A value outside the domain of a mathematical operation (e.g. KL without
    /// absolute continuity).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("{count} deterministic policies exceed the enumeration cap of {cap}; use the linear solver or sampling instead")]
    EnumerationCap { count: String, cap: usize },

    #[error("linear program failed: {0}")]
    Lp(String),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
