//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    /// Input failed a structural or value-range check.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Operand shapes do not conform.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A matrix required to be invertible is singular or near-singular.
    /// Carries the reciprocal condition estimate that tripped the check.
    #[error("singular matrix (reciprocal condition estimate {rcond:.3e})")]
    Singular { rcond: f64 },

    /// An iterative computation did not converge within its iteration cap.
    #[error("{what} did not converge within {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },
}
