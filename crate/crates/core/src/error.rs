//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
///
/// Numerical routines reject bad inputs eagerly (NaN/Inf, dimension
/// mismatches) instead of propagating poisoned values; a diverged AMP run
/// fails loudly with the iteration attached.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("numerical failure{}: {context}", iteration.map(|t| format!(" at iteration {t}")).unwrap_or_default())]
    NumericalFailure {
        context: String,
        iteration: Option<usize>,
    },

    #[error("invalid ensemble spec: {0}")]
    InvalidSpec(String),

    #[error("rank-deficient system: {0}")]
    RankDeficient(String),

    #[error("inconsistent constraints: {0}")]
    InconsistentConstraints(String),

    #[error("controlled bound violated: {0}")]
    BoundViolation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn numerical(context: impl Into<String>) -> Self {
        Error::NumericalFailure {
            context: context.into(),
            iteration: None,
        }
    }

    pub fn numerical_at(context: impl Into<String>, t: usize) -> Self {
        Error::NumericalFailure {
            context: context.into(),
            iteration: Some(t),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
