//! Error types shared across the estimation pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Mis-wired model or mismatched dimensions.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid data or arguments (non-increasing times, empty population, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Unknown model or resource name.
    #[error("unknown name: {0}")]
    Lookup(String),

    /// A matrix that must be inverted is numerically singular.
    #[error("ill-conditioned {what}: condition number {condition:.3e} exceeds {limit:.1e}")]
    IllConditioned {
        what: String,
        condition: f64,
        limit: f64,
    },

    /// Iterative solver hit its iteration cap before meeting the tolerances.
    #[error(
        "no convergence after {iterations} iterations \
         (trajectory delta {traj_delta:.3e}, cost delta {cost_delta:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        traj_delta: f64,
        cost_delta: f64,
    },

    /// Overflow or other unrecoverable floating-point failure.
    #[error("numerical error: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
