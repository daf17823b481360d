//! Harness error type with process exit-code mapping.

use octrl_core::solver::SolverError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Validation(String),
    #[error("write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("solver: {0}")]
    Solver(SolverError),
    #[error("{context}: no convergence within {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        context: String,
        iterations: usize,
        residual: f64,
    },
}

impl HarnessError {
    /// CLI contract: 2 for configuration and validation problems, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Validation(_) | HarnessError::Io { .. } => 2,
            HarnessError::Solver(SolverError::InvalidParameter(_)) => 2,
            HarnessError::Solver(_) | HarnessError::NonConvergence { .. } => 3,
        }
    }
}

impl From<SolverError> for HarnessError {
    fn from(e: SolverError) -> Self {
        HarnessError::Solver(e)
    }
}
