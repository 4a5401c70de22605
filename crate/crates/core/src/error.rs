use thiserror::Error;

use crate::model::CompositionField;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("linear solver stopped after {iterations} iterations with relative residual {residual:.3e}")]
    LinearSolver { iterations: usize, residual: f64 },

    #[error("entropy minimization failed after {} iterations: {} (optimality residual {:.3e})", .0.iterations, .0.reason, .0.residual)]
    Minimizer(Box<MinimizerFailure>),

    #[error("time step did not converge after {} iterations: gap {:.3e}; retry with tau <= {:.3e}", .0.iterations, .0.gap, .0.suggested_tau)]
    FixedPoint(Box<FixedPointFailure>),

    #[error("invariant violated at step {step}: {what}")]
    Invariant { step: usize, what: String },

    #[error("config error{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config { line: Option<usize>, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True for failures of the numerical solvers, as opposed to bad input
    /// or violated invariants.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::LinearSolver { .. } | Error::Minimizer(_) | Error::FixedPoint(_)
        )
    }
}

/// Best iterate reached by the entropy minimizer before it gave up.
#[derive(Debug, Clone)]
pub struct MinimizerFailure {
    pub best: CompositionField,
    pub residual: f64,
    pub iterations: usize,
    pub reason: String,
}

/// Best iterate reached by a time step before it gave up.
#[derive(Debug, Clone)]
pub struct FixedPointFailure {
    pub best: CompositionField,
    pub gap: f64,
    pub iterations: usize,
    pub suggested_tau: f64,
}
