//! Alternating convex minimization of the clear-sky objective with the
//! bootstrap degradation update.
//!
//! Each sweep solves the right step (weights `R` and β jointly, left fixed)
//! and then the left step (basis `L`, right fixed), after which the
//! denominators `d_prev` are refreshed from the current daily energies and
//! `γ = 1 + β` is carried into the yearly persistence term.

mod fit;
mod init;
mod ipm;
pub mod sparse;
mod steps;
pub mod subsolve;

pub use fit::{fit, FitError, FitResult, RejectReason, TracePoint};
pub use init::initialize;
pub use steps::{solve_left_step, solve_right_step, LeftStep, RightStep, StepReport};
pub use subsolve::{
    convex_subsolve, ConvexSubproblem, EqualityConstraints, PinballTerms, Solution, SubsolveError,
    Method, SubsolveSettings, WarmStart,
};

use crate::model::ModelError;

#[derive(Debug, Clone, thiserror::Error)]
pub enum SolverError {
    #[error("rank {k} exceeds min(m, n) = {max}")]
    RankTooLarge { k: usize, max: usize },
    #[error("subproblem infeasible (constraint residual {residual:.3e})")]
    SubproblemInfeasible { residual: f64 },
    #[error("subproblem did not reach tolerance within {iterations} iterations")]
    SolverStall { iterations: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("subproblem rejected: {0}")]
    Invalid(String),
}

impl From<SubsolveError> for SolverError {
    fn from(e: SubsolveError) -> Self {
        match e {
            SubsolveError::Infeasible { residual } => Self::SubproblemInfeasible { residual },
            SubsolveError::MaxIterations(sol) => Self::SolverStall {
                iterations: sol.iterations,
            },
            SubsolveError::InvalidProblem(msg) => Self::Invalid(msg),
            SubsolveError::Factorization(f) => Self::Invalid(f.to_string()),
        }
    }
}
