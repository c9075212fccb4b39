//! Constrained weight tuning for the regression scorers.
//!
//! The objective is the pair-sum
//!
//! ```text
//! sum_{(i,j) in P x P} (AQI_i - AQI_j)^2  -  gamma * sum_{(i,j) in P x N} (AQI_i - AQI_j)^2
//! ```
//!
//! which is a quadratic form `w' Q w` in the flattened weights. `P x P` runs
//! over ordered pairs (every unordered pair counts twice, self-pairs add
//! zero). `Q` is indefinite in general, so [`solve`] runs a seeded
//! multi-start projected gradient method and keeps the best local solution.
//!
//! Feasible weights lie in the intersection of the bounded simplex, the
//! rank-ordering chain (M1 only) and the half-space
//! `(mean_P(phi) - mean_N(phi)) . w >= 0`; see [`project`].

mod assemble;
mod project;
mod solve;

pub use assemble::{assemble, assemble_from_basis, default_gamma, QuadraticForm};
pub use project::{
    check_feasibility, pava_nonincreasing, project, project_bounded_simplex, project_halfspace,
    ConstraintResiduals, ConstraintSet,
};
pub use solve::{fit, solve, FitOptions, FitOutcome, OptimizerConfig, SolveResult, SolveStatus, StartTrace};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("cohort class `{0}` is empty")]
    EmptyClass(&'static str),
    #[error("infeasible constraints: {0}")]
    InfeasibleConstraints(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid optimizer configuration: {0}")]
    BadConfig(String),
}
