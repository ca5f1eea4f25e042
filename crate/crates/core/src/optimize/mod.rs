//! Solvers for the assignment problem.

pub mod deterministic;
pub mod lp;
pub mod prox;
pub mod stochastic;

pub use deterministic::{saa_solve, saa_solve_with, LpMethod, LpSolution, SolutionStatus};
pub use prox::ProxKind;
pub use stochastic::{estimate_constraints, mcsa_solve, McsaConfig, McsaSolution, McsaTrace, Sampler, StepSize};
