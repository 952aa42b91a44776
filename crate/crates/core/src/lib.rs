//! Derivative-free Gauss-Newton trust-region solver for nonlinear least
//! squares `min ½‖r(x)‖²`, with optional bounds, plus the test problems and
//! profile tooling used to benchmark it.

pub mod error;
pub mod interp;
pub mod models;
pub mod problems;
pub mod profiles;
pub mod solver;
pub mod subproblems;

pub use error::{Error, Result};
pub use interp::{GeometrySnapshot, InterpolationSet, LagrangeBasis};
pub use models::{build_objective_model, ObjectiveModel, ResidualModel};
pub use problems::{evaluate, objective, problem_by_id, EvalBudget, NoiseKind, NoiseSpec, Problem};
pub use profiles::{EvalLog, EvalRecord, Np, ProfileKind, ProfileTable};
pub use solver::{solve, IterationKind, IterationRecord, Mode, SolveResult, SolverConfig, Termination};
