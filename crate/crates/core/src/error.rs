use thiserror::Error;

/// Failures surfaced by the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("unknown problem id `{0}`")]
    UnknownProblem(String),
    #[error("evaluation budget exhausted")]
    BudgetExhausted,
    #[error("residual evaluation returned a non-finite value")]
    EvalFailure,
    #[error("interpolation geometry is degenerate")]
    DegenerateGeometry,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("profile input: {0}")]
    Profile(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
