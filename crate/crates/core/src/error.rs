use thiserror::Error;

/// Errors raised while building, solving or analysing MPC problems.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("partition is not admissible: {}", .0.join("; "))]
    NotAdmissible(Vec<String>),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("beta = 1 with M = {0} subsystems solves the problem without the coupling constraint")]
    InvalidBeta(usize),

    #[error("coupling system D E^-1 D^T is numerically singular (time block {0})")]
    SingularCoupling(usize),

    #[error("constraint matrix has numerical row rank {rank} < {expected}")]
    RankDefect { rank: usize, expected: usize },

    #[error("projected Hessian is not positive definite (smallest eigenvalue {0:e})")]
    NotPositiveDefinite(f64),

    #[error("reference trajectory is zero")]
    ZeroReference,

    #[error("diagonal transform contains a zero entry at index {0}")]
    ZeroScale(usize),

    #[error("separation tendency undefined: rows {0:?} of the link usage are zero")]
    Undefined(Vec<usize>),

    #[error("system generation failed after {0} attempts")]
    GenerationFailed(usize),

    #[error("invalid use case: {0}")]
    InvalidUseCase(String),

    #[error("reference solver did not converge: {0}")]
    OracleNotConverged(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
