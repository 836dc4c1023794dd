use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("dimension mismatch: expected {expected}, found {found} ({context})")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: &'static str,
    },
    #[error("index {index} out of range 0..={max}")]
    OutOfRange { index: usize, max: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("vector is not of unit norm (norm = {0})")]
    NonUnit(f64),
    #[error("operator norm {0} exceeds 1")]
    NotAContraction(f64),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("predictable step process is not adapted: {0}")]
    NotAdapted(String),
    #[error("predicates of interval {interval} selected {selected} branches (need exactly one)")]
    PredicateNotExhaustive { interval: usize, selected: usize },
    #[error(
        "random streams collide: the decoupled copy needs a stream independent of the original"
    )]
    StreamCollision,
    #[error("jump sample has {points} points, at least {required} needed")]
    InsufficientSupport { points: usize, required: usize },
    #[error("no convergence within {0} dyadic refinements")]
    NonConvergence(u32),
}

pub type Result<T> = std::result::Result<T, CoreError>;
