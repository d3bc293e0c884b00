use thiserror::Error;

/// Errors raised across the feasibility-projection toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("case file is missing table `{0}`")]
    MissingTable(String),
    #[error("malformed row in table `{table}` at line {line}: {reason}")]
    MalformedRow {
        table: String,
        line: usize,
        reason: String,
    },
    #[error("reference to unknown bus {0}")]
    UnknownBusReference(i64),
    #[error("case declares more than one slack bus")]
    MultipleSlackBuses,
    #[error("case declares no slack bus")]
    NoSlackBus,
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),
    #[error("perturbation empties the box of {what}: min {min} > max {max}")]
    ResultingEmptyBox { what: String, min: f64, max: f64 },
    #[error("i/o failure: {0}")]
    IoFailure(String),
    #[error("branch {0} has zero series impedance")]
    ZeroImpedanceBranch(usize),
    #[error("inconsistent dimensions: {0}")]
    InconsistentDimensions(String),
    #[error("problem has no slack segment")]
    NoSlackSegment,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value encountered in {0}")]
    NonFiniteEncountered(String),
    #[error("linear algebra failure: {0}")]
    LinearAlgebraFailure(String),
    #[error("iteration limit reached after {0} iterations")]
    IterationLimit(usize),
    #[error("problem exceeds the dense solver limit: {0}")]
    ResourceLimit(String),
    #[error("relaxation has not been solved to optimality")]
    NotSolved,
    #[error("Newton iteration diverged: {0}")]
    Divergence(String),
    #[error("stage report carries no point")]
    PointUnavailable,
    #[error("invalid options: {0}")]
    InvalidOptions(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::IoFailure(e.to_string())
    }
}
