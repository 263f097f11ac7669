use thiserror::Error;

pub type Result<T> = std::result::Result<T, WfError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WfError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid simplex point: {0}")]
    InvalidPoint(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite fitness value at component {0}")]
    NumericRange(usize),

    #[error("degenerate fitness: total fitness {0} is not positive")]
    DegenerateFitness(f64),

    #[error("no interior equilibrium: {0}")]
    NoEquilibrium(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("resource limit: {what} = {requested} exceeds cap {cap}")]
    ResourceLimit {
        what: &'static str,
        requested: u128,
        cap: u128,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for WfError {
    fn from(e: std::io::Error) -> Self {
        WfError::Io(e.to_string())
    }
}

impl From<csv::Error> for WfError {
    fn from(e: csv::Error) -> Self {
        WfError::Io(e.to_string())
    }
}
