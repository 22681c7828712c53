use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("graph error: {0}")]
    GraphError(String),

    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("degenerate categorical distribution: {0}")]
    DegenerateDistribution(String),

    #[error("non-finite objective at trajectory {trajectory:?}: {detail}")]
    NonFiniteObjective {
        trajectory: Option<usize>,
        detail: String,
    },

    #[error("all particle weights are zero")]
    ZeroWeights,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid maneuver specification: {0}")]
    InvalidManeuverSpec(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("archive error: {0}")]
    Archive(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::NotSymmetric(_)
            | Error::NonFiniteObjective { .. }
            | Error::ZeroWeights
            | Error::DegenerateDistribution(_) => 3,
            _ => 2,
        }
    }
}
