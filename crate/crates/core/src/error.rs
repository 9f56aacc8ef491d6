use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("matrix is singular")]
    Singular,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid correlation {0}: must lie in [0, 1)")]
    InvalidCorrelation(f64),

    #[error("random spreading matrix stayed rank deficient after {0} draws")]
    RankDeficient(usize),

    #[error("covariance is singular")]
    SingularCovariance,

    #[error("degenerate prior for user {user}: 1 - alpha = {value}")]
    DegeneratePrior { user: usize, value: f64 },

    #[error("value outside the open interval (-1, 1) at index {0}")]
    DomainError(usize),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("enumeration over {0} users exceeds the oracle limit")]
    TooLarge(usize),

    #[error("invalid code: {0}")]
    InvalidCode(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
