use thiserror::Error;

/// Errors raised by the estimators, the sampling layer and the harness.
///
/// The `Display` form always starts with a stable kebab-case tag (see
/// [`Error::code`]) so callers such as the command line tool can surface it.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("model-invalid: {0}")]
    ModelInvalid(String),

    #[error("singular-model: singular value {value:e} at index {index} is below {threshold:e}")]
    SingularModel {
        index: usize,
        value: f64,
        threshold: f64,
    },

    #[error("input: {0}")]
    InvalidInput(String),

    #[error("dimension-mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("rank-out-of-range: rank {rank} not in 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("nonunique-tls: singular gap {gap:e} is not above {threshold:e}")]
    NonuniqueTls { gap: f64, threshold: f64 },

    #[error("degenerate-tls: corrected system matrix is singular (smallest singular value {value:e})")]
    DegenerateTls { value: f64 },

    #[error("insufficient-data: need at least {required} samples, got {actual}")]
    InsufficientData { required: usize, actual: usize },
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::ModelInvalid(_) => "model-invalid",
            Error::SingularModel { .. } => "singular-model",
            Error::InvalidInput(_) => "input",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::RankOutOfRange { .. } => "rank-out-of-range",
            Error::NonuniqueTls { .. } => "nonunique-tls",
            Error::DegenerateTls { .. } => "degenerate-tls",
            Error::InsufficientData { .. } => "insufficient-data",
        }
    }

    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
