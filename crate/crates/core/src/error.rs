use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A value violated the covariate schema (unknown label, wrong kind, ...).
    #[error("schema violation at row {row}, column '{column}': {message}")]
    SchemaViolation {
        row: usize,
        column: String,
        message: String,
    },

    /// Malformed or out-of-range input that is not a schema problem.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Matrix/vector dimensions do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// A numerical routine failed (singular matrix, zero matrix, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Backtracking found no step with any decrease.
    #[error("line search stalled: no descent direction after {halvings} halvings")]
    LineSearchStall { halvings: usize },

    /// Tracer probes must be registered before the solve starts.
    #[error("tracer contract violated: probes must be supplied before solving")]
    TracerContract,

    /// Model file problems: version mismatch, missing fields, hash mismatch.
    #[error("model error: {0}")]
    Model(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
