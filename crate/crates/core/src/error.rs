use thiserror::Error;

/// Errors raised by model evaluation, inference engines and data ingestion.
#[derive(Debug, Error)]
pub enum LsbpError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("degenerate simplex: survivor mass {survivor:e} at component {component}")]
    DegenerateSimplex { component: usize, survivor: f64 },

    #[error("degenerate column: {0}")]
    DegenerateColumn(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("log density underflow at unit {unit}")]
    Underflow { unit: usize },

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<LsbpError>,
    },

    #[error("all {restarts} restarts failed; last error: {last}")]
    AllRestartsFailed { restarts: usize, last: String },

    #[error("ingestion error at row {row}: {message}")]
    Ingestion { row: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LsbpError>;

impl LsbpError {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        LsbpError::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(LsbpError::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
