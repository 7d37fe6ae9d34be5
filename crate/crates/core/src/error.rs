use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FsaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FsaError {
    /// A cell could not be read as a finite number. `row` is the 1-based line
    /// number in the file, `column` the header name (or index).
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    /// A caller broke an operation's precondition (dimension mismatch, a keep
    /// set outside the active positions, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(
        "training diverged at iteration {iteration}: loss {loss:.6e} exceeds 1e3 x initial \
         loss {initial:.6e} with eta = {eta}; {}",
        step_hint(*.bound)
    )]
    Diverged {
        iteration: usize,
        loss: f64,
        initial: f64,
        eta: f64,
        /// Largest step allowed by the spectral-norm convergence bound, when
        /// one is known for the loss.
        bound: Option<f64>,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

fn step_hint(bound: Option<f64>) -> String {
    match bound {
        Some(b) => format!(
            "convergence is only guaranteed for eta < {b:.6e} \
             (4/||X||_2^2 for logistic, 1/||X||_2^2 for squared error, scaled by the objective)"
        ),
        None => "reduce eta".to_string(),
    }
}

impl FsaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FsaError::Io {
            path: path.into(),
            source,
        }
    }
}
