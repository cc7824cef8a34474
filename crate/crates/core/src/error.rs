use thiserror::Error;

use crate::model::Weights;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("majorization precondition violated: {0}")]
    Majorization(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Gradient descent produced a non-finite value or blew up. Carries the
    /// last iterate at which everything was still finite.
    #[error("diverged at iteration {iteration}")]
    Divergence {
        iteration: u64,
        last_finite: Box<Weights>,
    },

    #[error("fit failed: {msg}")]
    Fit {
        msg: String,
        /// Best parameters seen before giving up, if any start produced one.
        best: Option<Vec<f64>>,
    },

    #[error("ill-conditioned input: {0}")]
    Conditioning(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
