use thiserror::Error;

/// Errors raised by the modelling library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("matrix is not positive definite (leading minor {minor}, variable {variable})")]
    NotPositiveDefinite { minor: usize, variable: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite linear predictor at observation {index}")]
    NonFinitePredictor { index: usize },

    #[error("inner optimisation failed after {iterations} iterations: {reason}")]
    InnerNewton {
        iterations: usize,
        reason: String,
        trace: Vec<f64>,
    },

    #[error("hyperparameter optimisation did not converge after {evaluations} evaluations (best log posterior {best})")]
    OuterNotConverged { evaluations: usize, best: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// True when the failure is numerical rather than caused by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::Numerical(_)
                | Error::NonFinitePredictor { .. }
                | Error::InnerNewton { .. }
                | Error::OuterNotConverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
