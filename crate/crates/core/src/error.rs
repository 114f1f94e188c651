use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{context}: row {row}: {message}")]
    BadRow { context: String, row: usize, message: String },
    #[error("self-loop on unit '{0}'")]
    SelfLoop(String),
    #[error("constant covariate '{0}'")]
    ConstantCovariate(String),
    #[error("missing value in covariate '{column}' for unit '{unit}'")]
    MissingValue { unit: String, column: String },
    #[error("{0}")]
    Validation(String),
    #[error("Newton iterations did not converge after {iters} steps (gradient norm {grad_norm:e}); objective trajectory: {trajectory:?}")]
    Divergence { iters: usize, grad_norm: f64, trajectory: Vec<f64> },
    #[error("non-finite linear predictor: {0}")]
    NonFinite(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("hyperparameter search did not converge; best point {best:?} with log posterior {value}")]
    OptimizerFailed { best: Vec<f64>, value: f64 },
    #[error("single-class labels")]
    SingleClass,
    #[error("box too small: {0:.3e} of the mass lies on the boundary")]
    BoxTooSmall(f64),
}

impl Error {
    /// Input/validation problems as opposed to numerical breakdowns.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Divergence { .. }
                | Error::NonFinite(_)
                | Error::Numeric(_)
                | Error::OptimizerFailed { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv { path: path.into(), source }
    }
}

impl From<crate::sparse::NotPositiveDefinite> for Error {
    fn from(e: crate::sparse::NotPositiveDefinite) -> Self {
        Error::Numeric(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
