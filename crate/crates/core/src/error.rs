use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("iteration diverged at step {iteration}: residual grew from {from:.6e} to {to:.6e}")]
    Divergence { iteration: usize, from: f64, to: f64 },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("edge fit did not converge after {iterations} iterations (residual {residual:.6e})")]
    Fit { iterations: usize, residual: f64 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("training failed at step {step}: {source}")]
    Training {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True for failures caused by non-finite values or unstable iterations.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numeric(_) | Error::Divergence { .. } | Error::Fit { .. } => true,
            Error::Training { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
