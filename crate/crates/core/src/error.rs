use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),
    #[error("linear system is inconsistent: residual {residual:.3e} exceeds {threshold:.3e}")]
    Inconsistent { residual: f64, threshold: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("sketched system matrix is numerically singular (min pivot {pivot:.3e}); use a nested sketch-and-project inner solver")]
    SingularInnerSystem { pivot: f64 },
    #[error("iteration diverged at k = {iteration}: relative error {rel_error:.3e}")]
    Diverged { iteration: usize, rel_error: f64 },
    #[error("primal-dual correspondence violated at k = {iteration}: deviation {deviation:.3e} > {tolerance:.3e}")]
    CorrespondenceViolation {
        iteration: usize,
        deviation: f64,
        tolerance: f64,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("instance container: {0}")]
    Container(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
