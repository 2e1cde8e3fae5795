use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Clone, Error)]
pub enum SvcError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Cholesky factorization hit a non-positive pivot.
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("design matrix is singular or rank deficient")]
    SingularDesign,

    /// Coordinate descent for the weighted lasso ran out of sweeps.
    #[error("lasso did not converge after {sweeps} sweeps")]
    LassoNotConverged { sweeps: usize, last: Vec<f64> },

    /// The projected line search could not find a finite point with sufficient decrease.
    #[error("line search failed: {reason}")]
    LineSearch {
        reason: String,
        best_x: Vec<f64>,
        best_f: f64,
    },

    /// A sub-step of the coordinate descent failed at the given iteration.
    #[error("coordinate descent step {iteration} failed: {source}")]
    CoordinateDescent {
        iteration: usize,
        #[source]
        source: Box<SvcError>,
    },

    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),
}

impl SvcError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SvcError::InvalidArgument(msg.into())
    }

    /// True for failures of the numerical kind (factorizations, non-finite values).
    pub fn is_numerical(&self) -> bool {
        match self {
            SvcError::InvalidArgument(_) => false,
            SvcError::CoordinateDescent { source, .. } => source.is_numerical(),
            _ => true,
        }
    }
}

pub type Result<T> = std::result::Result<T, SvcError>;
