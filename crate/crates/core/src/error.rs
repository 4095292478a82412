use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    /// The residual-map Jacobian is numerically singular; the point is
    /// (close to) nondifferentiable.
    #[error("singular residual Jacobian (condition estimate {cond:.3e})")]
    SingularJacobian { cond: f64 },

    #[error("zero transport cost on an optimal-plan pair (p = 1)")]
    ZeroCost,

    #[error("matrix square root is rank deficient (min eigenvalue {min_eig:.3e})")]
    SingularSqrt { min_eig: f64 },

    #[error("Lyapunov pencil is singular (min eigenvalue sum {min_sum:.3e})")]
    SingularPencil { min_sum: f64 },

    #[error("matrix is not symmetric (asymmetry {asym:.3e})")]
    NonSymmetric { asym: f64 },

    #[error("ambiguity radius is zero")]
    ZeroRadius,

    #[error("conic solver finished with status {status:?} after {iterations} iterations")]
    SolverFailed {
        status: crate::conic_solver::SolveStatus,
        iterations: usize,
    },

    #[error("transport simplex did not terminate within {0} pivots")]
    TransportStalled(usize),

    #[error("training aborted at iteration {iter}: {reason}")]
    Training { iter: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
