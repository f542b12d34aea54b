use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("quadrature did not converge: estimated relative error {achieved:.3e} exceeds {tolerance:.1e}")]
    Quadrature { achieved: f64, tolerance: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{invalid} of {total} paths became non-finite (limit is 0.1%)")]
    InvalidPaths { invalid: usize, total: usize },

    #[error("training diverged at step {step}; last finite loss {last_finite_loss:.6e}")]
    Divergence { step: usize, last_finite_loss: f64 },

    #[error("fixed-point iteration at step {step} did not converge; residual {residual:.3e}")]
    FixedPoint { step: usize, residual: f64 },

    #[error("time index {index} out of range 0..={last}")]
    IndexOutOfRange { index: usize, last: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
