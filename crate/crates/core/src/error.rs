use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter `{key}`: {reason}")]
    InvalidParam { key: &'static str, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    /// Adaptive quadrature ran out of subdivisions before meeting its tolerance.
    #[error("quadrature did not converge: estimate {estimate:e}, error bound {error:e}")]
    Quadrature { estimate: f64, error: f64 },

    /// Fixed-point iteration exhausted its budget. `trace` holds every iterate.
    #[error("fixed-point iteration did not converge after {iters} iterations (last {last:e})")]
    FixedPoint {
        iters: usize,
        last: f64,
        trace: Vec<f64>,
    },

    #[error("iteration diverged (non-finite value) at iteration {iter}")]
    Divergence { iter: usize },

    #[error("matrix is numerically singular (condition number {cond:e})")]
    Singular { cond: f64 },

    #[error("no root: {0}")]
    NoRoot(String),

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn param(key: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            key,
            reason: reason.into(),
        }
    }

    /// Wraps the error with a description of where it happened.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
