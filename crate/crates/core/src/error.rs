use thiserror::Error;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),

    #[error("time {t} outside of [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },

    /// A non-finite state appeared while integrating.
    #[error("integration diverged at node {node}")]
    Divergence { node: usize },

    #[error("optimal control solve did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    /// The shooting matrix of a linear-quadratic KKT system is singular.
    #[error("degenerate KKT system: shooting matrix is singular")]
    DegenerateKkt,

    /// A monitor left the region where the estimator is well defined.
    #[error("validity exit at node {node}: {monitor} = {value:e}")]
    ValidityExit {
        node: usize,
        monitor: &'static str,
        value: f64,
    },
}

/// `false` for NaN, unlike `x <= 0.0`.
pub(crate) fn is_positive(x: f64) -> bool {
    x > 0.0
}

impl Error {
    pub(crate) fn dim(what: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            what,
            expected,
            found,
        }
    }
}
