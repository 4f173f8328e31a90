use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("node {0} has zero degree")]
    ZeroDegree(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is singular")]
    Singular,

    #[error("transfer function undefined at eigenvalue {0}")]
    FilterPole(f64),

    #[error("power iteration did not converge after {iterations} iterations (last estimates {previous:e}, {last:e})")]
    PowerIteration {
        iterations: usize,
        previous: f64,
        last: f64,
    },

    #[error("splitting iteration did not converge within {max_iter} steps (relative residual {residual:e})")]
    NotConverged {
        max_iter: usize,
        residual: f64,
        trace: Box<crate::splitting::IterationTrace<f64>>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
