use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Malformed or inconsistent input data.
    Data,
    /// Degeneracy, knife-edge or non-convergence in a numeric routine.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid market parameters: {0}")]
    InvalidMarket(String),

    #[error("cutoff {value} for school {school} is outside [0, 1]")]
    Domain { school: usize, value: f64 },

    #[error("dimension mismatch: expected {expected} entries, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("school {school} has unclipped equilibrium cutoff {value:e}, within {tol:e} of zero; derivative undefined")]
    KnifeEdge { school: usize, value: f64, tol: f64 },

    #[error("inverse recursion degenerate at school {school}: {reason}")]
    Degenerate { school: usize, reason: String },

    #[error("target demand {target} exceeds the maximum achievable demand {max}")]
    Infeasible { target: f64, max: f64 },

    #[error("observation inconsistent with the model: {0}")]
    Observation(String),

    #[error("line {line}: {message}")]
    Data { line: u64, message: String },

    #[error("numeric check failed: {0}")]
    Numeric(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::KnifeEdge { .. }
            | Error::Degenerate { .. }
            | Error::Infeasible { .. }
            | Error::Numeric(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}
