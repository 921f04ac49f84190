use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("dataset file is empty")]
    EmptyFile,
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("operation not supported for the non-convex model family {0}")]
    Unsupported(&'static str),
    #[error("{what} did not converge within {iterations} iterations")]
    NotConverged { what: &'static str, iterations: usize },
    #[error("non-finite parameters at iteration {iteration} on vehicle {vehicle}")]
    Divergence { iteration: u64, vehicle: usize },
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error("edge-gradient difference missing for edge round {0}")]
    MissingDelta(usize),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        let row = err
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or_default();
        match err.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse {
                row,
                message: format!("{other:?}"),
            },
        }
    }
}
