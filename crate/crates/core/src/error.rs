use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("agent index {index} out of range (have {len} agents)")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("infeasible geometry: {0}")]
    InfeasibleGeometry(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("prediction protocol error: {0}")]
    Protocol(String),
    #[error("prediction samples are stale: {0}")]
    StaleSamples(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
