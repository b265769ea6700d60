use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("oracle quadrature did not converge (error estimate {estimate:e})")]
    OracleFailure { estimate: f64 },
    #[error("divergent tail: {0}")]
    DivergentTail(String),
    #[error("missing tail: {0}")]
    MissingTail(String),
    #[error("exponential overflow at node {node} (4u = {value})")]
    BlowUp { node: usize, value: f64 },
    #[error("malformed input: {0}")]
    Parse(String),
    #[error("experiment failed: {0}")]
    Experiment(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
