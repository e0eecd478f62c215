use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid field spec: {field}: {reason}")]
    InvalidSpec { field: String, reason: String },
    #[error("grid error: {0}")]
    Grid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("conjugate gradients did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },
    #[error("inconsistent right-hand side: {0}")]
    Consistency(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing cache entry: {0}")]
    MissingCache(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
