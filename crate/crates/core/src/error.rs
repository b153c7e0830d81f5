use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("position ({x}, {y}) lies outside the unit workspace")]
    Domain { x: f64, y: f64 },

    #[error("argument error: {0}")]
    Argument(String),

    /// Cholesky factorization kept failing after the jitter reached its cap.
    #[error("factorization failed with jitter {jitter:e} (n = {size}, max diagonal {max_diag:e})")]
    Numerical {
        jitter: f64,
        size: usize,
        max_diag: f64,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("instance rejected: {0}")]
    InstanceRejected(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
