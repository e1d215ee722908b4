use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is singular (|det| = {det:e})")]
    Singular { det: f64 },

    /// Cholesky failed: the damped curvature is not positive definite.
    #[error("matrix is not positive definite (pivot {pivot} = {value:e}); increase damping")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("format error in {field}: {msg}")]
    Format { field: &'static str, msg: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
