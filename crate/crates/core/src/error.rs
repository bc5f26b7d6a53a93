use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{0} decomposition failed to converge")]
    Decomposition(&'static str),

    #[error("problem document: {0}")]
    Schema(String),

    #[error("weight {family} at {index} is asymmetric (max |M - M^T| = {asymmetry:e})")]
    Asymmetric {
        family: String,
        index: String,
        asymmetry: f64,
    },

    #[error("noise second-moment matrix at stage {stage} is not positive semidefinite (min eigenvalue {min_eig:e})")]
    NoiseNotPsd { stage: usize, min_eig: f64 },

    #[error("missing entry {family}[{t},{k}]")]
    MissingEntry { family: String, t: usize, k: usize },

    #[error("stage index out of range: {0}")]
    Index(String),

    #[error("noise tree depth {depth} exceeds the limit {limit}")]
    DepthExceeded { depth: usize, limit: usize },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
