use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("group {group:?} has {size} records, at least {needed} required")]
    UndersizedGroup {
        group: String,
        size: usize,
        needed: usize,
    },
    #[error("zero vector at row {0}")]
    ZeroVector(usize),
    #[error("spherical mean is undefined: normalized replicates cancel (norm {0:e})")]
    UndefinedMean(f64),
    #[error("rank-deficient negative-control covariance: {0}")]
    RankDeficient(String),
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] phenom_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
