use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("store format error: {0}")]
    Format(String),

    #[error("truncated payload: header declares {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("eigen solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    EigenNonConvergence { iterations: usize, residual: f64 },

    #[error("mask is empty")]
    EmptyMask,

    #[error("region is empty")]
    EmptyRegion,

    #[error("descriptor pool is empty")]
    EmptyPool,

    #[error("duplicate descriptor id {0} in concept set")]
    DuplicateId(u32),

    #[error("every entry of the score matrix is masked out")]
    AllMasked,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag, used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::BackendUnavailable(_) => "backend_unavailable",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Format(_) => "format",
            Error::Truncated { .. } => "truncated",
            Error::InvalidInput(_) => "invalid_input",
            Error::EigenNonConvergence { .. } => "eigen_non_convergence",
            Error::EmptyMask => "empty_mask",
            Error::EmptyRegion => "empty_region",
            Error::EmptyPool => "empty_pool",
            Error::DuplicateId(_) => "duplicate_id",
            Error::AllMasked => "all_masked",
            Error::EmptyDataset => "empty_dataset",
            Error::Config(_) => "config",
            Error::Path { .. } | Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Path { path, source }
    }
}
