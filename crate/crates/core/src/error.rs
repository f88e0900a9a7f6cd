use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("degenerate neighborhood around point {point_index:?}: covariance has rank 0")]
    DegenerateNeighborhood { point_index: Option<usize> },

    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("filter left no items")]
    EmptyResult,

    #[error("correspondence {0} has no normals")]
    MissingNormals(usize),

    #[error("correspondence {0} has no current residual")]
    MissingResidual(usize),

    #[error("too few correspondences: need at least {needed}, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: unsupported format: {message}")]
    UnsupportedFormat { path: PathBuf, message: String },

    #[error("{path}:{line}: index {index} out of range for cloud of {len} points")]
    IndexOutOfRange {
        path: PathBuf,
        line: usize,
        index: usize,
        len: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for the errors that come from input geometry rather than IO or parsing.
    pub fn is_degenerate(&self) -> bool {
        matches!(
            self,
            Error::DegenerateInput(_)
                | Error::EmptyCloud
                | Error::DegenerateNeighborhood { .. }
                | Error::DegenerateDistribution(_)
                | Error::EmptyResult
                | Error::TooFewCorrespondences { .. }
        )
    }
}
