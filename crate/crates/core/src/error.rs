use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the geosketch library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate ({lat}, {lon}) is outside the grid extent")]
    OutOfExtent { lat: f64, lon: f64 },

    #[error("invalid grid configuration: {0}")]
    InvalidGrid(String),

    #[error("invalid ring specification: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("term `{0}` is not monitored")]
    NotMonitored(String),

    #[error("model fit failed: {0}")]
    FitFailure(String),

    #[error("corrupt or incompatible file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
