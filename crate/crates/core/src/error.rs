use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FairFedError>;

#[derive(Debug, Error)]
pub enum FairFedError {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("client {client} diverged at local step {step}: non-finite loss or gradient")]
    DivergedClient { client: usize, step: usize },

    #[error("planning error: {0}")]
    Planning(String),

    #[error("oracle failure: {0}")]
    OracleFailure(String),

    #[error("refusing to overwrite existing file {0} (pass --force)")]
    WouldOverwrite(PathBuf),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
