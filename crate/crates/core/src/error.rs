//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Malformed input data (bad row, bad header, unparseable value).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A required input column is absent.
    #[error("missing required column `{0}`")]
    MissingColumn(String),

    /// Invalid configuration or argument (ratios, vocabularies, bounds).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Data-integrity violation (e.g. one signature claiming two families).
    #[error("data conflict: {0}")]
    Conflict(String),

    /// Shape or dimension mismatch between numeric inputs.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Geometrically or numerically degenerate input (rank loss, NaN, …).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A required upstream artifact or file is missing.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        CoreError::Parse { line, msg: msg.into() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        CoreError::Numerical(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        CoreError::Dimension(msg.into())
    }
}
