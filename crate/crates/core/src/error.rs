//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced while loading, validating, indexing or evaluating data.
#[derive(Debug, Error)]
pub enum Error {
    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A required input file does not exist.
    #[error("missing input file: {}", .0.display())]
    MissingFile(PathBuf),

    /// Wrong magic bytes, unsupported version or malformed header.
    #[error("format error: {0}")]
    Format(String),

    /// The byte stream ended early or a record is internally inconsistent.
    #[error("corrupt data at byte offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },

    /// A value violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Vector, code or matrix dimensions do not agree.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// Not enough data to satisfy a request.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Query features were produced by a different encoder than the index.
    #[error("encoder mismatch: index was built with {expected}, query encoded with {actual}")]
    EncoderMismatch { expected: String, actual: String },

    /// Lookup of an identifier that is not present.
    #[error("unknown image id {0}")]
    UnknownImage(u64),

    /// Insert of an identifier that is already present.
    #[error("duplicate image id {0}")]
    DuplicateImage(u64),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
