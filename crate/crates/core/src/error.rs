//! Crate-wide error type.

use thiserror::Error;

/// Everything that can go wrong inside the library.
#[derive(Debug, Error)]
pub enum RapError {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape error in {context}: {message}")]
    Shape { context: String, message: String },

    /// An attention mask leaves some batch row with no unmasked key.
    #[error("invalid mask: {0}")]
    InvalidMask(String),

    /// Non-finite value detected during a numeric computation.
    #[error("numeric error in {context}: non-finite value encountered")]
    NonFinite { context: String },

    /// A long-memory buffer was pushed past its capacity.
    #[error("long-memory buffer full: capacity {capacity} already reached")]
    BufferFull { capacity: usize },

    /// An operation was called on state that cannot support it.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A configuration field failed validation.
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    /// Malformed or inconsistent data (files, frames, splits).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl RapError {
    pub fn shape(context: impl Into<String>, message: impl Into<String>) -> Self {
        RapError::Shape {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        RapError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, RapError>;
