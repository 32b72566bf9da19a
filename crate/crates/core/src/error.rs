use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("data integrity error: {0}")]
    Integrity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("insufficient data: need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Device lifespan is too short for change-point detection; the caller
    /// should fall back to the fixed RUL cap.
    #[error("unit {unit_id} has lifespan {k_max} < minimum {min_lifespan}; fixed-cap fallback required")]
    FallbackRequired {
        unit_id: u32,
        k_max: usize,
        min_lifespan: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Process exit status categories used by the command-line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCategory {
    Config = 1,
    Integrity = 2,
    Numeric = 3,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_category(&self) -> ExitCategory {
        match self {
            Error::Config(_) | Error::Io { .. } | Error::Serde(_) => ExitCategory::Config,
            Error::Parse { .. }
            | Error::Integrity(_)
            | Error::InsufficientData { .. }
            | Error::Shape { .. }
            | Error::FallbackRequired { .. } => ExitCategory::Integrity,
            Error::Numeric(_) => ExitCategory::Numeric,
        }
    }
}
