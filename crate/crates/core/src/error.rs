use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the inverse-online-learning pipeline.
#[derive(Debug, Error)]
pub enum IolError {
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    #[error("trajectory '{id}': dimension mismatch (expected d={expected}, found {found})")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("trajectory '{id}' step {step}: non-finite value in {field}")]
    NonFinite {
        id: String,
        step: usize,
        field: &'static str,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IolError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IolError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(context: impl Into<String>, expected: usize, found: usize) -> Self {
        IolError::Shape {
            context: context.into(),
            expected,
            found,
        }
    }

    /// Process exit code for this error class: 1 validation, 2 I/O, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            IolError::Io { .. } => 2,
            IolError::Numerical(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, IolError>;
