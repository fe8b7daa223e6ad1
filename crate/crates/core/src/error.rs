use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FenecError>;

/// Errors raised by the feature store, the classifiers, and the protocol driver.
#[derive(Debug, Error)]
pub enum FenecError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt payload: {0}")]
    Corrupt(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid task split: {0}")]
    Split(String),

    #[error("split does not cover label {label}")]
    Coverage { label: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("insufficient data{}: {samples} sample(s), need at least {needed}", class_suffix(.class_id))]
    InsufficientData {
        class_id: Option<u32>,
        samples: usize,
        needed: usize,
    },

    #[error("matrix is not positive definite (pivot {pivot}); increase gamma1 to strengthen diagonal shrinkage")]
    Conditioning { pivot: usize },

    #[error("cannot select {k} clusters from {rows} sample(s)")]
    Cardinality { k: usize, rows: usize },

    #[error("class {0} is already stored in the model")]
    DuplicateClass(u32),

    #[error("degenerate loss: {0}")]
    DegenerateLoss(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl FenecError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FenecError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            FenecError::Config(_) => 2,
            FenecError::Conditioning { .. }
            | FenecError::Normalization(_)
            | FenecError::DegenerateLoss(_) => 4,
            _ => 3,
        }
    }
}

fn class_suffix(class_id: &Option<u32>) -> String {
    class_id
        .map(|c| format!(" for class {c}"))
        .unwrap_or_default()
}
