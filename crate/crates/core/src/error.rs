use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every stage of the prior pathway.
#[derive(Debug, Error)]
pub enum PrioError {
    #[error("invalid {what}: {reason}")]
    Validation { what: String, reason: String },

    #[error("{file}:{line}:{column}: {reason}")]
    Parse {
        file: String,
        line: usize,
        column: usize,
        reason: String,
    },

    #[error("feature file: {0}")]
    FeatureFormat(String),

    #[error("bank file: {0}")]
    BankFormat(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("class {0:?} has no surviving instances after filtering")]
    EmptyClass(String),

    #[error("no feature row for instance key {0}")]
    MissingFeature(u64),

    #[error("duplicate feature row for instance key {0}")]
    DuplicateKey(u64),

    #[error("class id {0} is outside the bank's class list")]
    UnknownClass(usize),

    #[error("all class probabilities are zero; routing is undefined")]
    ZeroGate,

    #[error("exp overflow in component {component} (argument {value})")]
    Overflow { component: &'static str, value: f64 },

    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),

    #[error("training diverged at epoch {0} (non-finite loss)")]
    Divergence(usize),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PrioError {
    pub fn validation(what: impl Into<String>, reason: impl Into<String>) -> Self {
        PrioError::Validation {
            what: what.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PrioError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = PrioError> = std::result::Result<T, E>;
