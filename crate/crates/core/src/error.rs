use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("{path}: field `{field}`: {reason}")]
    Parse {
        path: PathBuf,
        field: String,
        reason: String,
    },

    #[error("invalid config `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("agent {agent} cannot take action {action} in the current state")]
    UnavailableAction { agent: usize, action: usize },

    #[error("search space of {size} entries exceeds the limit of {limit}")]
    Capacity { size: u128, limit: u128 },

    #[error("no convergence after {iterations} iterations: {detail}")]
    Convergence { iterations: usize, detail: String },

    #[error("degenerate least-squares fit: {0}")]
    DegenerateFit(String),

    #[error("unsupported mixer for this operation: {0}")]
    UnsupportedMixer(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LabError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        LabError::Contract(msg.into())
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        LabError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
