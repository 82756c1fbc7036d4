use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} got {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    /// A mask update tried to re-enable a group that was already pruned.
    #[error("mask monotonicity violated: layer {layer} group {group} is already pruned")]
    Monotonicity { layer: usize, group: usize },

    #[error("dependency map does not partition entries: {0}")]
    Partition(String),

    #[error("pruning target {target} is not achievable (max {max})")]
    Feasibility { target: f64, max: f64 },

    /// The pruning-ratio axis of a bandit collapsed because the lower bound passed the target.
    #[error("arm space saturated: lower bound {bound} exceeds target {target}")]
    Saturated { bound: f64, target: f64 },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid value for `{key}`: {msg}")]
    Validation { key: String, msg: String },

    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Configuration(msg.into())
    }
}
