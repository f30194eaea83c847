use std::path::PathBuf;

use thiserror::Error;

use crate::graphcore::CondensedGraph;

pub type Result<T, E = HydroError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HydroError {
    /// Operand shapes or dimensions do not fit together.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A value lies outside the domain of the operation (non-finite input,
    /// point outside the ball, negative edge weight, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A documented precondition of the call was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("ingestion error in {path}: {msg}")]
    Ingestion { path: PathBuf, msg: String },

    #[error("training error at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },

    /// The total loss became non-finite. Carries the last condensed graph
    /// that was produced from finite parameters.
    #[error("distillation diverged at epoch {epoch}")]
    Divergence {
        epoch: usize,
        last_good: Box<CondensedGraph>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HydroError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        HydroError::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        HydroError::Domain(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        HydroError::Contract(msg.into())
    }

    pub(crate) fn ingestion(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        HydroError::Ingestion {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
