use std::path::PathBuf;

use thiserror::Error;

use crate::expfam::ExpFamilyKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("natural parameter {theta} is outside the domain of {family:?}")]
    Domain { family: ExpFamilyKind, theta: f64 },

    #[error("observation {x} is outside the support of {family:?}")]
    Support { family: ExpFamilyKind, x: f64 },

    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("fold-in did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    FoldIn {
        iterations: usize,
        grad_norm: f64,
        last: Vec<f64>,
    },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("gradient undefined: prior is -inf at the current state")]
    GradientUndefined,

    #[error("configuration error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("chain error: {0}")]
    Chain(String),

    #[error("gaussian stage error: {0}")]
    Stage(String),

    #[error("proposal error: {0}")]
    Proposal(String),

    #[error("mask error: {0}")]
    Mask(String),

    #[error("statistics error: {0}")]
    Stat(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for failures caused by the numbers rather than by the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Domain { .. }
                | Error::FoldIn { .. }
                | Error::Fit(_)
                | Error::GradientUndefined
                | Error::Chain(_)
                | Error::Stage(_)
                | Error::Proposal(_)
                | Error::Stat(_)
        )
    }
}
