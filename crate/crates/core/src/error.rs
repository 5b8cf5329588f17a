use std::path::PathBuf;

use thiserror::Error;

use crate::tpm::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid transition matrix: {}", join_violations(.0))]
    InvalidTransitionMatrix(Vec<Violation>),

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("no data")]
    NoData,

    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroNormRow { row: usize },

    #[error("infeasible scaled-target configuration: {0}")]
    Infeasible(String),

    #[error("degenerate marginal: s_min = {0}")]
    DegenerateMarginal(f64),

    #[error("dataset too small: batch needs {needed} items, only {available} available")]
    DatasetTooSmall { needed: usize, available: usize },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("non-finite {loss} loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: String,
        value: f64,
    },

    #[error("unknown sweep axis `{0}` (expected one of delta, gamma, tau, batch_size, lr)")]
    UnknownAxis(String),

    #[error("{0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics themselves (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. }
                | Error::NonFiniteGradient { .. }
                | Error::DegenerateMarginal(_)
                | Error::ZeroNormRow { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}
