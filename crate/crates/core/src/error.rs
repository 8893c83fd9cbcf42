use thiserror::Error;

use crate::bundle::BundleError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {context} at ({row}, {col})")]
    NonFinite {
        context: String,
        row: usize,
        col: usize,
    },

    /// Cholesky failed: the leading principal minor of this (1-based) order is not positive.
    #[error("matrix is not positive definite (leading minor {minor} of {order})")]
    NotPositiveDefinite { minor: usize, order: usize },

    #[error("invalid labels: {0}")]
    InvalidLabels(String),

    #[error("vanishing gradient for source {source_id}: norm {norm:e} below floor {floor:e}")]
    VanishingGradient {
        source_id: usize,
        norm: f64,
        floor: f64,
    },

    #[error("degenerate ensemble gradient: norm {norm:e} below floor {floor:e}")]
    DegenerateEnsemble { norm: f64, floor: f64 },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("all {restarts} restarts failed; last error: {last}")]
    AllRestartsFailed { restarts: usize, last: Box<Error> },

    #[error(transparent)]
    Bundle(#[from] BundleError),
}

impl Error {
    /// Conditioning and degeneracy failures, as opposed to bad input data.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::VanishingGradient { .. }
            | Error::DegenerateEnsemble { .. } => true,
            Error::AllRestartsFailed { last, .. } => last.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn mismatch(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
