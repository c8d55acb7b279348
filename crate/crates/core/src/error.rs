// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors produced by tensor arithmetic, model evaluation, data handling
/// and experiment orchestration.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not agree for the named operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A primitive produced NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Reverse pass requested on something that cannot be differentiated.
    #[error("autodiff: {0}")]
    Autodiff(String),

    /// Invalid configuration or argument.
    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    /// Corpus, vocabulary or prompt rendering problem.
    #[error("data: {0}")]
    Data(String),

    /// Checkpoint container problem.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Training did not converge or diverged.
    #[error("training: {0}")]
    Training(String),

    /// Tracing statistics could not be computed.
    #[error("tracing: {0}")]
    Tracing(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid { .. } | Error::Data(_) | Error::Shape { .. } | Error::Checkpoint(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
