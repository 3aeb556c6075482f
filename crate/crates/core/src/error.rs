use std::path::PathBuf;

use thiserror::Error;

use crate::backend::BackendError;
use crate::model::LabelSpaceViolation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("invalid json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid label space: {0:?}")]
    LabelSpace(Vec<LabelSpaceViolation>),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("total label probability mass is zero")]
    ZeroMass,
    #[error("runs are not aligned; missing sample ids: {missing:?}")]
    Alignment { missing: Vec<String> },
    #[error("calibrator fit diverged at iteration {iteration} (loss {loss})")]
    Divergence { iteration: usize, loss: f64 },
    #[error("reference set {reference_set}: {source}")]
    ReferenceSet {
        reference_set: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("no parameter setting matched; closest ECE gap {ece_gap:.4}, accuracy gap {accuracy_gap:.4}")]
    NoMatch { ece_gap: f64, accuracy_gap: f64 },
    #[error("every sample failed; first failure: {0}")]
    AllFailed(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl Error {
    /// Stable machine-readable kind, used in CLI error documents.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Schema { .. } => "schema",
            Error::Json(_) => "json",
            Error::LabelSpace(_) => "label_space",
            Error::InsufficientData(_) => "insufficient_data",
            Error::EmptyInput(_) => "empty_input",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::ZeroMass => "zero_mass",
            Error::Alignment { .. } => "alignment",
            Error::Divergence { .. } => "divergence",
            Error::ReferenceSet { source, .. } => source.kind(),
            Error::NoMatch { .. } => "no_match",
            Error::AllFailed(_) => "all_failed",
            Error::Backend(_) => "backend",
        }
    }
}
