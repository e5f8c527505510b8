use std::path::PathBuf;

use crate::criteria::CriterionId;
use crate::fitness::EvalError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("layer `{layer}` tensor `{tensor}`: {detail}")]
    ShapeMismatch {
        layer: String,
        tensor: String,
        detail: String,
    },

    #[error("layer `{layer}` tensor `{tensor}` contains a non-finite value at element {index}")]
    NonFinite {
        layer: String,
        tensor: String,
        index: usize,
    },

    #[error("invalid snapshot: {0}")]
    InvalidSnapshot(String),

    #[error("criterion {criterion} unavailable for layer {layer}: {reason}")]
    CriterionUnavailable {
        criterion: CriterionId,
        layer: usize,
        reason: &'static str,
    },

    #[error("criteria availability differs across layers: layer 0 has {first:?}, layer {layer} has {other:?}")]
    InconsistentAvailability {
        layer: usize,
        first: Vec<CriterionId>,
        other: Vec<CriterionId>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("evaluator failed on gene {gene}: {source}")]
    Evaluation {
        gene: u64,
        #[source]
        source: EvalError,
    },

    #[error("toy trainer diverged at epoch {epoch}")]
    Divergence { epoch: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
