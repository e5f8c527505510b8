//! Fitness evaluation: accuracy of a pruned network after a short finetune.
//!
//! Three evaluators implement [`Evaluator`]: a planted-importance oracle for
//! synthetic snapshots, a built-in toy network trainer, and a client for
//! external evaluator processes speaking line-delimited JSON.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::snapshot::Mask;

mod external;
mod oracle;
pub mod protocol;
pub mod toy;

pub use external::ExternalEvaluator;
pub use oracle::OracleEvaluator;
pub use toy::{ToyDataset, ToyEvaluator, ToyModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessRequest {
    pub request_id: u64,
    pub masks: Mask,
    pub finetune_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessResponse {
    pub request_id: u64,
    pub fitness: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub diagnostics: BTreeMap<String, String>,
}

impl FitnessResponse {
    pub fn new(request_id: u64, fitness: f64) -> Self {
        Self {
            request_id,
            fitness,
            diagnostics: BTreeMap::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("failed to start evaluator `{command}`: {detail}")]
    Spawn { command: String, detail: String },

    #[error("request {request_id} timed out after {seconds:.1}s")]
    Timeout { request_id: u64, seconds: f64 },

    #[error("protocol violation on request {request_id}: {detail}")]
    Protocol { request_id: u64, detail: String },

    #[error("evaluator reported an error for request {request_id}: {message}")]
    Reported { request_id: u64, message: String },

    #[error("request {request_id}: {detail}")]
    MaskMismatch { request_id: u64, detail: String },

    #[error("request {request_id}: training diverged at epoch {epoch}")]
    Divergence { request_id: u64, epoch: usize },
}

/// Maps pruning masks to a fitness value, higher is better.
///
/// Implementations are shared across worker threads; concurrent calls carry
/// distinct requests.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, request: &FitnessRequest) -> Result<FitnessResponse, EvalError>;
}

impl<E: Evaluator + ?Sized> Evaluator for &E {
    fn evaluate(&self, request: &FitnessRequest) -> Result<FitnessResponse, EvalError> {
        (**self).evaluate(request)
    }
}

impl<E: Evaluator + ?Sized> Evaluator for Box<E> {
    fn evaluate(&self, request: &FitnessRequest) -> Result<FitnessResponse, EvalError> {
        (**self).evaluate(request)
    }
}
