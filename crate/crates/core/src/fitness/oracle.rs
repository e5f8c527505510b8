use super::{EvalError, Evaluator, FitnessRequest, FitnessResponse};

/// Fraction of total planted importance that a mask keeps. Ignores the
/// finetune budget.
#[derive(Debug, Clone)]
pub struct OracleEvaluator {
    planted: Vec<Vec<f64>>,
    total: f64,
}

impl OracleEvaluator {
    pub fn new(planted: Vec<Vec<f64>>) -> Self {
        let total = planted.iter().flatten().sum();
        Self { planted, total }
    }

    pub fn planted(&self) -> &[Vec<f64>] {
        &self.planted
    }
}

impl Evaluator for OracleEvaluator {
    fn evaluate(&self, req: &FitnessRequest) -> Result<FitnessResponse, EvalError> {
        let mismatch = |detail: String| EvalError::MaskMismatch {
            request_id: req.request_id,
            detail,
        };
        if req.masks.layers.len() != self.planted.len() {
            return Err(mismatch(format!(
                "{} mask layers for {} planted layers",
                req.masks.layers.len(),
                self.planted.len()
            )));
        }
        let mut kept = 0.0;
        for (mask, truth) in req.masks.layers.iter().zip(&self.planted) {
            if mask.keep.len() != truth.len() {
                return Err(mismatch(format!(
                    "layer `{}` mask has {} entries, planted vector has {}",
                    mask.layer,
                    mask.keep.len(),
                    truth.len()
                )));
            }
            kept += mask.keep.iter().zip(truth).filter(|(&k, _)| k).map(|(_, t)| t).sum::<f64>();
        }
        let fitness = if self.total > 0.0 { kept / self.total } else { 0.0 };
        Ok(FitnessResponse::new(req.request_id, fitness))
    }
}
