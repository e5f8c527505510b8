//! Average ranks, Spearman correlation, and per-layer criterion correlation
//! matrices.

use serde::{Deserialize, Serialize};

use crate::criteria::{CriterionId, ScoreVector};
use crate::error::{Error, Result};

/// 1-based ranks; tied values share the mean of the positions they occupy.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start+1 ..= end share their mean.
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn has_ties(values: &[f64]) -> bool {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.windows(2).any(|w| w[0] == w[1])
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman's rank correlation.
///
/// Tie-free inputs use `1 − 6Σd² / (n(n² − 1))`; inputs with ties use the
/// Pearson correlation of average ranks. A constant rank vector yields 0.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "spearman length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::InvalidArgument("spearman needs at least 2 observations".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("spearman input".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    if has_ties(x) || has_ties(y) {
        return Ok(pearson(&rx, &ry));
    }
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    let nf = n as f64;
    Ok(1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    #[serde(rename = "layer")]
    pub layer_index: usize,
    pub criteria: Vec<CriterionId>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationVector {
    #[serde(rename = "layer")]
    pub layer_index: usize,
    pub criterion: CriterionId,
    pub vector: Vec<f64>,
}

/// Pairwise Spearman correlation of one layer's criterion scores.
pub fn correlation_matrix(scores: &[ScoreVector]) -> Result<CorrelationMatrix> {
    if scores.len() < 2 {
        return Err(Error::InvalidArgument("correlation matrix needs at least 2 criteria".into()));
    }
    let layer_index = scores[0].layer_index;
    let len = scores[0].normalized.len();
    for s in scores {
        if s.layer_index != layer_index {
            return Err(Error::InvalidArgument(format!(
                "mixed layers in correlation input: {} and {}",
                layer_index, s.layer_index
            )));
        }
        if s.normalized.len() != len {
            return Err(Error::InvalidArgument(format!(
                "criterion {} has {} scores, expected {len}",
                s.criterion,
                s.normalized.len()
            )));
        }
    }
    let m = scores.len();
    let mut values = vec![vec![0.0; m]; m];
    for i in 0..m {
        values[i][i] = 1.0;
        for j in (i + 1)..m {
            // Ranks of raw and normalized scores coincide; raw avoids min-max rounding ties.
            let rho = spearman(&scores[i].raw, &scores[j].raw)?;
            values[i][j] = rho;
            values[j][i] = rho;
        }
    }
    Ok(CorrelationMatrix {
        layer_index,
        criteria: scores.iter().map(|s| s.criterion).collect(),
        values,
    })
}

/// Rows of the matrix, one per criterion.
pub fn correlation_vectors(matrix: &CorrelationMatrix) -> Vec<CorrelationVector> {
    matrix
        .criteria
        .iter()
        .zip(&matrix.values)
        .map(|(&criterion, row)| CorrelationVector {
            layer_index: matrix.layer_index,
            criterion,
            vector: row.clone(),
        })
        .collect()
}

impl CorrelationMatrix {
    /// CSV with criterion codes as header row and first column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("criterion");
        for c in &self.criteria {
            out.push_str(&format!(",{}", c.code()));
        }
        out.push('\n');
        for (c, row) in self.criteria.iter().zip(&self.values) {
            out.push_str(&c.code().to_string());
            for v in row {
                // `{:?}` prints the shortest representation that round-trips exactly.
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }
}
