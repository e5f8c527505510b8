//! The twelve filter-importance criteria. Every criterion maps a layer to one
//! raw score per filter where larger means more important; scores are then
//! min-max normalized per layer into `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snapshot::{LayerRecord, NetworkSnapshot};

/// Criterion identifiers with stable integer codes 0–11.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum CriterionId {
    L1 = 0,
    L2 = 1,
    Fpgm = 2,
    Fermat = 3,
    BnGamma = 4,
    BnBeta = 5,
    Apoz = 6,
    Entropy = 7,
    TaylorL1 = 8,
    TaylorL2 = 9,
    TaylorBnGamma = 10,
    TaylorBnBeta = 11,
}

impl CriterionId {
    pub const ALL: [CriterionId; 12] = [
        CriterionId::L1,
        CriterionId::L2,
        CriterionId::Fpgm,
        CriterionId::Fermat,
        CriterionId::BnGamma,
        CriterionId::BnBeta,
        CriterionId::Apoz,
        CriterionId::Entropy,
        CriterionId::TaylorL1,
        CriterionId::TaylorL2,
        CriterionId::TaylorBnGamma,
        CriterionId::TaylorBnBeta,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CriterionId::L1 => "L1",
            CriterionId::L2 => "L2",
            CriterionId::Fpgm => "FPGM",
            CriterionId::Fermat => "Fermat",
            CriterionId::BnGamma => "BN_Gamma",
            CriterionId::BnBeta => "BN_Beta",
            CriterionId::Apoz => "APoZ",
            CriterionId::Entropy => "Entropy",
            CriterionId::TaylorL1 => "TaylorL1",
            CriterionId::TaylorL2 => "TaylorL2",
            CriterionId::TaylorBnGamma => "TaylorBNGamma",
            CriterionId::TaylorBnBeta => "TaylorBNBeta",
        }
    }

    pub fn score(self, layer: &LayerRecord, layer_index: usize) -> Result<ScoreVector> {
        let raw = match self {
            CriterionId::L1 => score_l1(layer),
            CriterionId::L2 => score_l2(layer),
            CriterionId::Fpgm => score_fpgm(layer, layer_index)?,
            CriterionId::Fermat => score_fermat(layer, layer_index)?,
            CriterionId::BnGamma => score_bn_gamma(layer, layer_index)?,
            CriterionId::BnBeta => score_bn_beta(layer, layer_index)?,
            CriterionId::Apoz => score_apoz(layer, layer_index)?,
            CriterionId::Entropy => score_entropy(layer, layer_index)?,
            CriterionId::TaylorL1 => score_taylor_l1(layer, layer_index)?,
            CriterionId::TaylorL2 => score_taylor_l2(layer, layer_index)?,
            CriterionId::TaylorBnGamma => score_taylor_bn_gamma(layer, layer_index)?,
            CriterionId::TaylorBnBeta => score_taylor_bn_beta(layer, layer_index)?,
        };
        ScoreVector::from_raw(layer_index, self, raw)
    }

    /// Whether `layer` carries everything this criterion needs.
    pub fn is_available(self, layer: &LayerRecord) -> bool {
        match self {
            CriterionId::L1 | CriterionId::L2 => true,
            CriterionId::Fpgm | CriterionId::Fermat => layer.num_filters >= 2,
            CriterionId::BnGamma => layer.bn_gamma.is_some(),
            CriterionId::BnBeta => layer.bn_beta.is_some(),
            CriterionId::Apoz | CriterionId::Entropy => layer.activation_stats.is_some(),
            CriterionId::TaylorL1 | CriterionId::TaylorL2 => layer.weight_grad.is_some(),
            CriterionId::TaylorBnGamma => layer.bn_gamma.is_some() && layer.bn_gamma_grad.is_some(),
            CriterionId::TaylorBnBeta => layer.bn_beta.is_some() && layer.bn_beta_grad.is_some(),
        }
    }
}

impl fmt::Display for CriterionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CriterionId {
    type Err = Error;

    /// Accepts a name (case-insensitive) or an integer code.
    fn from_str(s: &str) -> Result<Self> {
        if let Ok(code) = s.parse::<u8>() {
            return Self::from_code(code).ok_or_else(|| Error::InvalidArgument(format!("unknown criterion code {code}")));
        }
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown criterion `{s}`")))
    }
}

// Serialized as the stable integer code.
impl Serialize for CriterionId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.code())
    }
}

impl<'de> Deserialize<'de> for CriterionId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let code = u8::deserialize(d)?;
        CriterionId::from_code(code).ok_or_else(|| serde::de::Error::custom(format!("unknown criterion code {code}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    #[serde(rename = "layer")]
    pub layer_index: usize,
    pub criterion: CriterionId,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl ScoreVector {
    pub fn from_raw(layer_index: usize, criterion: CriterionId, raw: Vec<f64>) -> Result<Self> {
        if let Some(i) = raw.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput(format!(
                "criterion {criterion} produced a non-finite score for filter {i} of layer {layer_index}"
            )));
        }
        let normalized = normalize_minmax(&raw);
        Ok(Self {
            layer_index,
            criterion,
            raw,
            normalized,
        })
    }
}

fn unavailable(criterion: CriterionId, layer: usize, reason: &'static str) -> Error {
    Error::CriterionUnavailable { criterion, layer, reason }
}

fn filters(layer: &LayerRecord) -> impl Iterator<Item = &[f32]> {
    (0..layer.num_filters).map(move |i| layer.weights.row(i))
}

pub fn score_l1(layer: &LayerRecord) -> Vec<f64> {
    filters(layer).map(|f| f.iter().map(|&w| (w as f64).abs()).sum()).collect()
}

pub fn score_l2(layer: &LayerRecord) -> Vec<f64> {
    filters(layer).map(|f| f.iter().map(|&w| (w as f64).powi(2)).sum::<f64>().sqrt()).collect()
}

fn flattened(layer: &LayerRecord) -> Vec<Vec<f64>> {
    filters(layer).map(|f| f.iter().map(|&w| w as f64).collect()).collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Sum of distances from each filter to every other filter.
pub fn score_fpgm(layer: &LayerRecord, layer_index: usize) -> Result<Vec<f64>> {
    if layer.num_filters < 2 {
        return Err(unavailable(CriterionId::Fpgm, layer_index, "needs at least 2 filters"));
    }
    let f = flattened(layer);
    let n = f.len();
    let mut raw = vec![0.0; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclid(&f[i], &f[j]);
            raw[i] += d;
            raw[j] += d;
        }
    }
    Ok(raw)
}

/// Distance of each filter to the geometric median of the layer's filters.
pub fn score_fermat(layer: &LayerRecord, layer_index: usize) -> Result<Vec<f64>> {
    if layer.num_filters < 2 {
        return Err(unavailable(CriterionId::Fermat, layer_index, "needs at least 2 filters"));
    }
    let f = flattened(layer);
    let median = weiszfeld(&f, 1e-8, 200)?;
    Ok(f.iter().map(|p| euclid(p, &median)).collect())
}

/// Geometric median of `points` by Weiszfeld iteration with the Vardi–Zhang
/// correction for iterates that land on a data point.
///
/// Starts from the centroid and stops once a step moves less than `tol` or
/// after `max_iter` steps. Points closer than 1e-12 to the iterate are left
/// out of the weighted average for that step. Convergence towards a median
/// that sits on a data point is slow, so the data points are compared as
/// candidates at the end.
pub fn weiszfeld(points: &[Vec<f64>], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let first = points
        .first()
        .ok_or_else(|| Error::InvalidArgument("weiszfeld needs at least one point".into()))?;
    let dim = first.len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidArgument("weiszfeld points differ in dimension".into()));
    }
    if points.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput("weiszfeld input".into()));
    }
    let m = points.len() as f64;
    let mut x: Vec<f64> = (0..dim).map(|d| points.iter().map(|p| p[d]).sum::<f64>() / m).collect();

    for _ in 0..max_iter {
        let mut weighted = vec![0.0; dim];
        let mut weight_sum = 0.0;
        // Resultant of unit vectors towards the non-coincident points.
        let mut pull = vec![0.0; dim];
        let mut coincident = 0usize;
        for p in points {
            let d = euclid(p, &x);
            if d < 1e-12 {
                coincident += 1;
                continue;
            }
            let w = 1.0 / d;
            weight_sum += w;
            for k in 0..dim {
                weighted[k] += w * p[k];
                pull[k] += w * (p[k] - x[k]);
            }
        }
        if weight_sum == 0.0 {
            // Every point coincides with the iterate.
            return Ok(x);
        }
        let target: Vec<f64> = weighted.iter().map(|v| v / weight_sum).collect();
        let next = if coincident == 0 {
            target
        } else {
            let r = pull.iter().map(|v| v * v).sum::<f64>().sqrt();
            let eta = coincident as f64;
            if r <= eta {
                // The data point under the iterate is itself optimal.
                return Ok(x);
            }
            let keep = eta / r;
            target.iter().zip(&x).map(|(t, xi)| (1.0 - keep) * t + keep * xi).collect()
        };
        let step = euclid(&next, &x);
        x = next;
        if step < tol {
            break;
        }
    }
    let cost = |c: &[f64]| points.iter().map(|p| euclid(p, c)).sum::<f64>();
    let mut best = cost(&x);
    for p in points {
        let c = cost(p);
        if c < best {
            best = c;
            x = p.clone();
        }
    }
    Ok(x)
}

pub fn score_bn_gamma(layer: &LayerRecord, layer_index: usize) -> Result<Vec<f64>> {
    let g = layer
        .bn_gamma
        .as_ref()
        .ok_or_else(|| unavailable(CriterionId::BnGamma, layer_index, "missing bn_gamma"))?;
    Ok(g.iter().map(|&v| (v as f64).abs()).collect())
}

pub fn score_bn_beta(layer: &LayerRecord, layer_index: usize) -> Result<Vec<f64>> {
    let b = layer
        .bn_beta
        .as_ref()
        .ok_or_else(|| unavailable(CriterionId::BnBeta, layer_index, "missing bn_beta"))?;
    Ok(b.iter().map(|&v| (v as f64).abs()).collect())
}

/// One minus the channel's fraction of non-positive activations.
pub fn score_apoz(layer: &LayerRecord, layer_index: usize) -> Result<Vec<f64>> {
    let stats = layer
        .activation_stats
        .as_ref()
        .ok_or_else(|| unavailable(CriterionId::Apoz, layer_index, "missing activation_stats"))?;
    Ok(stats.zero_fraction.iter().map(|&z| 1.0 - z as f64).collect())
}

/// Shannon entropy (nats) of each channel's activation histogram.
pub fn score_entropy(layer: &LayerRecord, layer_index: usize) -> Result<Vec<f64>> {
    let stats = layer
        .activation_stats
        .as_ref()
        .ok_or_else(|| unavailable(CriterionId::Entropy, layer_index, "missing activation_stats"))?;
    Ok((0..layer.num_filters).map(|c| histogram_entropy(stats.histogram(c))).collect())
}

pub fn histogram_entropy(counts: &[u32]) -> f64 {
    let total: f64 = counts.iter().map(|&c| c as f64).sum();
    if total == 0.0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / total;
            -q * q.ln()
        })
        .sum()
}

fn taylor_products(layer: &LayerRecord, layer_index: usize, id: CriterionId) -> Result<Vec<Vec<f64>>> {
    let grad = layer
        .weight_grad
        .as_ref()
        .ok_or_else(|| unavailable(id, layer_index, "missing weight_grad"))?;
    Ok((0..layer.num_filters)
        .map(|i| {
            layer
                .weights
                .row(i)
                .iter()
                .zip(grad.row(i))
                .map(|(&w, &g)| w as f64 * g as f64)
                .collect()
        })
        .collect())
}

pub fn score_taylor_l1(layer: &LayerRecord, layer_index: usize) -> Result<Vec<f64>> {
    let p = taylor_products(layer, layer_index, CriterionId::TaylorL1)?;
    Ok(p.iter().map(|r| r.iter().map(|v| v.abs()).sum()).collect())
}

pub fn score_taylor_l2(layer: &LayerRecord, layer_index: usize) -> Result<Vec<f64>> {
    let p = taylor_products(layer, layer_index, CriterionId::TaylorL2)?;
    Ok(p.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect())
}

fn taylor_bn(
    param: Option<&Vec<f32>>,
    grad: Option<&Vec<f32>>,
    id: CriterionId,
    layer_index: usize,
) -> Result<Vec<f64>> {
    let param = param.ok_or_else(|| unavailable(id, layer_index, "missing batch-norm parameter"))?;
    let grad = grad.ok_or_else(|| unavailable(id, layer_index, "missing batch-norm gradient"))?;
    Ok(param
        .iter()
        .zip(grad)
        .map(|(&p, &g)| (p as f64 * g as f64).powi(2))
        .collect())
}

/// `(γ · ∂L/∂γ)²` per channel.
pub fn score_taylor_bn_gamma(layer: &LayerRecord, layer_index: usize) -> Result<Vec<f64>> {
    taylor_bn(
        layer.bn_gamma.as_ref(),
        layer.bn_gamma_grad.as_ref(),
        CriterionId::TaylorBnGamma,
        layer_index,
    )
}

/// `(β · ∂L/∂β)²` per channel.
pub fn score_taylor_bn_beta(layer: &LayerRecord, layer_index: usize) -> Result<Vec<f64>> {
    taylor_bn(
        layer.bn_beta.as_ref(),
        layer.bn_beta_grad.as_ref(),
        CriterionId::TaylorBnBeta,
        layer_index,
    )
}

/// `(x − min) / (max − min)`; a constant vector maps to all 0.5.
pub fn normalize_minmax(raw: &[f64]) -> Vec<f64> {
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if !(span > 0.0) {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|x| ((x - min) / span).clamp(0.0, 1.0)).collect()
}

/// Scores of every criterion in `criteria` for every layer.
///
/// With `available_only`, criteria whose inputs are missing are skipped, but the
/// surviving set must be the same in every layer. Otherwise any missing input
/// is an error.
pub fn score_layers(
    snapshot: &NetworkSnapshot,
    criteria: &[CriterionId],
    available_only: bool,
) -> Result<Vec<Vec<ScoreVector>>> {
    let per_layer: Vec<Vec<CriterionId>> = snapshot
        .layers
        .iter()
        .map(|layer| {
            criteria
                .iter()
                .copied()
                .filter(|c| !available_only || c.is_available(layer))
                .collect()
        })
        .collect();
    if available_only {
        for (li, set) in per_layer.iter().enumerate().skip(1) {
            if *set != per_layer[0] {
                return Err(Error::InconsistentAvailability {
                    layer: li,
                    first: per_layer[0].clone(),
                    other: set.clone(),
                });
            }
        }
    }
    snapshot
        .layers
        .par_iter()
        .zip(per_layer.par_iter())
        .enumerate()
        .map(|(li, (layer, set))| set.iter().map(|c| c.score(layer, li)).collect())
        .collect()
}

/// All twelve criteria (or the available subset) for every layer.
pub fn score_all(snapshot: &NetworkSnapshot, available_only: bool) -> Result<Vec<Vec<ScoreVector>>> {
    score_layers(snapshot, &CriterionId::ALL, available_only)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snapshot::{synth_generate, ActivationStats, SynthSpec, Tensor};

    fn layer(rows: &[&[f32]]) -> LayerRecord {
        let n = rows.len();
        let d = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        LayerRecord::from_weights("l", Tensor::new(vec![n, d], data))
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn codes_round_trip() {
        for (i, c) in CriterionId::ALL.iter().enumerate() {
            assert_eq!(c.code() as usize, i);
            assert_eq!(CriterionId::from_code(i as u8), Some(*c));
            assert_eq!(c.name().parse::<CriterionId>().unwrap(), *c);
        }
        assert_eq!("taylorbngamma".parse::<CriterionId>().unwrap(), CriterionId::TaylorBnGamma);
        assert!("12".parse::<CriterionId>().is_err());
        assert_eq!(serde_json::to_string(&CriterionId::Entropy).unwrap(), "7");
    }

    #[test]
    fn l1_examples() {
        let l = layer(&[&[1.0, -2.0, 0.5, 0.0], &[0.0; 4], &[0.0, 0.5, 2.0, -1.0]]);
        assert_eq!(score_l1(&l), vec![3.5, 0.0, 3.5]);
    }

    #[test]
    fn l2_examples() {
        let l = layer(&[&[3.0, 4.0], &[0.0, 0.0], &[1.0, 1.0]]);
        let raw = score_l2(&l);
        assert_eq!(raw[0], 5.0);
        assert_eq!(raw[1], 0.0);
        let scaled = layer(&[&[6.0, 8.0], &[0.0, 0.0], &[2.0, 2.0]]);
        let a = CriterionId::L2.score(&l, 0).unwrap();
        let b = CriterionId::L2.score(&scaled, 0).unwrap();
        assert!(close(&b.raw, &a.raw.iter().map(|x| 2.0 * x).collect::<Vec<_>>(), 1e-12));
        assert!(close(&a.normalized, &b.normalized, 1e-12));
    }

    #[test]
    fn weiszfeld_examples() {
        let collinear = vec![vec![-1.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.0]];
        let m = weiszfeld(&collinear, 1e-10, 500).unwrap();
        assert!(m[0].abs() < 1e-9 && m[1].abs() < 1e-9, "{m:?}");
        let single = vec![vec![2.5, -1.0, 4.0]];
        assert_eq!(weiszfeld(&single, 1e-10, 10).unwrap(), single[0]);
        assert!(weiszfeld(&[], 1e-8, 10).is_err());
        assert!(weiszfeld(&[vec![f64::NAN]], 1e-8, 10).is_err());
    }

    #[test]
    fn weiszfeld_triangle_matches_grid_search() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let cost = |x: f64, y: f64| pts.iter().map(|p| ((p[0] - x).powi(2) + (p[1] - y).powi(2)).sqrt()).sum::<f64>();
        // Brute-force oracle over [0,1]² at resolution 1e-3.
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=1000 {
            for j in 0..=1000 {
                let (x, y) = (i as f64 * 1e-3, j as f64 * 1e-3);
                let c = cost(x, y);
                if c < best.0 {
                    best = (c, x, y);
                }
            }
        }
        let m = weiszfeld(&pts, 1e-12, 1000).unwrap();
        assert!(cost(m[0], m[1]) <= best.0 + 1e-9);
        assert!((m[0] - best.1).abs() < 2e-3 && (m[1] - best.2).abs() < 2e-3);
    }

    #[test]
    fn fpgm_examples() {
        let same = layer(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        assert_eq!(score_fpgm(&same, 0).unwrap(), vec![0.0; 3]);
        let line = layer(&[&[0.0], &[1.0], &[10.0]]);
        assert_eq!(score_fpgm(&line, 0).unwrap(), vec![11.0, 10.0, 19.0]);
        let permuted = layer(&[&[10.0], &[0.0], &[1.0]]);
        assert_eq!(score_fpgm(&permuted, 0).unwrap(), vec![19.0, 11.0, 10.0]);
        let one = layer(&[&[1.0, 2.0]]);
        assert!(matches!(score_fpgm(&one, 3), Err(Error::CriterionUnavailable { layer: 3, .. })));
    }

    #[test]
    fn fermat_examples() {
        let same = layer(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        assert_eq!(score_fermat(&same, 0).unwrap(), vec![0.0; 3]);
        let line = layer(&[&[0.0], &[1.0], &[10.0]]);
        assert!(close(&score_fermat(&line, 0).unwrap(), &[1.0, 0.0, 9.0], 1e-7));
        let a = layer(&[&[0.3, -1.0], &[2.0, 0.5], &[-1.0, 1.5], &[0.7, 0.7]]);
        let b = layer(&[&[5.3, 2.0], &[7.0, 3.5], &[4.0, 4.5], &[5.7, 3.7]]);
        assert!(close(&score_fermat(&a, 0).unwrap(), &score_fermat(&b, 0).unwrap(), 1e-5));
    }

    #[test]
    fn bn_examples() {
        let mut l = layer(&[&[1.0], &[1.0], &[1.0]]);
        l.bn_gamma = Some(vec![0.5, -0.7, 0.0]);
        let raw = score_bn_gamma(&l, 0).unwrap();
        assert!(close(&raw, &[0.5, 0.7, 0.0], 1e-7));
        l.bn_gamma = Some(vec![-0.5, 0.7, -0.0]);
        assert!(close(&score_bn_gamma(&l, 0).unwrap(), &raw, 0.0));
        l.bn_beta = Some(vec![0.3; 3]);
        assert_eq!(CriterionId::BnBeta.score(&l, 0).unwrap().normalized, vec![0.5; 3]);
        let bare = layer(&[&[1.0], &[2.0]]);
        assert!(score_bn_gamma(&bare, 0).is_err());
        assert!(score_bn_beta(&bare, 0).is_err());
    }

    fn with_stats(zero_fraction: Vec<f32>, bins: usize, histograms: Vec<u32>) -> LayerRecord {
        let n = zero_fraction.len();
        let total = histograms[..bins].iter().map(|&c| c as u64).sum();
        let mut l = LayerRecord::from_weights("l", Tensor::new(vec![n, 1], vec![1.0; n]));
        l.activation_stats = Some(ActivationStats {
            zero_fraction,
            bins,
            histograms,
            ranges: vec![[0.0, 1.0]; n],
            sample_total: total,
        });
        l
    }

    #[test]
    fn apoz_examples() {
        let l = with_stats(vec![0.25, 1.0, 0.0], 1, vec![4, 4, 4]);
        assert_eq!(score_apoz(&l, 0).unwrap(), vec![0.75, 0.0, 1.0]);
        let bare = layer(&[&[1.0], &[2.0]]);
        assert!(score_apoz(&bare, 0).is_err());
    }

    #[test]
    fn entropy_examples() {
        let mut hist = vec![5u32; 32];
        hist.extend(std::iter::once(160).chain(std::iter::repeat(0).take(31)));
        let l = with_stats(vec![0.0, 0.0], 32, hist);
        let raw = score_entropy(&l, 0).unwrap();
        assert!((raw[0] - 32f64.ln()).abs() < 1e-12);
        assert_eq!(raw[1], 0.0);
        let expected = -(2.0 * 0.25 * 0.25f64.ln() + 0.5 * 0.5f64.ln());
        assert!((histogram_entropy(&[2, 2, 4]) - expected).abs() < 1e-12);
        assert!((expected - 1.0397).abs() < 1e-4);
        assert!(score_entropy(&layer(&[&[1.0], &[2.0]]), 0).is_err());
    }

    #[test]
    fn taylor_examples() {
        let mut l = layer(&[&[1.0, 2.0], &[0.0, 0.0]]);
        l.weight_grad = Some(Tensor::new(vec![2, 2], vec![3.0, -1.0, 7.0, -9.0]));
        assert_eq!(score_taylor_l1(&l, 0).unwrap(), vec![5.0, 0.0]);
        let l2 = score_taylor_l2(&l, 0).unwrap();
        assert!((l2[0] - 13f64.sqrt()).abs() < 1e-12);
        assert_eq!(l2[1], 0.0);
        l.weight_grad = Some(Tensor::new(vec![2, 2], vec![0.0; 4]));
        assert_eq!(score_taylor_l1(&l, 0).unwrap(), vec![0.0, 0.0]);
        l.weight_grad = None;
        assert!(score_taylor_l1(&l, 0).is_err());
        assert!(score_taylor_l2(&l, 0).is_err());
    }

    #[test]
    fn taylor_bn_examples() {
        let mut l = layer(&[&[1.0], &[1.0]]);
        l.bn_gamma = Some(vec![2.0, 3.0]);
        l.bn_gamma_grad = Some(vec![0.5, 0.0]);
        assert_eq!(score_taylor_bn_gamma(&l, 0).unwrap(), vec![1.0, 0.0]);
        l.bn_gamma = Some(vec![-2.0, -3.0]);
        l.bn_gamma_grad = Some(vec![-0.5, 0.0]);
        assert_eq!(score_taylor_bn_gamma(&l, 0).unwrap(), vec![1.0, 0.0]);
        l.bn_beta = Some(vec![1.0, 1.0]);
        assert!(score_taylor_bn_beta(&l, 0).is_err());
        l.bn_beta_grad = Some(vec![0.5, -2.0]);
        assert_eq!(score_taylor_bn_beta(&l, 0).unwrap(), vec![0.25, 4.0]);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_minmax(&[0.0, 5.0, 10.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_minmax(&[3.0; 4]), vec![0.5; 4]);
        assert_eq!(normalize_minmax(&[0.0, 0.3, 1.0, 0.25]), vec![0.0, 0.3, 1.0, 0.25]);
        assert_eq!(normalize_minmax(&[7.0]), vec![0.5]);
    }

    #[test]
    fn score_all_counts_and_availability() {
        let (mut s, _) = synth_generate(&SynthSpec { filters: vec![6, 6, 6], fan_in: 4, seed: 0 }).unwrap();
        let all = score_all(&s, false).unwrap();
        assert!(all.iter().all(|l| l.len() == 12));

        for l in &mut s.layers {
            l.weight_grad = None;
            l.bn_gamma_grad = None;
            l.bn_beta_grad = None;
        }
        let some = score_all(&s, true).unwrap();
        assert!(some.iter().all(|l| l.len() == 8));
        assert!(some[0].iter().all(|v| v.criterion.code() < 8));
        assert!(matches!(score_all(&s, false), Err(Error::CriterionUnavailable { .. })));

        s.layers[1].weight_grad = Some(s.layers[1].weights.clone());
        assert!(matches!(score_all(&s, true), Err(Error::InconsistentAvailability { layer: 1, .. })));
    }
}
