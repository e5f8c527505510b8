//! Blending of selected criteria with calibration factors, and conversion of
//! blended scores into keep/prune masks.

use serde::{Deserialize, Serialize};

use crate::clustering::CriteriaClustering;
use crate::criteria::{CriterionId, ScoreVector};
use crate::error::{Error, Result};
use crate::snapshot::{keep_count, LayerMask, Mask, NetworkSnapshot, PruneConfig};

/// Calibration factors and per-cluster criterion choices for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGene {
    #[serde(rename = "layer")]
    pub layer_index: usize,
    pub factors: Vec<f64>,
    pub selections: Vec<CriterionId>,
}

impl LayerGene {
    pub fn validate(&self, clustering: &CriteriaClustering) -> Result<()> {
        if self.factors.len() != clustering.k || self.selections.len() != clustering.k {
            return Err(Error::InvalidArgument(format!(
                "layer {} gene has {} factors / {} selections for K={}",
                self.layer_index,
                self.factors.len(),
                self.selections.len(),
                clustering.k
            )));
        }
        if let Some(p) = self.factors.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!(
                "layer {} calibration factor {p} outside [0, 1]",
                self.layer_index
            )));
        }
        for (k, (sel, cluster)) in self.selections.iter().zip(&clustering.clusters).enumerate() {
            if !cluster.contains(sel) {
                return Err(Error::InvalidArgument(format!(
                    "layer {} selection {sel} is not in cluster {k}",
                    self.layer_index
                )));
            }
        }
        Ok(())
    }
}

/// `Σ_k factors[k] · normalized(selections[k])`, elementwise.
pub fn blend_scores(gene: &LayerGene, scores: &[ScoreVector]) -> Result<Vec<f64>> {
    let len = scores.first().map_or(0, |s| s.normalized.len());
    let mut out = vec![0.0; len];
    for (&p, &criterion) in gene.factors.iter().zip(&gene.selections) {
        let s = scores
            .iter()
            .find(|s| s.criterion == criterion)
            .ok_or_else(|| Error::InvalidArgument(format!(
                "layer {} has no score for selected criterion {criterion}",
                gene.layer_index
            )))?;
        if s.normalized.len() != len {
            return Err(Error::InvalidArgument(format!(
                "criterion {criterion} has {} scores, expected {len}",
                s.normalized.len()
            )));
        }
        for (o, v) in out.iter_mut().zip(&s.normalized) {
            *o += p * v;
        }
    }
    Ok(out)
}

/// Keeps the `⌈keep_ratio · n⌉` highest scores; equal scores favour the lower index.
pub fn make_mask(blended: &[f64], keep_ratio: f64) -> Result<Vec<bool>> {
    if blended.is_empty() {
        return Err(Error::InvalidArgument("cannot mask an empty score vector".into()));
    }
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("keep ratio {keep_ratio} outside (0, 1]")));
    }
    let keep = keep_count(keep_ratio, blended.len());
    let mut order: Vec<usize> = (0..blended.len()).collect();
    // Stable sort keeps index order among equal scores.
    order.sort_by(|&a, &b| blended[b].total_cmp(&blended[a]));
    let mut mask = vec![false; blended.len()];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    #[serde(rename = "layer")]
    pub layer_index: usize,
    pub name: String,
    pub keep_ratio: f64,
    pub kept: usize,
    pub factors: Vec<f64>,
    pub selections: Vec<CriterionId>,
    pub blended: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub mask: Mask,
    pub layers: Vec<LayerPlan>,
}

/// Blends and masks every layer.
pub fn prune_plan(
    snapshot: &NetworkSnapshot,
    genes: &[LayerGene],
    scores: &[Vec<ScoreVector>],
    config: &PruneConfig,
) -> Result<PrunePlan> {
    let l = snapshot.layers.len();
    if genes.len() != l || scores.len() != l {
        return Err(Error::InvalidArgument(format!(
            "plan covers {} genes and {} score layers for a {l}-layer snapshot",
            genes.len(),
            scores.len()
        )));
    }
    let mut masks = Vec::with_capacity(l);
    let mut layers = Vec::with_capacity(l);
    for (li, ((layer, gene), layer_scores)) in snapshot.layers.iter().zip(genes).zip(scores).enumerate() {
        if gene.layer_index != li {
            return Err(Error::InvalidArgument(format!(
                "gene for layer {} supplied at position {li}",
                gene.layer_index
            )));
        }
        let blended = blend_scores(gene, layer_scores)?;
        if blended.len() != layer.num_filters {
            return Err(Error::InvalidArgument(format!(
                "layer `{}` has {} filters but {} scores",
                layer.name,
                layer.num_filters,
                blended.len()
            )));
        }
        let ratio = config.ratio_for(&layer.name);
        let keep = make_mask(&blended, ratio)?;
        let kept = keep.iter().filter(|&&k| k).count();
        masks.push(LayerMask {
            layer: layer.name.clone(),
            keep,
        });
        layers.push(LayerPlan {
            layer_index: li,
            name: layer.name.clone(),
            keep_ratio: ratio,
            kept,
            factors: gene.factors.clone(),
            selections: gene.selections.clone(),
            blended,
        });
    }
    Ok(PrunePlan {
        mask: Mask { layers: masks },
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::score_all;
    use crate::snapshot::{synth_generate, SynthSpec};
    use proptest::prelude::*;

    fn sv(criterion: CriterionId, normalized: Vec<f64>) -> ScoreVector {
        ScoreVector {
            layer_index: 0,
            criterion,
            raw: normalized.clone(),
            normalized,
        }
    }

    fn gene(factors: Vec<f64>, selections: Vec<CriterionId>) -> LayerGene {
        LayerGene { layer_index: 0, factors, selections }
    }

    #[test]
    fn blend_examples() {
        let s1 = sv(CriterionId::L1, vec![1.0, 0.0, 0.2]);
        let s2 = sv(CriterionId::Apoz, vec![0.0, 1.0, 0.4]);
        let scores = vec![s1.clone(), s2];
        assert_eq!(blend_scores(&gene(vec![1.0], vec![CriterionId::L1]), &scores).unwrap(), s1.normalized);
        assert_eq!(
            blend_scores(&gene(vec![1.0, 0.0], vec![CriterionId::L1, CriterionId::Apoz]), &scores).unwrap(),
            s1.normalized
        );
        let out = blend_scores(&gene(vec![0.5, 0.25], vec![CriterionId::L1, CriterionId::Apoz]), &scores).unwrap();
        let expected = [0.5, 0.25, 0.2];
        assert!(out.iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(blend_scores(&gene(vec![1.0], vec![CriterionId::Entropy]), &scores).is_err());
    }

    #[test]
    fn mask_examples() {
        assert_eq!(make_mask(&[0.9, 0.1, 0.5, 0.4], 0.5).unwrap(), vec![true, false, true, false]);
        assert_eq!(make_mask(&[0.9, 0.1, 0.5], 1.0).unwrap(), vec![true; 3]);
        assert_eq!(make_mask(&[0.3; 4], 0.5).unwrap(), vec![true, true, false, false]);
        assert!(make_mask(&[], 0.5).is_err());
        assert!(make_mask(&[1.0], 0.0).is_err());
    }

    fn synth_plan_inputs() -> (NetworkSnapshot, Vec<Vec<ScoreVector>>, Vec<LayerGene>) {
        let (s, _) = synth_generate(&SynthSpec { filters: vec![10, 7, 16], fan_in: 6, seed: 4 }).unwrap();
        let scores = score_all(&s, false).unwrap();
        let genes = (0..3)
            .map(|li| LayerGene {
                layer_index: li,
                factors: vec![0.7, 0.2],
                selections: vec![CriterionId::L2, CriterionId::Entropy],
            })
            .collect();
        (s, scores, genes)
    }

    #[test]
    fn plan_popcounts_and_composition() {
        let (s, scores, genes) = synth_plan_inputs();
        let config = PruneConfig::uniform(0.3).with_override("layer2", 0.55);
        let plan = prune_plan(&s, &genes, &scores, &config).unwrap();
        let expected = [3, 3, 9];
        for (lm, want) in plan.mask.layers.iter().zip(expected) {
            assert_eq!(lm.popcount(), want);
        }
        let direct = make_mask(&blend_scores(&genes[1], &scores[1]).unwrap(), 0.3).unwrap();
        assert_eq!(plan.mask.layers[1].keep, direct);

        let full = prune_plan(&s, &genes, &scores, &PruneConfig::uniform(1.0)).unwrap();
        assert!(full.mask.layers.iter().all(|l| l.keep.iter().all(|&k| k)));

        assert!(prune_plan(&s, &genes[..2], &scores, &config).is_err());
    }

    proptest! {
        #[test]
        fn mask_scale_invariance_and_cardinality(
            a in prop::collection::vec(0.0f64..1.0, 2..40),
            b in prop::collection::vec(0.0f64..1.0, 40),
            p in (0.0f64..1.0, 0.0f64..1.0),
            c in 0.01f64..50.0,
            ratio in 0.01f64..1.0,
        ) {
            let n = a.len();
            let scores = vec![sv(CriterionId::L1, a.clone()), sv(CriterionId::Fpgm, b[..n].to_vec())];
            let g = gene(vec![p.0, p.1], vec![CriterionId::L1, CriterionId::Fpgm]);
            let scaled = gene(vec![p.0 * c, p.1 * c], g.selections.clone());
            let blended = blend_scores(&g, &scores).unwrap();
            prop_assert!(blended.iter().all(|&v| v >= 0.0 && v <= p.0 + p.1 + 1e-12));
            let m1 = make_mask(&blended, ratio).unwrap();
            let m2 = make_mask(&blend_scores(&scaled, &scores).unwrap(), ratio).unwrap();
            // Scaling can only reorder filters whose blended scores are within rounding of each other.
            let order_safe = {
                let mut sorted = blended.clone();
                sorted.sort_by(f64::total_cmp);
                sorted.windows(2).all(|w| w[1] - w[0] > 1e-9)
            };
            if order_safe {
                prop_assert_eq!(&m1, &m2);
            }
            prop_assert_eq!(m1.iter().filter(|&&k| k).count(), keep_count(ratio, n));
            prop_assert_eq!(make_mask(&blended, ratio).unwrap(), m1);
        }
    }
}
