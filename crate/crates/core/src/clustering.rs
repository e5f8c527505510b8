//! Per-layer K-Means over criterion correlation vectors, and search-space
//! accounting for the blended search.

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::criteria::CriterionId;
use crate::error::{Error, Result};
use crate::rankstats::{correlation_vectors, CorrelationMatrix};

pub const MAX_LLOYD_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Squared-Euclidean objective after each Lloyd iteration.
    pub objective_trace: Vec<f64>,
}

impl KMeansResult {
    pub fn objective(&self, points: &[Vec<f64>]) -> f64 {
        objective(points, &self.centroids, &self.assignments)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn objective(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points.iter().zip(assignments).map(|(p, &a)| sq_dist(p, &centroids[a])).sum()
}

/// Index of the nearest centroid; ties go to the lower index.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let m = points.len();
    let mut centroids = vec![points[rng.random_range(0..m)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = m - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // Guard against rounding landing on an already-covered point.
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&d| d > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            // Every point already coincides with a centre.
            rng.random_range(0..m)
        };
        let c = points[pick].clone();
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Seeded K-Means: k-means++ initialization, Lloyd iterations until the
/// assignment stops changing or [`MAX_LLOYD_ITERATIONS`] is reached.
///
/// An empty cluster is re-seeded at the point farthest from its current
/// centroid. Coincident points always share an assignment unless there are
/// fewer distinct points than clusters, in which case the final pass splits
/// duplicates so every cluster is non-empty.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    let m = points.len();
    if k == 0 || k > m {
        return Err(Error::InvalidArgument(format!("k-means needs 1 <= K <= M, got K={k}, M={m}")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidArgument("k-means vectors differ in dimension".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("k-means input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(points, k, &mut rng);
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut trace = Vec::new();

    for _ in 0..MAX_LLOYD_ITERATIONS {
        reseed_empty(points, &mut centroids, &mut assignments);
        update_centroids(points, &mut centroids, &assignments);
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        let changed = next != assignments;
        assignments = next;
        trace.push(objective(points, &centroids, &assignments));
        if !changed && counts(&assignments, k).iter().all(|&c| c > 0) {
            break;
        }
    }
    if counts(&assignments, k).iter().any(|&c| c == 0) {
        force_nonempty(points, &mut centroids, &mut assignments);
        update_centroids(points, &mut centroids, &assignments);
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        objective_trace: trace,
    })
}

fn counts(assignments: &[usize], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for &a in assignments {
        c[a] += 1;
    }
    c
}

fn update_centroids(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assignments: &[usize]) {
    let dim = points[0].len();
    let k = centroids.len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut n = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        n[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for c in 0..k {
        if n[c] > 0 {
            centroids[c] = sums[c].iter().map(|s| s / n[c] as f64).collect();
        }
    }
}

/// Moves each empty cluster's centroid onto the point farthest from its own
/// centroid. The point brings every point coincident with it along, so only
/// points whose coincident group is a strict subset of their cluster qualify.
fn reseed_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assignments: &mut [usize]) {
    let k = centroids.len();
    loop {
        let n = counts(assignments, k);
        let Some(empty) = n.iter().position(|&c| c == 0) else { return };
        let group_of = |i: usize| -> Vec<usize> {
            (0..points.len())
                .filter(|&j| sq_dist(&points[j], &points[i]) == 0.0)
                .collect()
        };
        let mut best: Option<(usize, f64)> = None;
        for i in 0..points.len() {
            let d = sq_dist(&points[i], &centroids[assignments[i]]);
            if best.is_some_and(|(_, bd)| bd >= d) {
                continue;
            }
            if group_of(i).len() < n[assignments[i]] {
                best = Some((i, d));
            }
        }
        let Some((i, _)) = best else { return };
        centroids[empty] = points[i].clone();
        for j in group_of(i) {
            assignments[j] = empty;
        }
    }
}

/// Last resort when there are fewer distinct points than clusters.
fn force_nonempty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assignments: &mut [usize]) {
    let k = centroids.len();
    loop {
        let n = counts(assignments, k);
        let Some(empty) = n.iter().position(|&c| c == 0) else { return };
        // Take the highest-index member of the largest cluster.
        let (big, _) = n.iter().enumerate().max_by_key(|&(c, &sz)| (sz, std::cmp::Reverse(c))).unwrap();
        let i = (0..points.len()).rev().find(|&i| assignments[i] == big).unwrap();
        assignments[i] = empty;
        centroids[empty] = points[i].clone();
    }
}

/// One layer's partition of the criteria.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaClustering {
    #[serde(rename = "layer")]
    pub layer_index: usize,
    #[serde(rename = "K")]
    pub k: usize,
    /// Each cluster sorted by criterion code; clusters ordered by their smallest code.
    pub clusters: Vec<Vec<CriterionId>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub centroids: Vec<Vec<f64>>,
}

impl CriteriaClustering {
    pub fn criteria(&self) -> impl Iterator<Item = CriterionId> + '_ {
        self.clusters.iter().flatten().copied()
    }

    pub fn cluster_of(&self, c: CriterionId) -> Option<usize> {
        self.clusters.iter().position(|cl| cl.contains(&c))
    }

    pub fn validate(&self) -> Result<()> {
        if self.k != self.clusters.len() || self.k == 0 {
            return Err(Error::InvalidArgument(format!(
                "layer {} clustering declares K={} with {} clusters",
                self.layer_index,
                self.k,
                self.clusters.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for cl in &self.clusters {
            if cl.is_empty() {
                return Err(Error::InvalidArgument(format!("layer {} has an empty cluster", self.layer_index)));
            }
            for c in cl {
                if !seen.insert(*c) {
                    return Err(Error::InvalidArgument(format!(
                        "layer {} lists criterion {c} twice",
                        self.layer_index
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Clusters a layer's criteria by their correlation vectors.
pub fn cluster_criteria(matrix: &CorrelationMatrix, k: usize, seed: u64) -> Result<CriteriaClustering> {
    let vectors = correlation_vectors(matrix);
    let points: Vec<Vec<f64>> = vectors.iter().map(|v| v.vector.clone()).collect();
    let result = kmeans(&points, k, seed)?;
    let mut groups: Vec<(Vec<CriterionId>, Vec<f64>)> = (0..k)
        .map(|c| {
            let mut members: Vec<CriterionId> = vectors
                .iter()
                .zip(&result.assignments)
                .filter(|(_, &a)| a == c)
                .map(|(v, _)| v.criterion)
                .collect();
            members.sort();
            (members, result.centroids[c].clone())
        })
        .collect();
    groups.sort_by_key(|(members, _)| members[0]);
    let (clusters, centroids) = groups.into_iter().unzip();
    Ok(CriteriaClustering {
        layer_index: matrix.layer_index,
        k,
        clusters,
        centroids,
    })
}

/// Exact search-space sizes over `layers` layers for `n` criteria in `k` clusters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpace {
    /// Largest product of `k` positive cluster sizes summing to `n`, per layer.
    pub blended_per_layer: BigUint,
    /// `C(n, k)` per layer.
    pub exhaustive_per_layer: BigUint,
    pub blended: BigUint,
    pub exhaustive: BigUint,
}

pub fn binomial(n: u64, k: u64) -> BigUint {
    let k = k.min(n - k.min(n));
    let mut acc = BigUint::from(1u32);
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// Selection combinations when one criterion is drawn from each of `k`
/// clusters, in the worst (most balanced) partition of `n` criteria, versus
/// choosing `k` of `n` outright.
pub fn search_space_size(n: u64, k: u64, layers: u32) -> Result<SearchSpace> {
    if k == 0 || k > n || layers == 0 {
        return Err(Error::InvalidArgument(format!(
            "search space needs 1 <= K <= N and L >= 1, got N={n}, K={k}, L={layers}"
        )));
    }
    let q = n / k;
    let r = n % k;
    let blended_per_layer = BigUint::from(q).pow((k - r) as u32) * BigUint::from(q + 1).pow(r as u32);
    let exhaustive_per_layer = binomial(n, k);
    Ok(SearchSpace {
        blended: blended_per_layer.pow(layers),
        exhaustive: exhaustive_per_layer.pow(layers),
        blended_per_layer,
        exhaustive_per_layer,
    })
}

/// Exact check of `(n/k)^k <= C(n, k)` as `n^k <= C(n, k) · k^k`.
pub fn am_gm_bound_holds(n: u64, k: u64) -> bool {
    BigUint::from(n).pow(k as u32) <= binomial(n, k) * BigUint::from(k).pow(k as u32)
}
