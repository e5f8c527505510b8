//! Evolutionary search over genes: per-layer calibration factors and
//! per-cluster criterion selections.
//!
//! One iteration is crossover → mutation → evaluate → elitism → drop →
//! evaluate the replacements. Operators run on the calling thread with a
//! single seeded RNG; only fitness evaluation is parallel, so the trajectory
//! is fixed by the seed for any deterministic evaluator.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blend::{prune_plan, LayerGene};
use crate::clustering::CriteriaClustering;
use crate::criteria::{CriterionId, ScoreVector};
use crate::error::{Error, Result};
use crate::fitness::{Evaluator, FitnessRequest};
use crate::snapshot::{Mask, NetworkSnapshot, PruneConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EAConfig {
    pub population_size: usize,
    pub iterations: usize,
    pub mutation_prob: f64,
    pub crossover_prob: f64,
    pub drop_ratio: f64,
    pub finetune_epochs: usize,
    /// Finetune budget used by [`finalize`].
    pub full_finetune_epochs: usize,
    pub resample_prob: f64,
    pub topk: usize,
    pub seed: u64,
    /// Concurrent fitness evaluations; 0 uses every core.
    pub workers: usize,
}

impl Default for EAConfig {
    fn default() -> Self {
        Self::cifar()
    }
}

impl EAConfig {
    pub fn cifar() -> Self {
        Self {
            population_size: 20,
            iterations: 50,
            mutation_prob: 0.1,
            crossover_prob: 0.8,
            drop_ratio: 0.08,
            finetune_epochs: 3,
            full_finetune_epochs: 40,
            resample_prob: 0.2,
            topk: 5,
            seed: 0,
            workers: 0,
        }
    }

    pub fn imagenet() -> Self {
        Self {
            population_size: 10,
            iterations: 30,
            drop_ratio: 0.1,
            finetune_epochs: 1,
            full_finetune_epochs: 20,
            ..Self::cifar()
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "cifar" => Some(Self::cifar()),
            "imagenet" => Some(Self::imagenet()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.population_size < 2 {
            return bad(format!("population size {} is below 2", self.population_size));
        }
        if self.topk == 0 || self.topk > self.population_size {
            return bad(format!("topk {} outside 1..={}", self.topk, self.population_size));
        }
        for (name, p) in [
            ("mutation probability", self.mutation_prob),
            ("crossover probability", self.crossover_prob),
            ("resample probability", self.resample_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.drop_ratio) {
            return bad(format!("drop ratio {} outside [0, 1)", self.drop_ratio));
        }
        Ok(())
    }

    /// Number of genes replaced by [`drop`] each iteration.
    pub fn drop_count(&self) -> usize {
        drop_count(self.drop_ratio, self.population_size)
    }
}

fn drop_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gene {
    pub id: u64,
    pub layers: Vec<LayerGene>,
    pub fitness: Option<f64>,
}

impl Gene {
    pub fn validate(&self, clusterings: &[CriteriaClustering]) -> Result<()> {
        if self.layers.len() != clusterings.len() {
            return Err(Error::InvalidArgument(format!(
                "gene {} has {} layers, clustering has {}",
                self.id,
                self.layers.len(),
                clusterings.len()
            )));
        }
        for (li, (g, c)) in self.layers.iter().zip(clusterings).enumerate() {
            if g.layer_index != li {
                return Err(Error::InvalidArgument(format!("gene {} layer {li} is tagged {}", self.id, g.layer_index)));
            }
            g.validate(c)?;
        }
        Ok(())
    }

    fn same_genome(&self, other: &Gene) -> bool {
        self.layers == other.layers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub best: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_gene: Gene,
    pub topk_genes: Vec<Gene>,
    /// Entry 0 describes the initial population.
    pub fitness_history: Vec<HistoryEntry>,
    /// Evaluator calls made; cache hits are not counted.
    pub evaluations: usize,
}

/// Hands out gene ids in creation order.
#[derive(Debug, Clone, Default)]
pub struct GeneIds(u64);

impl GeneIds {
    pub fn new() -> Self {
        Self(0)
    }

    pub fn starting_at(next: u64) -> Self {
        Self(next)
    }

    pub fn next_id(&mut self) -> u64 {
        let id = self.0;
        self.0 += 1;
        id
    }
}

fn pick<R: Rng + ?Sized>(cluster: &[CriterionId], rng: &mut R) -> CriterionId {
    cluster[rng.random_range(0..cluster.len())]
}

/// Factors i.i.d. uniform on [0, 1]; selections uniform within each cluster.
pub fn random_gene<R: Rng + ?Sized>(clusterings: &[CriteriaClustering], rng: &mut R, ids: &mut GeneIds) -> Gene {
    let layers = clusterings
        .iter()
        .enumerate()
        .map(|(li, c)| {
            let mut factors = Vec::with_capacity(c.k);
            let mut selections = Vec::with_capacity(c.k);
            for cluster in &c.clusters {
                factors.push(rng.random::<f64>());
                selections.push(pick(cluster, rng));
            }
            LayerGene {
                layer_index: li,
                factors,
                selections,
            }
        })
        .collect();
    Gene {
        id: ids.next_id(),
        layers,
        fitness: None,
    }
}

pub fn init_population<R: Rng + ?Sized>(
    clusterings: &[CriteriaClustering],
    population_size: usize,
    rng: &mut R,
    ids: &mut GeneIds,
) -> Vec<Gene> {
    (0..population_size).map(|_| random_gene(clusterings, rng, ids)).collect()
}

/// Positionwise crossover: each (layer, cluster) slot comes from `a` with
/// probability `crossover_prob`, else from `b`; independently, with
/// probability `resample_prob` the slot's selection is redrawn from its cluster.
pub fn crossover_pair<R: Rng + ?Sized>(
    a: &Gene,
    b: &Gene,
    crossover_prob: f64,
    resample_prob: f64,
    clusterings: &[CriteriaClustering],
    rng: &mut R,
    ids: &mut GeneIds,
) -> Gene {
    let layers = a
        .layers
        .iter()
        .zip(&b.layers)
        .zip(clusterings)
        .map(|((la, lb), c)| {
            let mut child = la.clone();
            for k in 0..child.factors.len() {
                if !rng.random_bool(crossover_prob) {
                    child.factors[k] = lb.factors[k];
                    child.selections[k] = lb.selections[k];
                }
                if rng.random_bool(resample_prob) {
                    child.selections[k] = pick(&c.clusters[k], rng);
                }
            }
            child
        })
        .collect();
    Gene {
        id: ids.next_id(),
        layers,
        fitness: None,
    }
}

/// Generational crossover over random disjoint pairs. Each pair yields two
/// children with parent roles swapped; with an odd count the leftover parent
/// is matched with a random partner for one child. Returns as many children
/// as parents.
pub fn crossover<R: Rng + ?Sized>(
    parents: &[Gene],
    crossover_prob: f64,
    resample_prob: f64,
    clusterings: &[CriteriaClustering],
    rng: &mut R,
    ids: &mut GeneIds,
) -> Result<Vec<Gene>> {
    if parents.len() < 2 {
        return Err(Error::InvalidArgument(format!("crossover needs 2 parents, got {}", parents.len())));
    }
    let mut order: Vec<usize> = (0..parents.len()).collect();
    order.shuffle(rng);
    let mut children = Vec::with_capacity(parents.len());
    for pair in order.chunks(2) {
        if let [i, j] = *pair {
            let (a, b) = (&parents[i], &parents[j]);
            children.push(crossover_pair(a, b, crossover_prob, resample_prob, clusterings, rng, ids));
            children.push(crossover_pair(b, a, crossover_prob, resample_prob, clusterings, rng, ids));
        } else {
            let i = pair[0];
            let mut j = rng.random_range(0..parents.len() - 1);
            if j >= i {
                j += 1;
            }
            children.push(crossover_pair(&parents[i], &parents[j], crossover_prob, resample_prob, clusterings, rng, ids));
        }
    }
    Ok(children)
}

/// Per slot, redraws the factor with probability `mutation_prob` and,
/// independently, the selection with the same probability. Changed genes
/// lose their fitness.
pub fn mutation<R: Rng + ?Sized>(pop: &mut [Gene], mutation_prob: f64, clusterings: &[CriteriaClustering], rng: &mut R) {
    for gene in pop.iter_mut() {
        let mut changed = false;
        for (layer, c) in gene.layers.iter_mut().zip(clusterings) {
            for k in 0..layer.factors.len() {
                if rng.random_bool(mutation_prob) {
                    layer.factors[k] = rng.random::<f64>();
                    changed = true;
                }
                if rng.random_bool(mutation_prob) {
                    layer.selections[k] = pick(&c.clusters[k], rng);
                    changed = true;
                }
            }
        }
        if changed {
            gene.fitness = None;
        }
    }
}

/// Index of the fittest gene; ties go to the lower id.
fn best_index(pop: &[Gene]) -> Option<usize> {
    (0..pop.len())
        .filter(|&i| pop[i].fitness.is_some())
        .max_by(|&a, &b| {
            let (fa, fb) = (pop[a].fitness.unwrap(), pop[b].fitness.unwrap());
            fa.total_cmp(&fb).then(pop[b].id.cmp(&pop[a].id))
        })
}

/// Replaces the `⌊drop_ratio · n⌋` least fit genes with fresh random ones.
/// The best gene is never replaced.
pub fn drop<R: Rng + ?Sized>(
    pop: &mut [Gene],
    drop_ratio: f64,
    clusterings: &[CriteriaClustering],
    rng: &mut R,
    ids: &mut GeneIds,
) -> Result<Vec<usize>> {
    if let Some(g) = pop.iter().find(|g| g.fitness.is_none()) {
        return Err(Error::InvalidArgument(format!("gene {} has not been evaluated", g.id)));
    }
    let Some(best) = best_index(pop) else {
        return Ok(Vec::new());
    };
    let count = drop_count(drop_ratio, pop.len()).min(pop.len() - 1);
    let mut order: Vec<usize> = (0..pop.len()).filter(|&i| i != best).collect();
    // Least fit first; among equals the newer gene goes first.
    order.sort_by(|&a, &b| {
        pop[a]
            .fitness
            .unwrap()
            .total_cmp(&pop[b].fitness.unwrap())
            .then(pop[b].id.cmp(&pop[a].id))
    });
    let mut replaced: Vec<usize> = order[..count].to_vec();
    replaced.sort_unstable();
    for &i in &replaced {
        pop[i] = random_gene(clusterings, rng, ids);
    }
    Ok(replaced)
}

/// Gene that scores with `criterion` alone: factor 1 on the cluster holding
/// it, 0 elsewhere, in every layer.
pub fn single_criterion_gene(criterion: CriterionId, clusterings: &[CriteriaClustering], id: u64) -> Result<Gene> {
    let layers = clusterings
        .iter()
        .enumerate()
        .map(|(li, c)| {
            let home = c.cluster_of(criterion).ok_or_else(|| {
                Error::InvalidArgument(format!("criterion {criterion} is not clustered in layer {li}"))
            })?;
            Ok(LayerGene {
                layer_index: li,
                factors: (0..c.k).map(|k| if k == home { 1.0 } else { 0.0 }).collect(),
                selections: c
                    .clusters
                    .iter()
                    .enumerate()
                    .map(|(k, members)| if k == home { criterion } else { members[0] })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Gene {
        id,
        layers,
        fitness: None,
    })
}

/// Everything needed to turn a gene into masks.
#[derive(Clone, Copy)]
pub struct SearchContext<'a> {
    pub snapshot: &'a NetworkSnapshot,
    pub clusterings: &'a [CriteriaClustering],
    pub scores: &'a [Vec<ScoreVector>],
    pub prune: &'a PruneConfig,
}

impl SearchContext<'_> {
    pub fn mask(&self, gene: &Gene) -> Result<Mask> {
        Ok(prune_plan(self.snapshot, &gene.layers, self.scores, self.prune)?.mask)
    }

    fn validate(&self) -> Result<()> {
        let l = self.snapshot.layers.len();
        if self.clusterings.len() != l || self.scores.len() != l {
            return Err(Error::InvalidArgument(format!(
                "{} clusterings and {} score layers for a {l}-layer snapshot",
                self.clusterings.len(),
                self.scores.len()
            )));
        }
        for c in self.clusterings {
            c.validate()?;
        }
        self.prune.validate(self.snapshot)
    }
}

/// Evaluates unevaluated genes, reusing fitness of previously seen masks.
struct FitnessCache<'a, E: ?Sized> {
    evaluator: &'a E,
    epochs: usize,
    known: HashMap<Vec<u8>, f64>,
    calls: usize,
}

impl<E: Evaluator + ?Sized> FitnessCache<'_, E> {
    fn evaluate(&mut self, ctx: &SearchContext, pop: &mut [Gene], pool: &rayon::ThreadPool) -> Result<()> {
        let mut pending: Vec<(usize, Mask, Vec<u8>)> = Vec::new();
        for (i, gene) in pop.iter().enumerate() {
            if gene.fitness.is_none() {
                let mask = ctx.mask(gene)?;
                let fp = mask.fingerprint();
                pending.push((i, mask, fp));
            }
        }
        let mut work: Vec<(u64, &Mask, &Vec<u8>)> = Vec::new();
        let mut queued: HashMap<&Vec<u8>, ()> = HashMap::new();
        for (i, mask, fp) in &pending {
            if !self.known.contains_key(fp) && queued.insert(fp, ()).is_none() {
                work.push((pop[*i].id, mask, fp));
            }
        }
        let epochs = self.epochs;
        let evaluator = self.evaluator;
        let results: Vec<_> = pool.install(|| {
            work.par_iter()
                .map(|&(id, mask, _)| {
                    let req = FitnessRequest {
                        request_id: id,
                        masks: mask.clone(),
                        finetune_epochs: epochs,
                    };
                    evaluator.evaluate(&req).map_err(|source| Error::Evaluation { gene: id, source })
                })
                .collect()
        });
        self.calls += work.len();
        for ((_, _, fp), result) in work.iter().zip(results) {
            let fitness = result?.fitness;
            if !fitness.is_finite() {
                return Err(Error::NonFiniteInput(format!("fitness {fitness} for mask {}", hex::encode(fp))));
            }
            self.known.insert((*fp).clone(), fitness);
        }
        for (i, _, fp) in &pending {
            pop[*i].fitness = Some(self.known[fp]);
        }
        Ok(())
    }
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {workers} workers: {e}")))
}

fn history_entry(iteration: usize, pop: &[Gene]) -> HistoryEntry {
    let f: Vec<f64> = pop.iter().map(|g| g.fitness.expect("evaluated")).collect();
    HistoryEntry {
        iteration,
        best: f.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: f.iter().sum::<f64>() / f.len() as f64,
    }
}

/// Genes sorted by fitness, best first; ties by lower id.
fn ranked(pop: &[Gene]) -> Vec<Gene> {
    let mut out = pop.to_vec();
    out.sort_by(|a, b| {
        b.fitness
            .unwrap_or(f64::NEG_INFINITY)
            .total_cmp(&a.fitness.unwrap_or(f64::NEG_INFINITY))
            .then(a.id.cmp(&b.id))
    });
    out
}

/// Per-iteration observer, called with the population after each iteration
/// (iteration 0 is the evaluated initial population).
pub trait SearchObserver {
    fn iteration(&mut self, iteration: usize, population: &[Gene]);
}

impl SearchObserver for () {
    fn iteration(&mut self, _: usize, _: &[Gene]) {}
}

impl<F: FnMut(usize, &[Gene])> SearchObserver for F {
    fn iteration(&mut self, iteration: usize, population: &[Gene]) {
        self(iteration, population)
    }
}

pub fn search<E: Evaluator + ?Sized>(ctx: &SearchContext, config: &EAConfig, evaluator: &E) -> Result<SearchResult> {
    search_observed(ctx, config, evaluator, &mut ())
}

pub fn search_observed<E: Evaluator + ?Sized>(
    ctx: &SearchContext,
    config: &EAConfig,
    evaluator: &E,
    observer: &mut dyn SearchObserver,
) -> Result<SearchResult> {
    config.validate()?;
    ctx.validate()?;
    let pool = thread_pool(config.workers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ids = GeneIds::new();
    let mut cache = FitnessCache {
        evaluator,
        epochs: config.finetune_epochs,
        known: HashMap::new(),
        calls: 0,
    };

    let mut pop = init_population(ctx.clusterings, config.population_size, &mut rng, &mut ids);
    cache.evaluate(ctx, &mut pop, &pool)?;
    let mut history = vec![history_entry(0, &pop)];
    observer.iteration(0, &pop);

    for iteration in 1..=config.iterations {
        let elite = pop[best_index(&pop).expect("population is evaluated")].clone();
        let mut next = crossover(&pop, config.crossover_prob, config.resample_prob, ctx.clusterings, &mut rng, &mut ids)?;
        mutation(&mut next, config.mutation_prob, ctx.clusterings, &mut rng);
        cache.evaluate(ctx, &mut next, &pool)?;
        if !next.iter().any(|g| g.same_genome(&elite) && g.fitness >= elite.fitness) {
            let worst = ranked(&next).last().map(|g| g.id).expect("non-empty");
            let slot = next.iter().position(|g| g.id == worst).expect("present");
            next[slot] = elite;
        }
        drop(&mut next, config.drop_ratio, ctx.clusterings, &mut rng, &mut ids)?;
        cache.evaluate(ctx, &mut next, &pool)?;
        pop = next;
        history.push(history_entry(iteration, &pop));
        observer.iteration(iteration, &pop);
    }

    let topk_genes: Vec<Gene> = ranked(&pop).into_iter().take(config.topk).collect();
    Ok(SearchResult {
        best_gene: topk_genes[0].clone(),
        topk_genes,
        fitness_history: history,
        evaluations: cache.calls,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finalized {
    /// Winning gene with its full-budget fitness.
    pub gene: Gene,
    pub mask: Mask,
    /// `(gene id, full-budget fitness)` for every candidate, in input order.
    pub candidates: Vec<(u64, f64)>,
}

/// Re-evaluates each candidate with `epochs` of finetuning and keeps the
/// fittest; ties go to the lower gene id.
pub fn finalize<E: Evaluator + ?Sized>(ctx: &SearchContext, topk: &[Gene], evaluator: &E, epochs: usize) -> Result<Finalized> {
    if topk.is_empty() {
        return Err(Error::InvalidArgument("finalize needs at least one gene".into()));
    }
    let mut best: Option<(Gene, Mask)> = None;
    let mut candidates = Vec::with_capacity(topk.len());
    for gene in topk {
        let mask = ctx.mask(gene)?;
        let req = FitnessRequest {
            request_id: gene.id,
            masks: mask.clone(),
            finetune_epochs: epochs,
        };
        let fitness = evaluator
            .evaluate(&req)
            .map_err(|source| Error::Evaluation { gene: gene.id, source })?
            .fitness;
        candidates.push((gene.id, fitness));
        let better = match &best {
            None => true,
            Some((b, _)) => {
                let bf = b.fitness.unwrap();
                fitness > bf || (fitness == bf && gene.id < b.id)
            }
        };
        if better {
            let mut g = gene.clone();
            g.fitness = Some(fitness);
            best = Some((g, mask));
        }
    }
    let (gene, mask) = best.expect("non-empty");
    Ok(Finalized { gene, mask, candidates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::cluster_criteria;
    use crate::criteria::score_all;
    use crate::fitness::{EvalError, FitnessResponse, OracleEvaluator};
    use crate::rankstats::correlation_matrix;
    use crate::snapshot::{synth_generate, SynthSpec};
    use proptest::prelude::*;

    fn clusterings(layers: usize, k: usize) -> Vec<CriteriaClustering> {
        let (snap, _) = synth_generate(&SynthSpec {
            filters: vec![12; layers],
            fan_in: 4,
            seed: 9,
        })
        .unwrap();
        score_all(&snap, false)
            .unwrap()
            .iter()
            .enumerate()
            .map(|(li, s)| {
                let mut c = cluster_criteria(&correlation_matrix(s).unwrap(), k, 1).unwrap();
                c.layer_index = li;
                c
            })
            .collect()
    }

    /// One-sample Kolmogorov–Smirnov statistic against U[0, 1].
    fn ks_uniform(mut xs: Vec<f64>) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| (x - i as f64 / n).max((i + 1) as f64 / n - x))
            .fold(0.0, f64::max)
    }

    /// Asymptotic critical value at α = 0.01.
    fn ks_critical(n: usize) -> f64 {
        1.628 / (n as f64).sqrt()
    }

    fn all_factors(pop: &[Gene]) -> Vec<f64> {
        pop.iter().flat_map(|g| g.layers.iter().flat_map(|l| l.factors.clone())).collect()
    }

    #[test]
    fn ks_oracle_flags_skewed_samples() {
        let skewed: Vec<f64> = (0..10_000).map(|i| (i as f64 / 10_000.0).powi(2)).collect();
        assert!(ks_uniform(skewed) > ks_critical(10_000));
        let grid: Vec<f64> = (0..10_000).map(|i| (i as f64 + 0.5) / 10_000.0).collect();
        assert!(ks_uniform(grid) < 1e-3);
    }

    #[test]
    fn profiles() {
        let c = EAConfig::cifar();
        assert_eq!((c.population_size, c.iterations, c.drop_ratio, c.finetune_epochs), (20, 50, 0.08, 3));
        assert_eq!((c.mutation_prob, c.crossover_prob, c.topk), (0.1, 0.8, 5));
        let i = EAConfig::imagenet();
        assert_eq!((i.population_size, i.iterations, i.drop_ratio, i.finetune_epochs), (10, 30, 0.1, 1));
        assert_eq!(i.drop_count(), 1);
        assert_eq!(c.drop_count(), 1);
        assert!(EAConfig { population_size: 1, topk: 1, ..c.clone() }.validate().is_err());
        assert!(EAConfig { topk: 21, ..c.clone() }.validate().is_err());
        assert!(EAConfig { drop_ratio: 1.0, ..c.clone() }.validate().is_err());
        assert!(EAConfig { mutation_prob: 1.5, ..c.clone() }.validate().is_err());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn init_population_is_feasible_deterministic_and_uniform() {
        let cl = clusterings(2, 3);
        let pop = init_population(&cl, 20, &mut ChaCha8Rng::seed_from_u64(1), &mut GeneIds::new());
        assert_eq!(pop.len(), 20);
        pop.iter().for_each(|g| g.validate(&cl).unwrap());
        let again = init_population(&cl, 20, &mut ChaCha8Rng::seed_from_u64(1), &mut GeneIds::new());
        assert_eq!(pop, again);
        let ids: std::collections::BTreeSet<u64> = pop.iter().map(|g| g.id).collect();
        assert_eq!(ids.len(), 20);

        let one = clusterings(1, 1);
        let big = init_population(&one, 10_000, &mut ChaCha8Rng::seed_from_u64(2), &mut GeneIds::new());
        let d = ks_uniform(all_factors(&big));
        assert!(d < ks_critical(10_000), "KS statistic {d}");
    }

    #[test]
    fn selections_cover_each_cluster_uniformly() {
        let cl = clusterings(1, 2);
        let pop = init_population(&cl, 6000, &mut ChaCha8Rng::seed_from_u64(3), &mut GeneIds::new());
        for (k, members) in cl[0].clusters.iter().enumerate() {
            let expected = 6000.0 / members.len() as f64;
            for m in members {
                let count = pop.iter().filter(|g| g.layers[0].selections[k] == *m).count() as f64;
                let sigma = (6000.0 * (1.0 / members.len() as f64) * (1.0 - 1.0 / members.len() as f64)).sqrt();
                assert!((count - expected).abs() <= 4.0 * sigma.max(1.0), "{m}: {count} vs {expected}");
            }
        }
    }

    #[test]
    fn crossover_boundaries() {
        let cl = clusterings(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ids = GeneIds::new();
        let a = random_gene(&cl, &mut rng, &mut ids);
        let b = random_gene(&cl, &mut rng, &mut ids);
        let c1 = crossover_pair(&a, &b, 1.0, 0.0, &cl, &mut rng, &mut ids);
        assert!(c1.same_genome(&a));
        let c0 = crossover_pair(&a, &b, 0.0, 0.0, &cl, &mut rng, &mut ids);
        assert!(c0.same_genome(&b));
        for p in [0.0, 0.3, 0.8, 1.0] {
            assert!(crossover_pair(&a, &a, p, 0.0, &cl, &mut rng, &mut ids).same_genome(&a));
        }
        let mixed = crossover_pair(&a, &b, 0.5, 1.0, &cl, &mut rng, &mut ids);
        mixed.validate(&cl).unwrap();
        for (l, layer) in mixed.layers.iter().enumerate() {
            for (k, f) in layer.factors.iter().enumerate() {
                assert!(*f == a.layers[l].factors[k] || *f == b.layers[l].factors[k]);
            }
        }
    }

    #[test]
    fn crossover_population_shape() {
        let cl = clusterings(1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ids = GeneIds::new();
        for n in [2, 3, 7, 20] {
            let parents = init_population(&cl, n, &mut rng, &mut ids);
            let children = crossover(&parents, 0.8, 0.2, &cl, &mut rng, &mut ids).unwrap();
            assert_eq!(children.len(), n);
            assert!(children.iter().all(|c| c.fitness.is_none() && c.id >= n as u64));
            children.iter().for_each(|g| g.validate(&cl).unwrap());
        }
        assert!(crossover(&init_population(&cl, 1, &mut rng, &mut ids), 0.8, 0.2, &cl, &mut rng, &mut ids).is_err());
    }

    #[test]
    fn mutation_rates() {
        let cl = clusterings(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ids = GeneIds::new();
        let base = init_population(&cl, 10_000, &mut rng, &mut ids);

        let mut same = base.clone();
        mutation(&mut same, 0.0, &cl, &mut rng);
        assert_eq!(same, base);

        let mut all = base.clone();
        mutation(&mut all, 1.0, &cl, &mut rng);
        let changed = all.iter().zip(&base).filter(|(a, b)| a.layers[0].factors != b.layers[0].factors).count();
        assert_eq!(changed, 10_000);
        assert!(ks_uniform(all_factors(&all)) < ks_critical(10_000));

        let mut some = base.clone();
        mutation(&mut some, 0.1, &cl, &mut rng);
        let changed = some.iter().zip(&base).filter(|(a, b)| a.layers[0].factors != b.layers[0].factors).count() as f64;
        let sigma = (10_000.0f64 * 0.1 * 0.9).sqrt();
        assert!((changed - 1000.0).abs() <= 3.0 * sigma, "{changed} changed factors");
    }

    #[test]
    fn drop_replaces_the_least_fit_and_keeps_the_best() {
        let cl = clusterings(1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ids = GeneIds::new();
        let mut pop = init_population(&cl, 10, &mut rng, &mut ids);
        assert!(drop(&mut pop, 0.1, &cl, &mut rng, &mut ids).is_err());
        for (i, g) in pop.iter_mut().enumerate() {
            g.fitness = Some([0.5, 0.2, 0.9, 0.4, 0.1, 0.7, 0.3, 0.8, 0.6, 0.05][i]);
        }
        let before = pop.clone();
        assert!(drop(&mut pop, 0.0, &cl, &mut rng, &mut ids).unwrap().is_empty());
        assert_eq!(pop, before);
        let replaced = drop(&mut pop, 0.1, &cl, &mut rng, &mut ids).unwrap();
        assert_eq!(replaced, vec![9]);
        assert_eq!(pop.len(), 10);
        assert!(pop[9].fitness.is_none());
        assert!(pop.contains(&before[2]));
        for g in pop.iter_mut().filter(|g| g.fitness.is_none()) {
            g.fitness = Some(0.0);
        }
        let replaced = drop(&mut pop, 0.95, &cl, &mut rng, &mut ids).unwrap();
        assert_eq!(replaced.len(), 9);
        assert!(pop.contains(&before[2]));
    }

    fn oracle_setup(seed: u64, layers: usize, k: usize) -> (NetworkSnapshot, Vec<Vec<ScoreVector>>, Vec<CriteriaClustering>, OracleEvaluator) {
        let (snap, planted) = synth_generate(&SynthSpec {
            filters: vec![16; layers],
            fan_in: 8,
            seed,
        })
        .unwrap();
        let scores = score_all(&snap, false).unwrap();
        let cl = scores
            .iter()
            .enumerate()
            .map(|(li, s)| {
                let mut c = cluster_criteria(&correlation_matrix(s).unwrap(), k, seed).unwrap();
                c.layer_index = li;
                c
            })
            .collect();
        (snap, scores, cl, OracleEvaluator::new(planted))
    }

    #[test]
    fn search_is_deterministic_and_elitist() {
        let (snap, scores, cl, oracle) = oracle_setup(1, 2, 3);
        let prune = PruneConfig::uniform(0.5);
        let ctx = SearchContext { snapshot: &snap, clusterings: &cl, scores: &scores, prune: &prune };
        let cfg = EAConfig { iterations: 10, seed: 3, workers: 2, ..EAConfig::cifar() };
        let a = search(&ctx, &cfg, &oracle).unwrap();
        let b = search(&ctx, &EAConfig { workers: 1, ..cfg.clone() }, &oracle).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fitness_history.len(), 11);
        assert!(a.fitness_history.windows(2).all(|w| w[1].best >= w[0].best));
        assert_eq!(a.topk_genes.len(), 5);
        assert_eq!(a.best_gene, a.topk_genes[0]);
        assert_eq!(a.best_gene.fitness, Some(a.fitness_history.last().unwrap().best));
        assert!(a.evaluations <= 20 + 10 * 21);
    }

    #[test]
    fn zero_iterations_returns_ranked_initial_population() {
        let (snap, scores, cl, oracle) = oracle_setup(2, 1, 3);
        let prune = PruneConfig::uniform(0.5);
        let ctx = SearchContext { snapshot: &snap, clusterings: &cl, scores: &scores, prune: &prune };
        let cfg = EAConfig { iterations: 0, ..EAConfig::cifar() };
        let r = search(&ctx, &cfg, &oracle).unwrap();
        let mut init = init_population(&cl, 20, &mut ChaCha8Rng::seed_from_u64(0), &mut GeneIds::new());
        for g in &mut init {
            let req = FitnessRequest { request_id: g.id, masks: ctx.mask(g).unwrap(), finetune_epochs: 3 };
            g.fitness = Some(oracle.evaluate(&req).unwrap().fitness);
        }
        assert_eq!(r.topk_genes, ranked(&init)[..5].to_vec());
        assert_eq!(r.fitness_history.len(), 1);
    }

    struct Failing;

    impl Evaluator for Failing {
        fn evaluate(&self, req: &FitnessRequest) -> std::result::Result<FitnessResponse, EvalError> {
            if req.request_id % 2 == 1 {
                Err(EvalError::Reported { request_id: req.request_id, message: "boom".into() })
            } else {
                Ok(FitnessResponse::new(req.request_id, 0.5))
            }
        }
    }

    #[test]
    fn evaluator_failure_names_the_gene() {
        let (snap, scores, cl, _) = oracle_setup(3, 1, 3);
        let prune = PruneConfig::uniform(0.5);
        let ctx = SearchContext { snapshot: &snap, clusterings: &cl, scores: &scores, prune: &prune };
        match search(&ctx, &EAConfig::cifar(), &Failing) {
            Err(Error::Evaluation { gene, source: EvalError::Reported { request_id, .. } }) => {
                assert_eq!(gene % 2, 1);
                assert_eq!(gene, request_id);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_criterion_gene_reproduces_the_criterion_mask() {
        let (snap, scores, cl, _) = oracle_setup(4, 2, 3);
        let prune = PruneConfig::uniform(0.5);
        let ctx = SearchContext { snapshot: &snap, clusterings: &cl, scores: &scores, prune: &prune };
        for c in CriterionId::ALL {
            let g = single_criterion_gene(c, &cl, 0).unwrap();
            g.validate(&cl).unwrap();
            let mask = ctx.mask(&g).unwrap();
            for (li, lm) in mask.layers.iter().enumerate() {
                let s = scores[li].iter().find(|s| s.criterion == c).unwrap();
                assert_eq!(lm.keep, crate::blend::make_mask(&s.normalized, 0.5).unwrap());
            }
        }
    }

    #[test]
    fn finalize_picks_the_argmax_with_low_id_ties() {
        let (snap, scores, cl, oracle) = oracle_setup(5, 1, 3);
        let prune = PruneConfig::uniform(0.5);
        let ctx = SearchContext { snapshot: &snap, clusterings: &cl, scores: &scores, prune: &prune };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pop = init_population(&cl, 3, &mut rng, &mut GeneIds::new());
        let f = finalize(&ctx, &pop, &oracle, 40).unwrap();
        let best = f.candidates.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(f.gene.fitness, Some(best));
        assert_eq!(f.mask, ctx.mask(&f.gene).unwrap());

        let f1 = finalize(&ctx, &pop[1..2], &oracle, 40).unwrap();
        assert_eq!(f1.gene.id, pop[1].id);

        let mut twins = vec![pop[0].clone(), pop[0].clone()];
        twins[0].id = 9;
        twins[1].id = 4;
        assert_eq!(finalize(&ctx, &twins, &oracle, 40).unwrap().gene.id, 4);
        assert!(finalize(&ctx, &[], &oracle, 40).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn operators_preserve_feasibility(seed in any::<u64>(), n in 2usize..12, k in 1usize..5,
                                          cp in 0.0f64..=1.0, rp in 0.0f64..=1.0, mp in 0.0f64..=1.0, dr in 0.0f64..0.99) {
            let cl = clusterings(2, k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ids = GeneIds::new();
            let pop = init_population(&cl, n, &mut rng, &mut ids);
            let mut next = crossover(&pop, cp, rp, &cl, &mut rng, &mut ids).unwrap();
            prop_assert_eq!(next.len(), n);
            mutation(&mut next, mp, &cl, &mut rng);
            prop_assert_eq!(next.len(), n);
            for (i, g) in next.iter_mut().enumerate() {
                g.fitness = Some(i as f64);
            }
            drop(&mut next, dr, &cl, &mut rng, &mut ids).unwrap();
            prop_assert_eq!(next.len(), n);
            prop_assert!(next.iter().any(|g| g.fitness == Some((n - 1) as f64)));
            for g in &next {
                prop_assert!(g.validate(&cl).is_ok());
            }
        }
    }
}
