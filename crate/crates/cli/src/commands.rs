use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use critblend::blend::prune_plan;
use critblend::clustering::{cluster_criteria, search_space_size, CriteriaClustering};
use critblend::criteria::{score_all, CriterionId, ScoreVector};
use critblend::evolution::{finalize, search_observed, EAConfig, Finalized, Gene, SearchContext, SearchResult};
use critblend::fitness::toy::toy_pretrain;
use critblend::fitness::{Evaluator, ExternalEvaluator, OracleEvaluator, ToyDataset, ToyEvaluator, ToyModel};
use critblend::rankstats::{correlation_matrix, CorrelationMatrix};
use critblend::snapshot::{
    load_snapshot, snapshot_dir_digest, synth_generate, Mask, NetworkSnapshot, PruneConfig, SynthSpec, BLOB_FILE,
    MANIFEST_FILE,
};
use serde::{Deserialize, Serialize};

use crate::output::Run;
use crate::{
    ClusterArgs, CliError, EvaluatorSpec, Profile, PruneArgs, ReportArgs, ScoreArgs, SearchArgs, SynthArgs,
};

pub const PLANTED_FILE: &str = "planted_importance.json";
pub const SCORES_FILE: &str = "scores.json";
pub const CORRELATIONS_FILE: &str = "correlations.json";
pub const CLUSTERS_FILE: &str = "clusters.json";
pub const SEARCH_SPACE_FILE: &str = "search_space.json";
pub const SEARCH_RESULT_FILE: &str = "search_result.json";
pub const HISTORY_FILE: &str = "fitness_history.csv";
pub const CALIBRATION_JSON: &str = "calibration_report.json";
pub const CALIBRATION_CSV: &str = "calibration_report.csv";
pub const MASKS_JSON: &str = "masks.json";
pub const MASKS_BIN: &str = "masks.bin";
pub const PLAN_FILE: &str = "prune_plan.json";
pub const REPORT_FILE: &str = "report.txt";

#[derive(Debug, Serialize, Deserialize)]
pub struct PlantedLayer {
    pub name: String,
    pub importance: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PlantedFile {
    pub layers: Vec<PlantedLayer>,
}

fn load(dir: &Path) -> Result<(NetworkSnapshot, String), CliError> {
    let snapshot = load_snapshot(dir).map_err(CliError::Snapshot)?;
    let digest = snapshot_dir_digest(dir).map_err(CliError::Snapshot)?;
    Ok((snapshot, digest))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn prune_config(keep_ratio: f64, overrides: &[(String, f64)]) -> PruneConfig {
    overrides
        .iter()
        .fold(PruneConfig::uniform(keep_ratio), |c, (name, r)| c.with_override(name.clone(), *r))
}

fn matrices(scores: &[Vec<ScoreVector>]) -> Result<Vec<CorrelationMatrix>, CliError> {
    Ok(scores.iter().map(|s| correlation_matrix(s)).collect::<critblend::Result<_>>()?)
}

fn clusterings(matrices: &[CorrelationMatrix], k: usize, seed: u64) -> Result<Vec<CriteriaClustering>, CliError> {
    Ok(matrices.iter().map(|m| cluster_criteria(m, k, seed)).collect::<critblend::Result<_>>()?)
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let mut run = Run::start("synth");
    run.settings(a, Some(a.seed));
    let spec = SynthSpec {
        filters: a.filters.clone(),
        fan_in: a.fan_in,
        seed: a.seed,
    };
    let (snapshot, planted) = synth_generate(&spec)?;
    let (manifest, blob) = snapshot.encode()?;
    run.bytes(a.out.join(BLOB_FILE), &blob)?;
    run.bytes(a.out.join(MANIFEST_FILE), &manifest)?;
    let sidecar = PlantedFile {
        layers: snapshot
            .layers
            .iter()
            .zip(planted)
            .map(|(l, importance)| PlantedLayer { name: l.name.clone(), importance })
            .collect(),
    };
    run.json(a.out.join(PLANTED_FILE), &sidecar)?;
    let digest = snapshot.digest()?;
    println!("snapshot {} ({} layers) sha256 {digest}", a.out.display(), snapshot.layers.len());
    run.snapshot(digest);
    run.finish(&a.out)
}

pub fn score(a: &ScoreArgs) -> Result<(), CliError> {
    let mut run = Run::start("score");
    run.settings(a, None);
    let (snapshot, digest) = load(&a.snapshot)?;
    run.snapshot(digest);
    let scores = score_all(&snapshot, a.available_only)?;
    let flat: Vec<&ScoreVector> = scores.iter().flatten().collect();
    run.json(a.out.join(SCORES_FILE), &flat)?;
    println!("{} score vectors over {} layers", flat.len(), scores.len());
    run.finish(&a.out)
}

pub fn correlate(a: &ScoreArgs) -> Result<(), CliError> {
    let mut run = Run::start("correlate");
    run.settings(a, None);
    let (snapshot, digest) = load(&a.snapshot)?;
    run.snapshot(digest);
    let matrices = matrices(&score_all(&snapshot, a.available_only)?)?;
    run.json(a.out.join(CORRELATIONS_FILE), &matrices)?;
    for m in &matrices {
        run.bytes(a.out.join(format!("correlation_layer{}.csv", m.layer_index)), m.to_csv().as_bytes())?;
    }
    println!("{} correlation matrices of {} criteria", matrices.len(), matrices.first().map_or(0, |m| m.criteria.len()));
    run.finish(&a.out)
}

#[derive(Serialize)]
struct SearchSpaceReport {
    criteria: usize,
    clusters: usize,
    layers: usize,
    blended_per_layer: String,
    exhaustive_per_layer: String,
    blended: String,
    exhaustive: String,
}

pub fn cluster(a: &ClusterArgs) -> Result<(), CliError> {
    let mut run = Run::start("cluster");
    run.settings(a, Some(a.seed));
    let (snapshot, digest) = load(&a.snapshot)?;
    run.snapshot(digest);
    let matrices = matrices(&score_all(&snapshot, a.available_only)?)?;
    let clusterings = clusterings(&matrices, a.clusters, a.seed)?;
    run.json(a.out.join(CLUSTERS_FILE), &clusterings)?;
    let n = matrices.first().map_or(0, |m| m.criteria.len());
    let space = search_space_size(n as u64, a.clusters as u64, snapshot.layers.len() as u32)?;
    run.json(
        a.out.join(SEARCH_SPACE_FILE),
        &SearchSpaceReport {
            criteria: n,
            clusters: a.clusters,
            layers: snapshot.layers.len(),
            blended_per_layer: space.blended_per_layer.to_string(),
            exhaustive_per_layer: space.exhaustive_per_layer.to_string(),
            blended: space.blended.to_string(),
            exhaustive: space.exhaustive.to_string(),
        },
    )?;
    for (c, layer) in clusterings.iter().zip(&snapshot.layers) {
        let groups: Vec<String> = c
            .clusters
            .iter()
            .map(|g| g.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "))
            .collect();
        println!("{}: [{}]", layer.name, groups.join("] ["));
    }
    println!(
        "search space per layer: {} blended vs {} exhaustive",
        space.blended_per_layer, space.exhaustive_per_layer
    );
    run.finish(&a.out)
}

/// Everything `search` produces; read back by `prune` and `report`.
#[derive(Debug, Serialize, Deserialize)]
pub struct SearchOutput {
    pub snapshot: PathBuf,
    pub snapshot_sha256: String,
    pub evaluator: String,
    pub available_only: bool,
    pub clusters: usize,
    pub prune: PruneConfig,
    pub config: EAConfig,
    pub clusterings: Vec<CriteriaClustering>,
    pub result: SearchResult,
    #[serde(rename = "final")]
    pub finalized: Finalized,
}

#[derive(Debug, Serialize)]
pub struct CalibrationEntry {
    pub cluster: usize,
    pub factor: f64,
    pub criterion: CriterionId,
    pub criterion_name: &'static str,
    pub members: Vec<CriterionId>,
}

#[derive(Debug, Serialize)]
pub struct CalibrationLayer {
    pub layer: usize,
    pub name: String,
    pub num_filters: usize,
    pub kept: usize,
    pub clusters: Vec<CalibrationEntry>,
}

fn calibration(out: &SearchOutput) -> Vec<CalibrationLayer> {
    let gene = &out.finalized.gene;
    gene.layers
        .iter()
        .zip(&out.clusterings)
        .zip(&out.finalized.mask.layers)
        .map(|((g, c), m)| CalibrationLayer {
            layer: g.layer_index,
            name: m.layer.clone(),
            num_filters: m.keep.len(),
            kept: m.popcount(),
            clusters: g
                .factors
                .iter()
                .zip(&g.selections)
                .zip(&c.clusters)
                .enumerate()
                .map(|(k, ((&factor, &criterion), members))| CalibrationEntry {
                    cluster: k,
                    factor,
                    criterion,
                    criterion_name: criterion.name(),
                    members: members.clone(),
                })
                .collect(),
        })
        .collect()
}

fn calibration_csv(layers: &[CalibrationLayer]) -> String {
    let mut s = String::from("layer,name,cluster,factor,criterion\n");
    for l in layers {
        for c in &l.clusters {
            let _ = writeln!(s, "{},{},{},{:?},{}", l.layer, l.name, c.cluster, c.factor, c.criterion.code());
        }
    }
    s
}

fn history_csv(result: &SearchResult) -> String {
    let mut s = String::from("iteration,best,mean\n");
    for h in &result.fitness_history {
        let _ = writeln!(s, "{},{:?},{:?}", h.iteration, h.best, h.mean);
    }
    s
}

fn ea_config(a: &SearchArgs) -> EAConfig {
    let base = match a.profile {
        Profile::Cifar => EAConfig::cifar(),
        Profile::Imagenet => EAConfig::imagenet(),
    };
    EAConfig {
        population_size: a.population.unwrap_or(base.population_size),
        iterations: a.iterations.unwrap_or(base.iterations),
        mutation_prob: a.mutation.unwrap_or(base.mutation_prob),
        crossover_prob: a.crossover.unwrap_or(base.crossover_prob),
        drop_ratio: a.drop_ratio.unwrap_or(base.drop_ratio),
        finetune_epochs: a.finetune_epochs.unwrap_or(base.finetune_epochs),
        full_finetune_epochs: a.full_finetune_epochs.unwrap_or(base.full_finetune_epochs),
        resample_prob: a.resample.unwrap_or(base.resample_prob),
        topk: a.topk.unwrap_or(base.topk),
        seed: a.seed,
        workers: a.workers,
    }
}

fn oracle(path: &Path, snapshot: &NetworkSnapshot) -> Result<OracleEvaluator, CliError> {
    let planted: PlantedFile = read_json(path)?;
    let names: Vec<&str> = planted.layers.iter().map(|l| l.name.as_str()).collect();
    let lengths: Vec<usize> = planted.layers.iter().map(|l| l.importance.len()).collect();
    if names != snapshot.layer_names() || lengths != snapshot.filter_counts() {
        return Err(CliError::Usage(format!("{} does not describe this snapshot's layers", path.display())));
    }
    Ok(OracleEvaluator::new(planted.layers.into_iter().map(|l| l.importance).collect()))
}

pub fn search(a: &SearchArgs) -> Result<(), CliError> {
    let mut run = Run::start("search");
    let config = ea_config(a);
    config.validate()?;
    let prune = prune_config(a.keep.keep_ratio, &a.keep.layer_keep);
    run.settings(
        serde_json::json!({ "args": a, "ea": &config, "prune": &prune }),
        Some(a.seed),
    );

    let (snapshot_dir, evaluator): (PathBuf, Box<dyn Fn(&NetworkSnapshot, &str) -> Result<Box<dyn Evaluator>, CliError>>) =
        match &a.evaluator {
            EvaluatorSpec::Toy => {
                if a.snapshot.is_some() {
                    return Err(CliError::Usage("--snapshot cannot be combined with --evaluator toy".into()));
                }
                let data = ToyDataset::generate(a.toy_seed);
                let (model, snapshot) = toy_pretrain(&ToyModel::build(a.toy_seed), &data, a.pretrain_epochs)?;
                let dir = a.out.join("snapshot");
                let (manifest, blob) = snapshot.encode()?;
                run.bytes(dir.join(BLOB_FILE), &blob)?;
                run.bytes(dir.join(MANIFEST_FILE), &manifest)?;
                println!("toy model pretrained: validation accuracy {:.4}", model.validation_accuracy(&data));
                let ev = ToyEvaluator::new(model, data);
                (dir, Box::new(move |_, _| Ok(Box::new(ev.clone()) as Box<dyn Evaluator>)))
            }
            EvaluatorSpec::Oracle => {
                let dir = a.snapshot.clone().ok_or_else(|| CliError::Usage("--snapshot is required".into()))?;
                let planted = a.planted.clone().unwrap_or_else(|| dir.join(crate::commands::PLANTED_FILE));
                (dir, Box::new(move |s, _| Ok(Box::new(oracle(&planted, s)?) as Box<dyn Evaluator>)))
            }
            EvaluatorSpec::External(cmd) => {
                let dir = a.snapshot.clone().ok_or_else(|| CliError::Usage("--snapshot is required".into()))?;
                if !(a.eval_timeout > 0.0 && a.eval_timeout.is_finite()) {
                    return Err(CliError::Usage(format!("--eval-timeout {} must be positive", a.eval_timeout)));
                }
                let cmd = cmd.clone();
                let timeout = Duration::from_secs_f64(a.eval_timeout);
                (
                    dir,
                    Box::new(move |_, digest| {
                        let ev = ExternalEvaluator::new(cmd.clone(), digest, timeout);
                        ev.connect().map_err(|e| CliError::Evaluator(e))?;
                        Ok(Box::new(ev) as Box<dyn Evaluator>)
                    }),
                )
            }
        };

    let (snapshot, digest) = load(&snapshot_dir)?;
    run.snapshot(digest.clone());
    prune.validate(&snapshot)?;
    let scores = score_all(&snapshot, a.available_only)?;
    let clusterings = clusterings(&matrices(&scores)?, a.clusters, a.seed)?;
    let evaluator = evaluator(&snapshot, &digest)?;

    let ctx = SearchContext {
        snapshot: &snapshot,
        clusterings: &clusterings,
        scores: &scores,
        prune: &prune,
    };
    let verbose = a.verbose;
    let mut progress = |it: usize, pop: &[Gene]| {
        if verbose {
            let f: Vec<f64> = pop.iter().filter_map(|g| g.fitness).collect();
            let best = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = f.iter().sum::<f64>() / f.len().max(1) as f64;
            eprintln!("iteration {it:>4}: best {best:.4} mean {mean:.4}");
        }
    };
    let result = search_observed(&ctx, &config, evaluator.as_ref(), &mut progress)?;
    let finalized = finalize(&ctx, &result.topk_genes, evaluator.as_ref(), config.full_finetune_epochs)?;
    drop(evaluator);

    let out = SearchOutput {
        snapshot: snapshot_dir,
        snapshot_sha256: digest,
        evaluator: a.evaluator.to_string(),
        available_only: a.available_only,
        clusters: a.clusters,
        prune,
        config,
        clusterings,
        result,
        finalized,
    };
    let calib = calibration(&out);
    run.json(a.out.join(SEARCH_RESULT_FILE), &out)?;
    run.json(a.out.join(CLUSTERS_FILE), &out.clusterings)?;
    run.bytes(a.out.join(HISTORY_FILE), history_csv(&out.result).as_bytes())?;
    run.json(a.out.join(CALIBRATION_JSON), &calib)?;
    run.bytes(a.out.join(CALIBRATION_CSV), calibration_csv(&calib).as_bytes())?;
    write_masks(&mut run, &a.out, &out.finalized.mask)?;
    println!(
        "best gene {}: search fitness {:.4}, final fitness {:.4} ({} evaluations)",
        out.finalized.gene.id,
        out.result.topk_genes.iter().find(|g| g.id == out.finalized.gene.id).and_then(|g| g.fitness).unwrap_or(f64::NAN),
        out.finalized.gene.fitness.unwrap_or(f64::NAN),
        out.result.evaluations
    );
    run.finish(&a.out)
}

fn write_masks(run: &mut Run, dir: &Path, mask: &Mask) -> Result<(), CliError> {
    run.json(dir.join(MASKS_JSON), &mask.to_json())?;
    run.bytes(dir.join(MASKS_BIN), &mask.to_bytes())
}

pub fn prune(a: &PruneArgs) -> Result<(), CliError> {
    let mut run = Run::start("prune");
    run.settings(a, None);
    let searched: SearchOutput = read_json(&a.search_result)?;
    let dir = a.snapshot.clone().unwrap_or_else(|| searched.snapshot.clone());
    let (snapshot, digest) = load(&dir)?;
    if digest != searched.snapshot_sha256 {
        return Err(CliError::Snapshot(critblend::Error::InvalidSnapshot(format!(
            "{} is not the snapshot the search ran on (sha256 {} vs {})",
            dir.display(),
            digest,
            searched.snapshot_sha256
        ))));
    }
    run.snapshot(digest);
    let mut config = searched.prune.clone();
    if let Some(r) = a.keep_ratio {
        config.keep_ratio = r;
    }
    for (name, r) in &a.layer_keep {
        config.overrides.insert(name.clone(), *r);
    }
    config.validate(&snapshot)?;
    let scores = score_all(&snapshot, searched.available_only)?;
    let plan = prune_plan(&snapshot, &searched.finalized.gene.layers, &scores, &config)?;
    write_masks(&mut run, &a.out, &plan.mask)?;
    run.json(a.out.join(PLAN_FILE), &plan.layers)?;
    for l in &plan.layers {
        println!("{}: keep {}/{}", l.name, l.kept, l.blended.len());
    }
    run.finish(&a.out)
}

fn report_text(out: &SearchOutput) -> String {
    let mut s = String::new();
    let c = &out.config;
    let _ = writeln!(
        s,
        "evaluator {}  K={}  population {}  iterations {}  evaluations {}",
        out.evaluator, out.clusters, c.population_size, c.iterations, out.result.evaluations
    );
    let search_fitness = out
        .result
        .topk_genes
        .iter()
        .find(|g| g.id == out.finalized.gene.id)
        .and_then(|g| g.fitness);
    let _ = writeln!(
        s,
        "best gene {}  search fitness {}  final fitness {}",
        out.finalized.gene.id,
        search_fitness.map_or("-".into(), |f| format!("{f:.4}")),
        out.finalized.gene.fitness.map_or("-".into(), |f| format!("{f:.4}")),
    );
    for layer in calibration(out) {
        let _ = writeln!(s, "\nlayer {} `{}`: kept {}/{}", layer.layer, layer.name, layer.kept, layer.num_filters);
        let _ = writeln!(s, "  {:<8}{:<9}{:<18}members", "cluster", "factor", "criterion");
        for e in &layer.clusters {
            let members: Vec<String> = e.members.iter().map(|m| m.code().to_string()).collect();
            let _ = writeln!(
                s,
                "  {:<8}{:<9.4}{:<18}{}",
                e.cluster,
                e.factor,
                format!("{} {}", e.criterion.code(), e.criterion_name),
                members.join(",")
            );
        }
    }
    s
}

pub fn report(a: &ReportArgs) -> Result<(), CliError> {
    let searched: SearchOutput = read_json(&a.search_result)?;
    let text = report_text(&searched);
    print!("{text}");
    if let Some(dir) = &a.out {
        let mut run = Run::start("report");
        run.settings(a, None);
        run.snapshot(searched.snapshot_sha256.clone());
        run.bytes(dir.join(REPORT_FILE), text.as_bytes())?;
        run.finish(dir)?;
    }
    Ok(())
}
