use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use critblend::clustering::cluster_criteria;
use critblend::criteria::{score_all, CriterionId};
use critblend::evolution::{single_criterion_gene, SearchContext};
use critblend::fitness::{Evaluator, FitnessRequest, OracleEvaluator};
use critblend::rankstats::correlation_matrix;
use critblend::snapshot::{load_snapshot, PruneConfig};
use serde_json::Value;

fn critblend(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_critblend")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = critblend(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_slice(&fs::read(&path).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn synth(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let out = dir.join(name);
    ok(&["synth", "--seed", &seed.to_string(), "--out", p(&out)]);
    out
}

fn digest(snapshot: &Path) -> String {
    critblend::snapshot::snapshot_dir_digest(snapshot).unwrap()
}

#[test]
fn synth_is_deterministic_and_writes_the_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", 4);
    let b = synth(dir.path(), "b", 4);
    let c = synth(dir.path(), "c", 5);
    assert_eq!(digest(&a), digest(&b));
    assert_ne!(digest(&a), digest(&c));
    let snap = load_snapshot(&a).unwrap();
    assert_eq!(snap.layers.len(), 3);
    let planted = json(a.join("planted_importance.json"));
    let layers = planted["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 3);
    for (l, s) in layers.iter().zip(&snap.layers) {
        assert_eq!(l["name"], s.name.as_str());
        assert_eq!(l["importance"].as_array().unwrap().len(), s.num_filters);
    }
    let run = json(a.join("run_manifest.json"));
    assert_eq!(run["command"], "synth");
    assert_eq!(run["seed"], 4);
    assert_eq!(run["snapshot_sha256"], digest(&a).as_str());
}

#[test]
fn correlate_csv_matches_json() {
    let dir = tempfile::tempdir().unwrap();
    let snap = synth(dir.path(), "s", 1);
    let out = dir.path().join("corr");
    ok(&["correlate", "--snapshot", p(&snap), "--out", p(&out)]);
    let matrices = json(out.join("correlations.json"));
    let matrices = matrices.as_array().unwrap();
    assert_eq!(matrices.len(), 3);
    for (i, m) in matrices.iter().enumerate() {
        let csv = fs::read_to_string(out.join(format!("correlation_layer{i}.csv"))).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows.len(), 13);
        let values = m["values"].as_array().unwrap();
        for (r, row) in rows[1..].iter().enumerate() {
            let cells: Vec<&str> = row.split(',').collect();
            assert_eq!(cells.len(), 13);
            for (c, cell) in cells[1..].iter().enumerate() {
                let x: f64 = cell.parse().unwrap();
                assert!((x - values[r][c].as_f64().unwrap()).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn cluster_assigns_every_criterion_once() {
    let dir = tempfile::tempdir().unwrap();
    let snap = synth(dir.path(), "s", 2);
    let out = dir.path().join("k");
    ok(&["cluster", "--snapshot", p(&snap), "--clusters", "3", "--out", p(&out)]);
    let clusters = json(out.join("clusters.json"));
    for layer in clusters.as_array().unwrap() {
        let groups = layer["clusters"].as_array().unwrap();
        assert_eq!(groups.len(), 3);
        let mut all: Vec<u64> = groups.iter().flat_map(|g| g.as_array().unwrap()).map(|c| c.as_u64().unwrap()).collect();
        assert!(groups.iter().all(|g| !g.as_array().unwrap().is_empty()));
        all.sort();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
    }
    let space = json(out.join("search_space.json"));
    assert_eq!(space["blended_per_layer"], "64");
}

fn single_criterion_fitness(snapshot: &Path, keep_ratio: f64) -> Vec<f64> {
    let snap = load_snapshot(snapshot).unwrap();
    let scores = score_all(&snap, false).unwrap();
    let clusterings: Vec<_> =
        scores.iter().map(|s| cluster_criteria(&correlation_matrix(s).unwrap(), 3, 0).unwrap()).collect();
    let prune = PruneConfig::uniform(keep_ratio);
    let ctx = SearchContext { snapshot: &snap, clusterings: &clusterings, scores: &scores, prune: &prune };
    let planted = json(snapshot.join("planted_importance.json"));
    let oracle = OracleEvaluator::new(
        planted["layers"]
            .as_array()
            .unwrap()
            .iter()
            .map(|l| l["importance"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect())
            .collect(),
    );
    CriterionId::ALL
        .iter()
        .map(|&c| {
            let gene = single_criterion_gene(c, &clusterings, 0).unwrap();
            let req = FitnessRequest { request_id: 0, masks: ctx.mask(&gene).unwrap(), finetune_epochs: 0 };
            oracle.evaluate(&req).unwrap().fitness
        })
        .collect()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != "run_manifest.json")
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn oracle_search_beats_singles_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let snap = synth(dir.path(), "s", 3);
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["search", "--snapshot", p(&snap), "--seed", "7", "--workers", "2", "--out", p(&out)]);
        out
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(files(&a), files(&b));
    let result = json(a.join("search_result.json"));
    let best = result["final"]["gene"]["fitness"].as_f64().unwrap();
    let singles = single_criterion_fitness(&snap, 0.5);
    for (c, s) in singles.iter().enumerate() {
        assert!(best >= *s, "criterion {c}: {s} > blended {best}");
    }
    let history = fs::read_to_string(a.join("fitness_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 51);
    let masks = fs::read(a.join("masks.bin")).unwrap();
    assert_eq!(masks.len(), 48);
    assert_eq!(masks.iter().filter(|&&b| b == 1).count(), 24);
}

#[test]
fn zero_iterations_still_produces_a_result() {
    let dir = tempfile::tempdir().unwrap();
    let snap = synth(dir.path(), "s", 0);
    let out = dir.path().join("r");
    ok(&["search", "--snapshot", p(&snap), "--iterations", "0", "--population", "6", "--out", p(&out)]);
    let result = json(out.join("search_result.json"));
    assert_eq!(result["result"]["fitness_history"].as_array().unwrap().len(), 1);
    assert!(result["final"]["gene"]["fitness"].as_f64().is_some());
}

#[test]
fn prune_applies_keep_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("s");
    ok(&["synth", "--filters", "10,7,13", "--out", p(&snap)]);
    let search = dir.path().join("r");
    ok(&["search", "--snapshot", p(&snap), "--iterations", "2", "--population", "6", "--out", p(&search)]);
    let out = dir.path().join("p");
    ok(&[
        "prune",
        "--search-result",
        p(&search.join("search_result.json")),
        "--keep-ratio",
        "0.3",
        "--layer-keep",
        "layer1=0.9",
        "--out",
        p(&out),
    ]);
    let masks = json(out.join("masks.json"));
    let kept: Vec<usize> = ["layer0", "layer1", "layer2"]
        .iter()
        .map(|n| masks[n].as_array().unwrap().iter().filter(|v| v.as_u64() == Some(1)).count())
        .collect();
    let expected: Vec<usize> = [(10, 0.3), (7, 0.9), (13, 0.3)]
        .iter()
        .map(|&(n, r): &(usize, f64)| (r * n as f64).ceil() as usize)
        .collect();
    assert_eq!(kept, expected);
    assert_eq!(fs::read(out.join("masks.bin")).unwrap().len(), 30);

    // A snapshot other than the searched one is refused.
    let other = synth(dir.path(), "other", 9);
    let bad = critblend(&[
        "prune",
        "--search-result",
        p(&search.join("search_result.json")),
        "--snapshot",
        p(&other),
        "--out",
        p(&dir.path().join("q")),
    ]);
    assert_eq!(bad.status.code(), Some(4));
}

#[test]
fn report_with_one_cluster_shows_one_factor_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    let snap = synth(dir.path(), "s", 6);
    let search = dir.path().join("r");
    ok(&[
        "search", "--snapshot", p(&snap), "--clusters", "1", "--iterations", "2", "--population", "6", "--out",
        p(&search),
    ]);
    let out = dir.path().join("rep");
    let text = ok(&["report", "--search-result", p(&search.join("search_result.json")), "--out", p(&out)]);
    assert_eq!(fs::read_to_string(out.join("report.txt")).unwrap(), text);
    assert_eq!(text.matches("kept 8/16").count(), 3);
    let calib = json(search.join("calibration_report.json"));
    for layer in calib.as_array().unwrap() {
        let clusters = layer["clusters"].as_array().unwrap();
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0]["members"].as_array().unwrap().len(), 12);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(critblend(&["search", "--bogus"]).status.code(), Some(2));
    assert_eq!(critblend(&["search", "--out", "x", "--mutation", "1.5"]).status.code(), Some(2));

    let snap = synth(dir.path(), "s", 0);
    let failing = critblend(&[
        "search",
        "--snapshot",
        p(&snap),
        "--evaluator",
        "external:exit 1",
        "--out",
        p(&dir.path().join("r")),
    ]);
    assert_eq!(failing.status.code(), Some(3));

    let replying_error = "read h; echo '{\"type\":\"ready\",\"version\":1}'; while read l; do \
        id=$(printf '%s' \"$l\" | sed 's/.*\"id\":\\([0-9]*\\).*/\\1/'); \
        echo \"{\\\"type\\\":\\\"error\\\",\\\"id\\\":$id,\\\"message\\\":\\\"no gpu\\\"}\"; done";
    let out = critblend(&[
        "search",
        "--snapshot",
        p(&snap),
        "--evaluator",
        &format!("external:{replying_error}"),
        "--population",
        "4",
        "--topk",
        "2",
        "--out",
        p(&dir.path().join("r2")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no gpu"));

    let corrupt = dir.path().join("corrupt");
    fs::create_dir(&corrupt).unwrap();
    fs::write(corrupt.join("manifest.json"), "{ not json").unwrap();
    fs::write(corrupt.join("tensors.bin"), []).unwrap();
    let out = critblend(&["score", "--snapshot", p(&corrupt), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(4));
    let missing = critblend(&["score", "--snapshot", p(&dir.path().join("nope")), "--out", p(&dir.path().join("o"))]);
    assert_eq!(missing.status.code(), Some(4));
}

#[test]
fn toy_search_saves_its_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let args = [
        "search", "--evaluator", "toy", "--population", "4", "--iterations", "1", "--finetune-epochs", "1",
        "--full-finetune-epochs", "1", "--topk", "2", "--pretrain-epochs", "5", "--out",
    ];
    let mut a = args.to_vec();
    a.push(p(&out));
    ok(&a);
    let snap = out.join("snapshot");
    let result = json(out.join("search_result.json"));
    assert_eq!(result["snapshot_sha256"], digest(&snap).as_str());
    assert_eq!(result["evaluator"], "toy");
    let loaded = load_snapshot(&snap).unwrap();
    assert_eq!(loaded.layer_names(), vec!["fc1", "fc2"]);
    let fitness = result["final"]["gene"]["fitness"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&fitness));
    // Toy snapshots carry every input, so all twelve criteria score.
    let scores = dir.path().join("scores");
    ok(&["score", "--snapshot", p(&snap), "--out", p(&scores)]);
    assert_eq!(json(scores.join("scores.json")).as_array().unwrap().len(), 24);
}

#[test]
fn external_evaluator_drives_the_search() {
    let dir = tempfile::tempdir().unwrap();
    let snap = synth(dir.path(), "s", 0);
    let log = dir.path().join("hello.log");
    let cmd = format!(
        "external:read h; printf '%s\\n' \"$h\" > {}; echo '{{\"type\":\"ready\",\"version\":1}}'; \
         while read l; do case \"$l\" in *bye*) exit 0;; esac; \
         id=$(printf '%s' \"$l\" | sed 's/.*\"id\":\\([0-9]*\\).*/\\1/'); \
         echo \"{{\\\"type\\\":\\\"result\\\",\\\"id\\\":$id,\\\"fitness\\\":0.5}}\"; done",
        log.display()
    );
    let out = dir.path().join("r");
    ok(&[
        "search", "--snapshot", p(&snap), "--evaluator", &cmd, "--population", "4", "--iterations", "2", "--topk",
        "2", "--workers", "2", "--out", p(&out),
    ]);
    let result = json(out.join("search_result.json"));
    assert_eq!(result["final"]["gene"]["fitness"].as_f64(), Some(0.5));
    let hello: Value = serde_json::from_str(fs::read_to_string(&log).unwrap().trim()).unwrap();
    assert_eq!(hello["snapshot_sha256"], digest(&snap).as_str());
}
