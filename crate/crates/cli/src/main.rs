//! `critblend` command-line front end.
//!
//! Exit codes: 0 success, 2 usage error, 3 evaluator failure, 4 snapshot
//! validation failure, 1 anything else (I/O on outputs).

mod commands;
mod output;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use critblend::Error;

#[derive(Debug, Parser)]
#[command(name = "critblend", version, about = "Blend filter-pruning criteria by rank clustering and evolutionary search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic snapshot with planted filter importance.
    Synth(SynthArgs),
    /// Compute every criterion's scores for every layer.
    Score(ScoreArgs),
    /// Per-layer Spearman correlation matrices between criteria.
    Correlate(ScoreArgs),
    /// Cluster criteria per layer by their correlation vectors.
    Cluster(ClusterArgs),
    /// Evolutionary search over calibration factors and criterion choices.
    Search(Box<SearchArgs>),
    /// Write masks for the best gene of a search.
    Prune(PruneArgs),
    /// Print calibration factors, selected criteria and kept counts of a search.
    Report(ReportArgs),
}

#[derive(Debug, Args, serde::Serialize)]
pub struct SynthArgs {
    /// Filters per layer, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "16,16,16")]
    pub filters: Vec<usize>,
    /// Flattened weights per filter.
    #[arg(long, default_value_t = 8)]
    pub fan_in: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output snapshot directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub snapshot: PathBuf,
    /// Skip criteria whose inputs are missing instead of failing.
    #[arg(long)]
    pub available_only: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct ClusterArgs {
    #[arg(long)]
    pub snapshot: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub available_only: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Cifar,
    Imagenet,
}

#[derive(Debug, Clone, serde::Serialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "command")]
pub enum EvaluatorSpec {
    Oracle,
    Toy,
    External(String),
}

impl fmt::Display for EvaluatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvaluatorSpec::Oracle => f.write_str("oracle"),
            EvaluatorSpec::Toy => f.write_str("toy"),
            EvaluatorSpec::External(cmd) => write!(f, "external:{cmd}"),
        }
    }
}

fn parse_evaluator(s: &str) -> Result<EvaluatorSpec, String> {
    match s {
        "oracle" => Ok(EvaluatorSpec::Oracle),
        "toy" => Ok(EvaluatorSpec::Toy),
        _ => match s.strip_prefix("external:") {
            Some(cmd) if !cmd.trim().is_empty() => Ok(EvaluatorSpec::External(cmd.to_string())),
            _ => Err("expected `oracle`, `toy` or `external:<command>`".into()),
        },
    }
}

fn parse_layer_keep(s: &str) -> Result<(String, f64), String> {
    let (name, ratio) = s.split_once('=').ok_or("expected LAYER=RATIO")?;
    let ratio: f64 = ratio.parse().map_err(|e| format!("bad ratio `{ratio}`: {e}"))?;
    Ok((name.to_string(), ratio))
}

#[derive(Debug, Args, serde::Serialize)]
pub struct KeepArgs {
    /// Fraction of filters kept in every layer.
    #[arg(long, default_value_t = 0.5)]
    pub keep_ratio: f64,
    /// Per-layer keep ratio, e.g. `--layer-keep conv1=0.75`; repeatable.
    #[arg(long = "layer-keep", value_parser = parse_layer_keep)]
    pub layer_keep: Vec<(String, f64)>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct SearchArgs {
    /// Snapshot directory; not used with `--evaluator toy`.
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
    /// Base hyperparameters; individual flags override.
    #[arg(long, value_enum, default_value_t = Profile::Cifar)]
    pub profile: Profile,
    /// `oracle`, `toy` or `external:<command>`.
    #[arg(long, value_parser = parse_evaluator, default_value = "oracle")]
    pub evaluator: EvaluatorSpec,
    /// Planted-importance sidecar for the oracle evaluator
    /// [default: <snapshot>/planted_importance.json].
    #[arg(long)]
    pub planted: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub clusters: usize,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub mutation: Option<f64>,
    #[arg(long)]
    pub crossover: Option<f64>,
    #[arg(long, alias = "drop-prob")]
    pub drop_ratio: Option<f64>,
    #[arg(long)]
    pub resample: Option<f64>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    /// Finetune epochs when re-evaluating the top-k genes.
    #[arg(long)]
    pub full_finetune_epochs: Option<usize>,
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Concurrent fitness evaluations; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    #[command(flatten)]
    pub keep: KeepArgs,
    #[arg(long)]
    pub available_only: bool,
    /// Seconds to wait for each external evaluator response.
    #[arg(long, default_value_t = 3600.0)]
    pub eval_timeout: f64,
    /// Seed of the toy dataset and network.
    #[arg(long, default_value_t = 0)]
    pub toy_seed: u64,
    #[arg(long, default_value_t = critblend::fitness::toy::PRETRAIN_EPOCHS)]
    pub pretrain_epochs: usize,
    /// Print per-iteration fitness to stderr.
    #[arg(short, long)]
    pub verbose: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct PruneArgs {
    /// `search_result.json` written by `search`.
    #[arg(long)]
    pub search_result: PathBuf,
    /// Snapshot directory [default: the one recorded by the search].
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
    /// Override the search's keep ratio.
    #[arg(long)]
    pub keep_ratio: Option<f64>,
    #[arg(long = "layer-keep", value_parser = parse_layer_keep)]
    pub layer_keep: Vec<(String, f64)>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub search_result: PathBuf,
    /// Also write the report and a run manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Engine(Error),
    Snapshot(Error),
    Evaluator(critblend::fitness::EvalError),
    Io(PathBuf, std::io::Error),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(path.to_path_buf(), e)
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Snapshot(_) => 4,
            CliError::Evaluator(_) => 3,
            CliError::Engine(e) => match e {
                Error::Evaluation { .. } | Error::Divergence { .. } => 3,
                Error::Manifest(_)
                | Error::ShapeMismatch { .. }
                | Error::NonFinite { .. }
                | Error::InvalidSnapshot(_)
                | Error::CriterionUnavailable { .. }
                | Error::InconsistentAvailability { .. } => 4,
                Error::InvalidArgument(_) => 2,
                _ => 1,
            },
            CliError::Io(..) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Engine(e) => write!(f, "{e}"),
            CliError::Snapshot(e) => write!(f, "invalid snapshot: {e}"),
            CliError::Evaluator(e) => write!(f, "evaluator: {e}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Engine(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Score(a) => commands::score(&a),
        Command::Correlate(a) => commands::correlate(&a),
        Command::Cluster(a) => commands::cluster(&a),
        Command::Search(a) => commands::search(&a),
        Command::Prune(a) => commands::prune(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
