mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{Control, RunConfig};
use crate::error::CliError;

/// Train, extract and search unified local and global image features.
///
/// Exit codes: 0 success, 1 I/O or other failure, 2 bad flags or config,
/// 3 non-finite training, 4 unreadable image, 5 missing index entry,
/// 6 ground-truth/result mismatch.
#[derive(Debug, Parser)]
#[command(name = "delg", version)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress at info level (RUST_LOG takes precedence).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic glyph dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus the sparsity trace.
    Train(TrainArgs),
    /// Extract a feature file per image.
    Extract(ExtractArgs),
    /// Rank an index for each query, optionally re-ranking by local matching.
    Search(SearchArgs),
    /// Geometrically verify one image pair or a list of pairs.
    Match(MatchArgs),
    /// Score rankings, predictions or pairs against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    images_per_class: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Collapse every augmentation range (all images of a class identical).
    #[arg(long)]
    no_augment: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory written by `synth`; generated from `[synth]` when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    control: Option<Control>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tau {
    Auto,
    Value(f64),
}

fn parse_tau(s: &str) -> Result<Tau, String> {
    if s == "auto" {
        return Ok(Tau::Auto);
    }
    match s.parse::<f64>() {
        Ok(v) if !v.is_nan() => Ok(Tau::Value(v)),
        _ => Err(format!("expected `auto` or a number, got `{s}`")),
    }
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image, a directory of images, a manifest or a `path<TAB>class` list.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Store sign-binarized local descriptors.
    #[arg(long)]
    binarize: bool,
    /// Attention threshold, or `auto` for the configured percentile of the
    /// checkpoint's attention sample.
    #[arg(long, value_parser = parse_tau, default_value = "auto")]
    tau: Tau,
    #[arg(long)]
    max_local: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Manifest of database feature files.
    #[arg(long)]
    index: PathBuf,
    /// A query feature file or a manifest of them.
    #[arg(long)]
    query_features: PathBuf,
    #[arg(long, value_enum, default_value = "on")]
    rerank: Switch,
    /// Rows written per query.
    #[arg(long, default_value_t = 100)]
    topk: usize,
    /// Output directory: one ranking per query plus `predictions.tsv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long, requires = "b", conflicts_with = "pairs")]
    a: Option<PathBuf>,
    #[arg(long, requires = "a")]
    b: Option<PathBuf>,
    /// Correspondence dump (`xA yA xB yB inlier`).
    #[arg(long, requires = "a")]
    dump: Option<PathBuf>,
    /// Side-by-side SVG; needs `--image-a` and `--image-b`.
    #[arg(long, requires_all = ["a", "image_a", "image_b"])]
    svg: Option<PathBuf>,
    #[arg(long)]
    image_a: Option<PathBuf>,
    #[arg(long)]
    image_b: Option<PathBuf>,
    /// Pair list (`a<TAB>b` ids) to verify against `--index`.
    #[arg(long, requires_all = ["index", "out"])]
    pairs: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    /// Scored pair list.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Map,
    Map100,
    Uap1,
    PairAp,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Ranking directory (map, map100), predictions file (uap1) or pair list (pair-ap).
    #[arg(long)]
    results: PathBuf,
    /// Relevant ids per query, the class per query, or the positive pairs.
    #[arg(long)]
    groundtruth: PathBuf,
    #[arg(long, value_enum)]
    metric: Metric,
    /// JSON report path; the report always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(args) => commands::synth(config, &args),
        Command::Train(args) => commands::train(config, &args),
        Command::Extract(args) => commands::extract(config, &args),
        Command::Search(args) => commands::search(config, &args),
        Command::Match(args) => commands::matching(config, &args),
        Command::Evaluate(args) => commands::evaluate(config, &args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
