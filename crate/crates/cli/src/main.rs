//! `hytas`: sample, score, rank, analyze and predict transformer genotypes.

mod commands;
mod manifest;
mod outputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hytas_core::data::{InputSpec, TokenizerParams, DEFAULT_BATCH_SIZE};
use hytas_core::proxies::{parse_proxy_list, ProxyId, ProxyOptions};
use hytas_core::search_space::IntRange;

#[derive(Parser, Debug)]
#[command(name = "hytas", version, about = "Training-free transformer architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a genotype population.
    Sample(SampleArgs),
    /// Score genotypes with zero-cost proxies.
    Score(ScoreArgs),
    /// Join scores with a target (external or toy-trained) and rank proxies.
    Rank(RankArgs),
    /// Factor correlations, model-size buckets and input sensitivity.
    Analyze(AnalyzeArgs),
    /// Fit the proxy-fusion forest and compute a learning curve.
    Predict(PredictArgs),
    /// Summarize search times and collect run manifests.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
struct SpaceArgs {
    /// Depth range `start:stop[:step]` (inclusive).
    #[arg(long)]
    depth: Option<IntRange>,
    #[arg(long)]
    embed_dim: Option<IntRange>,
    #[arg(long)]
    num_heads: Option<IntRange>,
    #[arg(long)]
    mlp_ratio: Option<IntRange>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long, default_value_t = 2000)]
    count: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    space: SpaceArgs,
}

#[derive(Args, Debug, Clone)]
struct InputArgs {
    /// `cube:<path>` or `synth:<H>x<W>x<B>`.
    #[arg(long, default_value = "synth:16x16x200")]
    input: InputSpec,
    /// Number of classes (default: from the cube labels, else 16).
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 1)]
    patch: usize,
    #[arg(long, default_value_t = 10)]
    band_group: usize,
    #[arg(long, default_value_t = 10)]
    stride: usize,
}

impl InputArgs {
    fn tokenizer(&self) -> TokenizerParams {
        TokenizerParams {
            patch: self.patch,
            band_group: self.band_group,
            stride: self.stride,
        }
    }
}

#[derive(Clone, Debug)]
struct ProxyList(Vec<ProxyId>);

fn parse_proxies(s: &str) -> Result<ProxyList, String> {
    parse_proxy_list(s).map(ProxyList).map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    genotypes: PathBuf,
    /// Comma-separated proxy ids or `all`.
    #[arg(long, value_parser = parse_proxies)]
    proxies: ProxyList,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    #[arg(long, env = "HYTAS_WORKERS", default_value_t = 1)]
    workers: usize,
    /// Keep signed weights in the Synflow-family passes.
    #[arg(long)]
    sign_removal: bool,
    /// Emit MSA / MLP sub-scores for snip, gradnorm, synflow and dss.
    #[arg(long)]
    module_split: bool,
    /// First decayed layer of the ZiCo++ aggregation.
    #[arg(long, default_value_t = ProxyOptions::default().decay_start)]
    decay_start: usize,
}

#[derive(Args, Debug, Clone)]
struct ToyArgs {
    /// Produce targets by toy training instead of reading `--target`.
    #[arg(long)]
    toy: bool,
    /// Genotype file (required with `--toy`).
    #[arg(long)]
    genotypes: Option<PathBuf>,
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 4)]
    toy_epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    toy_lr: f64,
    #[arg(long, default_value_t = 32)]
    toy_batch_size: usize,
    #[arg(long, default_value_t = 256)]
    toy_train_samples: usize,
    #[arg(long, default_value_t = 256)]
    toy_test_samples: usize,
    #[arg(long, default_value_t = 2.0)]
    toy_noise: f64,
}

#[derive(Args, Debug)]
struct RankArgs {
    #[arg(long)]
    scores: PathBuf,
    /// CSV with columns `id,target`.
    #[arg(long, conflicts_with = "toy")]
    target: Option<PathBuf>,
    #[command(flatten)]
    toy: ToyArgs,
    /// Required with `--toy`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "HYTAS_WORKERS", default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    scores: PathBuf,
    /// CSV with columns `id,target` enabling the target-dependent analyses.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Model-size bucket edges (comma-separated); default 5M-wide bins.
    #[arg(long, value_delimiter = ',')]
    bucket_edges: Option<Vec<f64>>,
    /// Second score table over the same genotypes (other batch source).
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "20,50")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 100)]
    trees: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Run directories whose manifests and JSON reports are collected.
    #[arg(long, value_delimiter = ',')]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Usage problems exit with 2, everything else with 1.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<hytas_core::Error>() {
            Some(hytas_core::Error::Config(msg)) => Failure::Usage(msg.clone()),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<hytas_core::Error> for Failure {
    fn from(e: hytas_core::Error) -> Self {
        Failure::from(anyhow::Error::from(e))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let result = match &cli.command {
        Command::Sample(a) => commands::sample(a, &argv),
        Command::Score(a) => commands::score(a, &argv),
        Command::Rank(a) => commands::rank(a, &argv),
        Command::Analyze(a) => commands::analyze(a, &argv),
        Command::Predict(a) => commands::predict(a, &argv),
        Command::Report(a) => commands::report(a, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
