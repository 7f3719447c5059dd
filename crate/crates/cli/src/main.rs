//! `gmpool` command-line driver.
//!
//! Exit codes: 0 on success, 1 on runtime or I/O failure, 2 on usage errors.

mod commands;
mod config;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failure classes with their exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self::Runtime(msg.into())
    }
}

impl From<gmpool::Error> for Failure {
    fn from(e: gmpool::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "gmpool",
    version,
    about = "Grouping-matrix graph pooling: data, training and analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grouped-graph dataset as JSONL.
    Synth(SynthArgs),
    /// Train with the k-fold protocol; writes checkpoints and a metric trace.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Effective-cluster histogram and grouping-matrix heatmaps.
    Analyze(AnalyzeArgs),
    /// Factor a symmetric matrix into a pooling operator.
    Decompose(DecomposeArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    match s.split_once(['-', ':', ',']) {
        Some((a, b)) => Ok((parse(a)?, parse(b)?)),
        None => parse(s).map(|v| (v, v)),
    }
}

fn parse_thresholds(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect()
}

#[derive(Args)]
pub struct SynthArgs {
    /// JSON file with any subset of the synthetic settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Groups per graph: `G` or an inclusive range `MIN-MAX`.
    #[arg(long, value_parser = parse_range)]
    groups: Option<(usize, usize)>,
    /// Inclusive group-size range `MIN-MAX`.
    #[arg(long, value_parser = parse_range)]
    size_range: Option<(usize, usize)>,
    /// Bridge edges between every pair of groups.
    #[arg(long)]
    bridges: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    node_dim: Option<usize>,
    /// `group_count` or `group_feature_sum`.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Node-count window applied after loading.
#[derive(Args)]
pub struct SizeFilter {
    #[arg(long)]
    min_nodes: Option<usize>,
    #[arg(long)]
    max_nodes: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// `gmpool`, `ngmpool` or `none`.
    #[arg(long)]
    pooling: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Folds trained concurrently.
    #[arg(long)]
    parallel_folds: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    steps_pre: Option<usize>,
    #[arg(long)]
    steps_post: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// `mean` or `sum`.
    #[arg(long)]
    readout: Option<String>,
    /// `mse` or `bce`; defaults by task.
    #[arg(long)]
    loss: Option<String>,
    /// Force the grouping matrix diagonal to 1.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    clamp_diagonal: Option<bool>,
    /// Eigengap below which eigen-backward coefficients are clamped.
    #[arg(long)]
    eigengap_floor: Option<f64>,
    /// Stop a fold once train loss falls to this fraction of its initial value.
    #[arg(long)]
    stop_at_train_ratio: Option<f64>,
    #[command(flatten)]
    filter: SizeFilter,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Report JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-graph predictions CSV path.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    loss: Option<String>,
    #[command(flatten)]
    filter: SizeFilter,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma-separated eigenvalue thresholds.
    #[arg(long, value_parser = parse_thresholds)]
    thresholds: Option<::std::vec::Vec<f64>>,
    /// `csv`, `pgm`, `both` or `none`.
    #[arg(long)]
    heatmaps: Option<String>,
    /// Heatmaps for at most this many graphs.
    #[arg(long)]
    max_heatmaps: Option<usize>,
    #[command(flatten)]
    filter: SizeFilter,
}

#[derive(Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    matrix_csv: Option<PathBuf>,
    /// `eigen` or `iterative`.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV for `S`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report JSON path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write the column-normalized iterative factor here.
    #[arg(long)]
    normalized_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Decompose(a) => commands::decompose(a),
        Command::Selftest => selftest::run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
