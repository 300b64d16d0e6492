//! Command-line front end: phantom cohorts, training, self-ensemble
//! inference, evaluation, threshold sweeps and normalization statistics.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msseg_core::{InferenceStats, NormMode};
use serde_json::Value;

pub use config::TransformSet;
pub use error::{CliError, CliResult, ExitClass};

#[derive(Debug, Parser)]
#[command(name = "msseg", version, about = "Multi-orientation self-ensembled lesion segmentation")]
pub struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom cohort.
    Phantom(PhantomArgs),
    /// Train a network on a cohort.
    Train(TrainArgs),
    /// Segment volumes with the self-ensemble.
    Infer(InferArgs),
    /// Score predicted masks against both raters.
    Eval(EvalArgs),
    /// Grid-search the fusion thresholds over cached confidence maps.
    Sweep(SweepArgs),
    /// Export per-channel normalization statistics.
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        s == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    Bn,
    In,
    Condin,
}

impl From<NormArg> for NormMode {
    fn from(n: NormArg) -> NormMode {
        match n {
            NormArg::Bn => NormMode::Bn,
            NormArg::In => NormMode::In,
            NormArg::Condin => NormMode::CondIn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StatsArg {
    Train,
    Ttin,
}

impl From<StatsArg> for InferenceStats {
    fn from(s: StatsArg) -> InferenceStats {
        match s {
            StatsArg::Train => InferenceStats::TrainStats,
            StatsArg::Ttin => InferenceStats::InstanceStats,
        }
    }
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// JSON configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Cubic edge length, or `X,Y,Z`.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    /// Inclusive lesion-count range per subject, `MIN,MAX`.
    #[arg(long, value_delimiter = ',')]
    pub lesions: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cohort directory or manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from this checkpoint up to `--iterations` in total.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
    /// Statistics stored for inference.
    #[arg(long, value_enum)]
    pub stats: Option<StatsArg>,
    #[arg(long, value_enum)]
    pub contrast_dropout: Option<Switch>,
    #[arg(long, value_enum)]
    pub rater_sampling: Option<Switch>,
    #[arg(long, value_enum)]
    pub augmentation: Option<Switch>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Cohort directory or manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `contrast=path` for a single subject, repeatable.
    #[arg(long = "input", value_parser = parse_input)]
    pub inputs: Vec<(String, PathBuf)>,
    /// Subject id for `--input` volumes.
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub stats: Option<StatsArg>,
    #[arg(long, value_enum)]
    pub transforms: Option<TransformSet>,
    #[arg(long)]
    pub tau1: Option<u16>,
    #[arg(long)]
    pub tau2: Option<u16>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of `<id>_mask.nii.gz` predictions.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Cohort whose manifest lists the reference masks.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub rater1: Option<PathBuf>,
    #[arg(long)]
    pub rater2: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Confidence-map cache directory (default `<out>/confidence`).
    #[arg(long)]
    pub confidence: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub stats: Option<StatsArg>,
    #[arg(long, value_enum)]
    pub transforms: Option<TransformSet>,
    #[arg(long, value_delimiter = ',')]
    pub tau1_grid: Option<Vec<u16>>,
    #[arg(long, value_delimiter = ',')]
    pub tau2_grid: Option<Vec<u16>>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub stats: Option<StatsArg>,
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
}

fn parse_input(s: &str) -> Result<(String, PathBuf), String> {
    let (c, p) = s.split_once('=').ok_or_else(|| format!("expected contrast=path, got {s:?}"))?;
    Ok((c.to_string(), PathBuf::from(p)))
}

/// Runs a parsed command on a pool of `cli.jobs` threads and returns its
/// JSON summary.
pub fn run(cli: Cli) -> CliResult<Value> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| CliError { class: ExitClass::Internal, message: e.to_string() })?;
    pool.install(|| match cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Stats(a) => commands::stats(a),
    })
}
