use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Seed used when `--seed` is not given.
pub const DEFAULT_SEED: u64 = 0x5eed_0001;

#[derive(Debug, Parser)]
#[command(name = "egobench", version, about = "Egocentric object-detection benchmark toolkit")]
pub struct Cli {
    /// Worker threads; 0 = all available cores, 1 = sequential.
    #[arg(long, global = true, env = "EGOBENCH_THREADS", default_value_t = 0)]
    pub threads: usize,

    /// Seed for every randomized step (split building, kernel self-test).
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check an annotation file for schema and consistency violations.
    Validate(ValidateArgs),
    /// Check which of the ten capture configurations each main object covers.
    Coverage(CoverageArgs),
    /// Pick the source-of-truth annotator per image of a multi-annotator file.
    Consensus(ConsensusArgs),
    /// Build (or check) train/target/val/test splits.
    Split(SplitArgs),
    /// Compute detection metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Dataset statistics as CSV tables.
    Stats(StatsArgs),
    /// Detection-head numerical kernels.
    #[command(subcommand)]
    Kernels(KernelsCommand),
    /// Turn proposals with embeddings into instance predictions.
    Match(MatchArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Write the violation list as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CoverageArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Only this main instance (default: all).
    #[arg(long)]
    pub instance: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConsensusArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// CSV with one row per (image, annotator).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitModeArg {
    Unified,
    Instdet,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitModeArg::Unified)]
    pub mode: SplitModeArg,
    /// Fraction of main instances moved to the target split.
    #[arg(long, default_value_t = 0.5)]
    pub eval_fraction: f64,
    /// Fraction of categories withheld from training (instdet only).
    #[arg(long, default_value_t = 0.25)]
    pub withheld_fraction: f64,
    /// Fraction of evaluation videos assigned to val (rest: test).
    #[arg(long, default_value_t = 0.5)]
    pub val_fraction: f64,
    /// Verify this split file instead of building one.
    #[arg(long, conflicts_with = "out")]
    pub check: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Federated category-level AP.
    Category(EvalArgs),
    /// Instance-level AP over a split's targets.
    Instance(EvalArgs),
    /// Continual-learning experience stream: per-experience mAP and EAP.
    Cl(ClArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub preds: PathBuf,
    /// Split file; required for instance mode, restricts category mode to val/test images.
    #[arg(long)]
    pub splits: Option<PathBuf>,
    #[command(flatten)]
    pub common: EvalOptions,
    /// Report JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-unit CSV table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalOptions {
    /// Add the size, lighting and background AP50 breakdown.
    #[arg(long)]
    pub buckets: bool,
    /// Comma-separated IoU thresholds (default 0.50:0.05:0.95).
    #[arg(long, value_delimiter = ',')]
    pub iou_thresholds: Option<Vec<f64>>,
    /// Keep at most this many predictions per image and label.
    #[arg(long)]
    pub max_dets: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ClArgs {
    #[arg(long)]
    pub stream: PathBuf,
    /// Directory holding one prediction file per experience.
    #[arg(long)]
    pub preds_dir: Option<PathBuf>,
    /// Overrides the stream's dataset path.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Overrides the stream's split path.
    #[arg(long)]
    pub splits: Option<PathBuf>,
    #[command(flatten)]
    pub common: EvalOptions,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = egobench::stats::DEFAULT_CENTER_BINS)]
    pub center_bins: usize,
    #[arg(long, default_value_t = egobench::stats::DEFAULT_SIZE_BINS)]
    pub size_bins: usize,
    /// Upper edge of the relative-size histogram; larger values land in the last bin.
    #[arg(long, default_value_t = egobench::stats::DEFAULT_SIZE_MAX)]
    pub size_max: f64,
}

#[derive(Debug, Subcommand)]
pub enum KernelsCommand {
    /// Finite-difference gradient checks and reference oracles.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Minimum compared probes per op.
    #[arg(long, default_value_t = egobench::kernels::selftest::DEFAULT_PROBES)]
    pub probes: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Reference embeddings: `[{"instance_id", "embedding"}]`.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Proposals: `[{"image_id", "bbox", "score", "embedding"}]`.
    #[arg(long)]
    pub proposals: PathBuf,
    /// Minimum cosine similarity.
    #[arg(long, default_value_t = egobench::instindex::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Instance-mode prediction file.
    #[arg(long)]
    pub out: PathBuf,
}
