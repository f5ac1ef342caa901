//! Command-line grammar.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "timber",
    version,
    about = "Refine an Instruct checkpoint with its paired Base model via spectral surgery on the weight deltas"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Per-layer eRank diagnostics for a Base/Instruct pair
    Analyze(AnalyzeArgs),
    /// Refine the Instruct checkpoint and write a drop-in copy
    Refine(RefineArgs),
    /// Pass@k and Mean@k over a graded JSON-lines rollout log
    Passk(PasskArgs),
    /// Join layer-report CSVs from earlier runs side by side
    Compare(CompareArgs),
}

/// Flags shared by the checkpoint-walking commands. Every one of these can
/// also come from a TOML config file; explicit flags win.
#[derive(Args, Debug)]
pub struct SharedArgs {
    /// eRank scale factor gamma (default 1)
    #[arg(long)]
    pub gamma: Option<f64>,

    /// Compute precision for the spectral path
    #[arg(long, value_parser = ["f32", "f64"])]
    pub precision: Option<String>,

    /// Layer include pattern (repeatable; replaces the default set)
    #[arg(long)]
    pub include: Vec<String>,

    /// Layer exclude pattern (repeatable; replaces the default set)
    #[arg(long)]
    pub exclude: Vec<String>,

    /// Abort on pairing or numerical failures (default)
    #[arg(long, conflicts_with = "lenient")]
    pub strict: bool,

    /// Downgrade pairing/numerical failures to flagged report entries
    #[arg(long)]
    pub lenient: bool,

    /// Worker threads for the per-layer pool (default: available cores)
    #[arg(long)]
    pub workers: Option<usize>,

    /// TOML config file; precedence is flags > file > defaults
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Per-layer progress lines on stderr
    #[arg(long, short)]
    pub verbose: bool,
}

/// Strategy selection. Each parameter flag belongs to exactly one strategy;
/// mixing them is a usage error.
#[derive(Args, Debug)]
pub struct StrategyArgs {
    /// timber | timber-l | truncate-r | truncate-e | merge
    #[arg(long)]
    pub strategy: Option<String>,

    /// Tail attenuation factor for --strategy timber (default 0.2)
    #[arg(long)]
    pub lambda: Option<f64>,

    /// Kept fraction of the full rank for --strategy truncate-r
    #[arg(long)]
    pub ratio: Option<f64>,

    /// Target energy-preservation fraction for --strategy truncate-e
    #[arg(long)]
    pub energy: Option<f64>,

    /// Interpolation factor for --strategy merge
    #[arg(long)]
    pub mu: Option<f64>,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Base checkpoint (file or sharded directory)
    pub base: PathBuf,
    /// Instruct checkpoint (file or sharded directory)
    pub instruct: PathBuf,

    /// Directory for analyze.csv, analyze_summary.json and the run manifest
    #[arg(long, default_value = ".")]
    pub out: PathBuf,

    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(flatten)]
    pub strategy: StrategyArgs,
}

#[derive(Args)]
pub struct RefineArgs {
    /// Base checkpoint (file or sharded directory)
    pub base: PathBuf,
    /// Instruct checkpoint (file or sharded directory)
    pub instruct: PathBuf,
    /// Output directory for the refined checkpoint, layer_report.csv and
    /// the run manifest
    pub out: PathBuf,

    /// Store refined tensors as F32 instead of matching the Instruct dtype
    #[arg(long)]
    pub force_f32: bool,

    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(flatten)]
    pub strategy: StrategyArgs,
}

#[derive(Args)]
pub struct PasskArgs {
    /// JSON-lines rollout log ({"problem_id", "n", "c"} or per-trial bools)
    pub log: PathBuf,

    /// k values to evaluate, comma separated (e.g. --k 1,2,4,8)
    #[arg(long, required = true, value_delimiter = ',')]
    pub k: Vec<u64>,

    /// Directory for passk.csv, passk.json and the run manifest; without
    /// it the CSV goes to stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CompareArgs {
    /// Two or more layer_report.csv files from refine runs
    #[arg(required = true, num_args = 2..)]
    pub reports: Vec<PathBuf>,

    /// Output CSV path; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}
