//! `anatda`: data generation, training, adaptation and evaluation pipelines.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anatda::anatomy::{FilterMode, Penalty};
use anatda::model::MaskMode;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable naming the default dataset directory.
const DATA_ROOT_ENV: &str = "ANATDA_DATA_ROOT";

#[derive(Debug, Parser)]
#[command(name = "anatda", version, about = "Anatomy-guided domain adaptation for point-cloud pose estimation")]
struct Cli {
    /// Worker threads for data generation. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic source/target dataset.
    GenData(GenDataArgs),
    /// Derive anatomical bounds from the poses of one split.
    DeriveBounds(DeriveBoundsArgs),
    /// Supervised training on labeled source data.
    TrainSource(TrainArgs),
    /// Unsupervised domain adaptation with labeled source and unlabeled target data.
    AdaptUda(UdaArgs),
    /// Source-free adaptation of a pretrained checkpoint on unlabeled target data.
    AdaptSfda(SfdaArgs),
    /// MPJPE, plausibility and loss/error correlation of a checkpoint.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Generation config (TOML); built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long, env = DATA_ROOT_ENV, default_value = "data")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DeriveBoundsArgs {
    /// Dataset directory.
    #[arg(long, env = DATA_ROOT_ENV, default_value = "data")]
    data: PathBuf,
    #[arg(long, default_value = "source-train")]
    split: String,
    /// Output bounds file.
    #[arg(long)]
    out: PathBuf,
    /// Symmetry tolerance for every symmetric pair.
    #[arg(long, default_value_t = 0.0)]
    sym_tol: f64,
    /// Relative widening of the bone length intervals.
    #[arg(long, default_value_t = 0.0)]
    margin: f64,
}

/// Flags that override the config file, which overrides the stage preset.
#[derive(Debug, Args)]
pub struct Overrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Points per cloud after subsampling.
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    ramp_epochs: Option<usize>,
    #[arg(long)]
    ema_momentum: Option<f64>,
    /// none, sym, length, angle, anat_sum, two_of_three or consistency.
    #[arg(long = "filter")]
    filter_mode: Option<FilterMode>,
    /// l1 or l2.
    #[arg(long)]
    penalty: Option<Penalty>,
    /// all, feature_extractor_only, norm_layers_only or freeze_heads.
    #[arg(long)]
    mask_mode: Option<MaskMode>,
    /// Directory for the replay file of a diverging batch.
    #[arg(long)]
    replay_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = DATA_ROOT_ENV, default_value = "data")]
    data: PathBuf,
    /// Labeled split to train on.
    #[arg(long, default_value = "source-train")]
    split: String,
    /// Training config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Epoch log, appended to; defaults to `<out>.log`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue a run from its checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct UdaArgs {
    #[arg(long, env = DATA_ROOT_ENV, default_value = "data")]
    data: PathBuf,
    #[arg(long, default_value = "source-train")]
    source_split: String,
    #[arg(long, default_value = "target-train")]
    target_split: String,
    /// Anatomical bounds file (required).
    #[arg(long)]
    bounds: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct SfdaArgs {
    #[arg(long, env = DATA_ROOT_ENV, default_value = "data")]
    data: PathBuf,
    #[arg(long, default_value = "target-train")]
    target_split: String,
    /// Source-trained checkpoint, or an interrupted source-free run to resume.
    #[arg(long)]
    pretrained: PathBuf,
    /// Anatomical bounds file (required).
    #[arg(long)]
    bounds: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelChoice {
    Student,
    Teacher,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = DATA_ROOT_ENV, default_value = "data")]
    data: PathBuf,
    #[arg(long, default_value = "target-test")]
    split: String,
    /// Bounds for the plausibility report; the dataset's own when absent.
    #[arg(long)]
    bounds: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModelChoice::Student)]
    model: ModelChoice,
    /// Comma-separated joint names or indices for a subset mean.
    #[arg(long)]
    joints: Option<String>,
    /// Labeled split for the loss/error correlation study.
    #[arg(long)]
    val_split: Option<String>,
    /// Points per cloud at inference.
    #[arg(long, default_value_t = 2048)]
    points: usize,
    /// Key-value report file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a, cli.threads),
        Command::DeriveBounds(a) => commands::derive_bounds_cmd(a),
        Command::TrainSource(a) => commands::train_source_cmd(a),
        Command::AdaptUda(a) => commands::adapt_uda_cmd(a),
        Command::AdaptSfda(a) => commands::adapt_sfda_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
