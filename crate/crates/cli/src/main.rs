//! `mfunet`: phantom generation, training, evaluation, prediction and the
//! verification utilities.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mfu_core::nn::Backbone;
use mfu_core::Error;

#[derive(Debug, Parser)]
#[command(name = "mfunet", version, about = "Max-fusion U-Net for multi-modal pathology segmentation")]
struct Cli {
    /// Worker threads for evaluation; 1 gives fully deterministic runs.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic multi-modal phantom dataset.
    GenData(GenDataArgs),
    /// Run the rotating cross-validation schedule.
    Train(TrainArgs),
    /// Score a checkpoint against the labels of a dataset.
    Eval(EvalArgs),
    /// Write predicted label maps, and optionally attention maps.
    Predict(PredictArgs),
    /// Compare tape gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Report empirical statistics of the patch sampler.
    SampleStats(SampleStatsArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 25)]
    pub cases: usize,
    #[arg(long, default_value_t = 4)]
    pub slices_per_case: usize,
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Profile {
    /// The published schedule and sizes.
    Paper,
    /// Small model and short schedule for 96-pixel phantoms.
    Desk,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackboneArg {
    Residual,
    Dilation,
    Sideconv,
}

impl From<BackboneArg> for Backbone {
    fn from(b: BackboneArg) -> Self {
        match b {
            BackboneArg::Residual => Backbone::Residual,
            BackboneArg::Dilation => Backbone::Dilation,
            BackboneArg::Sideconv => Backbone::SideConv,
        }
    }
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; its values override the profile defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults the configuration file starts from.
    #[arg(long, value_enum, default_value = "paper")]
    pub profile: Profile,
    /// Seed for model initialisation, sampling and splits.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory; overrides `paths.data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; overrides `paths.out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backbone: Option<BackboneArg>,
    #[arg(long)]
    pub no_max_fusion: bool,
    #[arg(long)]
    pub no_attention: bool,
    /// Train on full-size slices at the initial batch size.
    #[arg(long)]
    pub no_resample: bool,
    /// Iterations per epoch; 0 derives it from the training pool.
    #[arg(long)]
    pub epoch_iterations: Option<usize>,
    /// Write a resumable state every K epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from `<out>/state` instead of starting over.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory or its `manifest.txt`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// File listing the case ids to evaluate, one per line.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Directory for the per-slice `eval.tsv` and `eval.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the attention each position receives.
    #[arg(long)]
    pub dump_attention: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run configuration whose `model` section is checked end to end;
    /// defaults to the tiny model on 32x32 inputs.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Maximum relative error for the primitives.
    #[arg(long, default_value_t = mfu_core::verify::PRIMITIVE_TOLERANCE)]
    pub tolerance: f64,
    /// Maximum relative error for the end-to-end model.
    #[arg(long, default_value_t = mfu_core::verify::MODEL_TOLERANCE)]
    pub model_tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only check the primitives.
    #[arg(long)]
    pub skip_model: bool,
    /// Add a primitive with a deliberately wrong backward to the suite.
    #[arg(long)]
    pub with_faulty_fixture: bool,
}

#[derive(Debug, Args)]
pub struct SampleStatsArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Number of sampler iterations.
    #[arg(long, default_value_t = 10_000)]
    pub draws: u64,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_data_error() {
        2
    } else if e.is_numeric() || matches!(e, Error::Domain { .. }) {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::SampleStats(a) => commands::sample_stats(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
