use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

use commands::ExitStatus;

#[derive(Parser, Debug)]
#[command(name = "ha2g", version, about = "Hierarchical audio-to-gesture training and evaluation")]
pub struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true, env = "HA2G_CONFIG")]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Config override, e.g. `--set lambda_h=100`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic corpus (JSON Lines plus WAV files).
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus a per-step loss CSV.
    Train(TrainArgs),
    /// Compute FGD, beat consistency and diversity.
    Eval(EvalArgs),
    /// Finite-difference check of every loss and sampled parameters.
    Gradcheck(GradcheckArgs),
    /// Motion and audio beats of one clip and their consistency.
    Beats(BeatsArgs),
    /// Per-angle mean, variance and MAAC of a corpus.
    AngleStats(AngleStatsArgs),
    /// Generate poses for the clips of a corpus.
    Infer(InferArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Existing output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub clips: usize,
    /// Pose frames per clip (defaults to the config's `frames`).
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub speakers: usize,
    /// Beats per second.
    #[arg(long, default_value_t = 2.0)]
    pub beat_rate: f64,
}

/// Which clips of a corpus to use. The first tenth is held out.
#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    All,
    Train,
    Test,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Existing output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Train)]
    pub split: Split,
    /// Continue from a checkpoint written by `train`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Store checkpoints in double precision.
    #[arg(long)]
    pub f64: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Existing output directory for `metrics.json` and `bc_per_clip.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Trained checkpoint; without it a freshly initialised model is scored.
    #[arg(long, conflicts_with = "ground_truth")]
    pub checkpoint: Option<PathBuf>,
    /// Score the ground-truth poses themselves.
    #[arg(long)]
    pub ground_truth: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Coordinates probed per parameter tensor.
    #[arg(long, default_value_t = 2)]
    pub samples: usize,
    /// Print every checked tensor, not only the worst per loss.
    #[arg(long)]
    pub all: bool,
    /// Negate one loss's analytic gradient (self-test of the checker).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct BeatsArgs {
    #[arg(long, required_unless_present_any = ["motion_times", "audio_times"])]
    pub corpus: Option<PathBuf>,
    /// Clip id; defaults to the first clip.
    #[arg(long)]
    pub clip: Option<String>,
    /// Score generated motion from this checkpoint instead of ground truth.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Explicit motion beat times in seconds (comma separated, may be empty).
    #[arg(long, value_delimiter = ',', num_args = 0.., requires = "audio_times")]
    pub motion_times: Option<Vec<f64>>,
    /// Explicit audio beat times in seconds (comma separated, may be empty).
    #[arg(long, value_delimiter = ',', num_args = 0.., requires = "motion_times")]
    pub audio_times: Option<Vec<f64>>,
    /// BC over motion thresholds 0.01..=0.30.
    #[arg(long)]
    pub sweep: bool,
    /// Write beats (or the sweep) as CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AngleStatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output JSON-Lines corpus of generated clips.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::All)]
    pub split: Split,
    /// Only this clip.
    #[arg(long)]
    pub clip: Option<String>,
    /// Sample each clip's style instead of using the speaker mean.
    #[arg(long)]
    pub sample_style: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
