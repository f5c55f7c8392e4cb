mod commands;
mod config;
mod fmt;

use std::fmt as stdfmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tempalign_core::Error;

use config::FusionFlags;

/// Outcome classes mapped onto exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Exit 1.
    Usage(String),
    /// Exit 2.
    Data(String),
    /// Exit 3.
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl stdfmt::Display for Failure {
    fn fmt(&self, f: &mut stdfmt::Formatter<'_>) -> stdfmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Data(m) | Failure::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            e if e.is_numeric() => Failure::Numeric(e.to_string()),
            Error::Config(_) | Error::InvalidK(_) => Failure::Usage(e.to_string()),
            e => Failure::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "tempalign",
    version,
    about = "Frame, score, train and evaluate audio/text embedding alignment"
)]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, env = "TEMPALIGN_CONFIG")]
    config: Option<PathBuf>,
    /// Threads for batch scoring and backprop; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic stores and a pair manifest.
    Synth(SynthArgs),
    /// Print kernel size, stride and frame count for a sequence length.
    FrameInfo(FrameInfoArgs),
    /// Fused score of one audio/text pair.
    Score(ScoreArgs),
    /// Score matrix of every pair in a manifest split, as JSON.
    BatchScore(BatchScoreArgs),
    /// Recall@k in both directions over the eval split.
    Eval(EvalArgs),
    /// Train the linear toy model and write a checkpoint and report.
    TrainToy(TrainArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Summarise an embedding store.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory for text.cesf, music.cesf, speech.cesf, manifest.jsonl and synth.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_eval: Option<usize>,
    #[arg(long)]
    dim_music: Option<usize>,
    #[arg(long)]
    dim_speech: Option<usize>,
    #[arg(long)]
    dim_text: Option<usize>,
    #[arg(long)]
    min_steps: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
}

#[derive(Debug, Args)]
struct FrameInfoArgs {
    /// Sequence length in timesteps.
    #[arg(long = "t")]
    steps: usize,
    #[command(flatten)]
    fusion: FusionFlags,
}

#[derive(Debug, Args)]
struct StoreArgs {
    /// Store of fused audio sequences.
    #[arg(long)]
    audio: Option<PathBuf>,
    /// Store of text vectors.
    #[arg(long)]
    text: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[command(flatten)]
    stores: StoreArgs,
    #[arg(long)]
    audio_id: String,
    #[arg(long)]
    text_id: String,
    /// Write the similarity grid and both attention maps here as JSON.
    #[arg(long)]
    dump: Option<PathBuf>,
    #[command(flatten)]
    fusion: FusionFlags,
}

#[derive(Debug, Args)]
struct BatchScoreArgs {
    #[command(flatten)]
    stores: StoreArgs,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Manifest split to score.
    #[arg(long, default_value = "eval", value_parser = ["train", "eval"])]
    split: String,
    /// JSON output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    fusion: FusionFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Audio store: fused sequences, or the music stream with --checkpoint.
    #[arg(long)]
    audio: Option<PathBuf>,
    #[arg(long)]
    text: Option<PathBuf>,
    /// Speech stream store, used with --checkpoint.
    #[arg(long)]
    speech: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Toy model checkpoint; raw inputs are encoded through it before scoring.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Recall ranks, comma separated.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// JSON report path; stdout gets only the table when given.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    fusion: FusionFlags,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory written by `synth`; synthetic data is generated in memory when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for model.ckpt and report.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Fused embedding width.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    init_std: Option<f64>,
    /// Learn the music/speech adapter (false feeds the concatenation directly).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    adapter: Option<bool>,
    /// Also learn the two fusion weights.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    train_gamma: Option<bool>,
    #[command(flatten)]
    fusion: FusionFlags,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    /// Check through the adapter and projection as well.
    #[arg(long)]
    pipeline: bool,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    fusion: FusionFlags,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// CESF store.
    path: PathBuf,
    /// Records to list; 0 lists none.
    #[arg(long, default_value_t = 10)]
    records: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("tempalign: {f}");
            ExitCode::from(f.code())
        }
    }
}
