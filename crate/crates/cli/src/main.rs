mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "finsep",
    version,
    about = "Separate fish vocalizations from sea background noise"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Resample, optionally denoise, and peak-normalize one recording.
    Preprocess(PreprocessArgs),
    /// Materialize a synthetic test set from the manifest's test split.
    Synth(SynthArgs),
    /// Train a separator; resumes from the latest checkpoint in the output directory.
    Train(TrainArgs),
    /// Split a recording into fish and background estimates.
    Separate(SeparateArgs),
    /// Score a checkpoint (or the ground truth) on a stored test set.
    Eval(EvalArgs),
    /// Render a dB spectrogram as PGM or CSV.
    Spectro(SpectroArgs),
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    pub target_db: f64,
    /// Recording of background noise alone; enables spectral gating.
    #[arg(long)]
    pub noise_profile: Option<PathBuf>,
    #[arg(long, default_value_t = finsep::audio::CANONICAL_RATE)]
    pub rate: u32,
    #[arg(long, default_value_t = finsep::audio::DEFAULT_THRESHOLD_SIGMAS)]
    pub threshold_sigmas: f64,
    #[arg(long, default_value_t = finsep::audio::DEFAULT_REDUCTION_DB)]
    pub reduction_db: f64,
    #[arg(long, default_value_t = finsep::audio::DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = finsep::audio::DEFAULT_HOP)]
    pub hop: usize,
    /// float32 or pcm16.
    #[arg(long, default_value = "float32")]
    pub encoding: String,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Configuration override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct SeparateArgs {
    pub input: PathBuf,
    pub checkpoint: PathBuf,
    /// Outputs go to `<prefix>.fish.wav` and `<prefix>.background.wav`.
    pub out_prefix: PathBuf,
    #[command(flatten)]
    pub chunking: ChunkArgs,
}

#[derive(Args, Debug, Clone, Copy)]
pub struct ChunkArgs {
    #[arg(long, default_value_t = 44_160)]
    pub chunk_length: usize,
    #[arg(long, default_value_t = 0.25)]
    pub overlap: f64,
    /// Rate the model was trained at.
    #[arg(long, default_value_t = finsep::audio::CANONICAL_RATE)]
    pub model_rate: u32,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    pub testset: PathBuf,
    #[arg(required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Score the stored ground-truth sources instead of model estimates.
    #[arg(long, conflicts_with = "checkpoint")]
    pub oracle: bool,
    /// Directory for `report.txt` and `report.csv` (defaults to the test set directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub chunking: ChunkArgs,
}

#[derive(Args, Debug)]
pub struct SpectroArgs {
    pub input: PathBuf,
    /// `.pgm` or `.csv`.
    pub output: PathBuf,
    #[arg(long, default_value_t = finsep::audio::DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = finsep::audio::DEFAULT_HOP)]
    pub hop: usize,
    #[arg(long, default_value_t = finsep::audio::DEFAULT_FLOOR_DB, allow_hyphen_values = true)]
    pub floor_db: f64,
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("FINSEP_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        exit::usage(format!(
            "FINSEP_THREADS must be a positive integer, got `{v}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Preprocess(a) => commands::preprocess(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Separate(a) => commands::separate(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Spectro(a) => commands::spectro(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::SUCCESS),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e))
        }
    }
}
