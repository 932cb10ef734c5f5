//! `gmtl` — batch experiments for the grounded multi-task learner.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use gmtl_core::Error;

#[derive(Parser)]
#[command(
    name = "gmtl",
    version,
    about = "Speech/image/text multi-task training and analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multimodal dataset on disk.
    Synth(SynthArgs),
    /// Train one configuration over one or more seeds.
    Train(TrainArgs),
    /// Evaluate a checkpoint: retrieval metrics, RSA table, probes.
    Eval(EvalArgs),
    /// Finite-difference checks for every layer and the loss.
    Gradcheck(GradcheckArgs),
    /// Convert a WAV corpus manifest into the on-disk dataset format.
    Convert(ConvertArgs),
}

#[derive(Args)]
pub(crate) struct SynthArgs {
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    /// Training items (images).
    #[arg(long)]
    items: Option<usize>,
    /// Validation items.
    #[arg(long)]
    val_items: Option<usize>,
    /// Test items.
    #[arg(long)]
    test_items: Option<usize>,
    #[arg(long)]
    speakers: Option<usize>,
    /// Phoneme inventory size (at most 26).
    #[arg(long)]
    phonemes: Option<usize>,
    /// Per-frame audio noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    captions: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    image_dim: Option<usize>,
    #[arg(long)]
    min_phones: Option<usize>,
    #[arg(long)]
    max_phones: Option<usize>,
    #[arg(long)]
    speaker_offset: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Draw items from this separate stream while keeping the phoneme
    /// prototypes of --seed, for disjoint auxiliary corpora.
    #[arg(long)]
    item_seed: Option<u64>,
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
pub(crate) struct TrainArgs {
    /// Dataset root (defaults to $GMTL_DATA_ROOT).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Disjoint dataset for the speech/text task (non-aligned condition).
    #[arg(long)]
    aux_data: Option<PathBuf>,
    /// Benchmark configuration row (1..=13).
    #[arg(long)]
    row: Option<usize>,
    /// Assert the aligned condition (all tasks on the main dataset).
    #[arg(long)]
    aligned: bool,
    /// Output directory for checkpoints, histories and the summary.
    #[arg(long)]
    out: PathBuf,
    /// Number of random initializations to run.
    #[arg(long)]
    seeds: Option<usize>,
    /// Base seed; run k uses seed + k.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    attn_hidden: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    conv_channels: Option<usize>,
    #[arg(long)]
    conv_kernel: Option<usize>,
    #[arg(long)]
    conv_stride: Option<usize>,
    /// Evaluate retrieval on the training split (overfitting runs).
    #[arg(long)]
    validate_on_train: bool,
    /// Run this many seeds in parallel.
    #[arg(long)]
    jobs: Option<usize>,
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
pub(crate) struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root (defaults to $GMTL_DATA_ROOT).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split to evaluate: train, validation or test.
    #[arg(long, default_value = "validation")]
    split: String,
    /// Metric families: retrieval, rsa, probes or all.
    #[arg(long, default_value = "retrieval")]
    metrics: String,
    /// L2 penalty of the diagnostic probes.
    #[arg(long, default_value_t = 1.0)]
    l2: f64,
    /// Seed of the probe train/test splits.
    #[arg(long, default_value_t = 0)]
    probe_seed: u64,
    /// Also write the report table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub(crate) struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

#[derive(Args)]
pub(crate) struct ConvertArgs {
    /// Utterance manifest: id, wav path, text, speaker, image id or '-',
    /// alignment path or '-' (tab-separated; paths relative to the
    /// manifest).
    #[arg(long)]
    manifest: PathBuf,
    /// Optional image manifest: id, GSF1 feature path.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Split tag for every converted utterance.
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// Per-utterance mean/variance normalization of the features.
    #[arg(long)]
    normalize: bool,
}

fn exit_code_of(err: &Error) -> u8 {
    match err {
        // misconfiguration and violated call contracts
        Error::Config(_) | Error::Contract(_) => 1,
        // broken or inconsistent inputs
        Error::Data(_) | Error::Format { .. } | Error::Io(_) | Error::Vocabulary { .. } => 2,
        // numeric failures
        Error::Numeric(_)
        | Error::Dimension(_)
        | Error::DegenerateNorm(_)
        | Error::DegenerateSplit(_)
        | Error::UndefinedCorrelation(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(args) => commands::synth::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Gradcheck(args) => commands::gradcheck::run(args),
        Command::Convert(args) => commands::convert::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_of(&e))
        }
    }
}

