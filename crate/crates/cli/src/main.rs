//! `drrd`: one binary, four subcommands (synth, train, eval, predict).
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use drrd_core::embed::EmbedError;
use drrd_core::eval::EvalError;
use drrd_core::model::ModelError;
use drrd_core::nn::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

/// Application error carrying its exit-code class.
#[derive(Debug)]
pub struct AppError {
    pub class: ErrorClass,
    pub message: String,
}

impl AppError {
    pub fn usage(message: impl Into<String>) -> Self {
        AppError {
            class: ErrorClass::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        AppError {
            class: ErrorClass::Data,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        AppError {
            class: ErrorClass::Numeric,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.class {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numeric => 3,
        }
    }
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<drrd_core::corpus::CorpusError> for AppError {
    fn from(e: drrd_core::corpus::CorpusError) -> Self {
        AppError::data(e.to_string())
    }
}

impl From<drrd_core::synth::SynthError> for AppError {
    fn from(e: drrd_core::synth::SynthError) -> Self {
        AppError::usage(e.to_string())
    }
}

impl From<EmbedError> for AppError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::NonFiniteLoss { .. } => AppError::numeric(e.to_string()),
            other => AppError::data(other.to_string()),
        }
    }
}

impl From<ModelError> for AppError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFiniteLoss { .. } | ModelError::Nn(NnError::NonFiniteGradient { .. }) => {
                AppError::numeric(e.to_string())
            }
            ModelError::Embed(inner) => inner.into(),
            other => AppError::data(other.to_string()),
        }
    }
}

impl From<EvalError> for AppError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(inner) => inner.into(),
            other => AppError::data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::data(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "drrd",
    version,
    about = "Dual-RNN rumour detection over social engagement streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic event corpus.
    Synth(SynthArgs),
    /// Train embeddings and the detection model, writing checkpoints.
    Train(TrainArgs),
    /// Evaluate: 4-fold protocol, or a checkpoint against a corpus.
    Eval(EvalArgs),
    /// Classify events with a trained checkpoint.
    Predict(PredictArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// TOML config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output corpus file (line-delimited JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    events: Option<usize>,
    /// Fraction of events labelled rumour.
    #[arg(long)]
    balance: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Comma-separated expected posts per hour for rumours.
    #[arg(long)]
    rumour_profile: Option<String>,
    #[arg(long)]
    non_rumour_profile: Option<String>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    suspicious_fraction: Option<f64>,
    #[arg(long)]
    affinity: Option<f64>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    token_skew: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Hyperparameter overrides shared by `train` and `eval`.
#[derive(Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    d_v: Option<usize>,
    #[arg(long)]
    d_f: Option<usize>,
    #[arg(long)]
    dense_hidden: Option<usize>,
    #[arg(long)]
    max_hours: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    embed_epochs: Option<usize>,
    #[arg(long)]
    infer_epochs: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus file to train on.
    #[arg(long)]
    corpus: PathBuf,
    /// Directory receiving checkpoints, logs and the manifest.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Evaluate an existing checkpoint instead of running the 4-fold
    /// protocol.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Comma-separated deadlines in hours; adds the early-detection CSV.
    #[arg(long)]
    deadlines: Option<String>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Events to classify.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint_dir: PathBuf,
    /// Only use engagements before this deadline (hours).
    #[arg(long)]
    deadline: Option<f64>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Debug: dump each event's scaled feature matrices as CSV into this
    /// directory.
    #[arg(long)]
    dump_features: Option<PathBuf>,
}

fn main() -> ExitCode {
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
        Command::Synth(args) => commands::synth(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Predict(args) => commands::predict(args),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
