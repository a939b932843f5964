//! `ctran` command-line tool: data generation, training, evaluation,
//! prediction with label-state interventions, and the HTTP service.

pub mod commands;
pub mod config;
pub mod error;
pub mod server;

use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ctran", version, about = "Label-state transformer for multi-label classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic train/test dataset pair.
    GenerateData(GenerateArgs),
    /// Train a model from a JSON run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint under one or more inference protocols.
    Eval(EvalArgs),
    /// Predict label probabilities for one input, optionally with known label states.
    Predict(PredictArgs),
    /// Serve the intervention endpoints over HTTP.
    Serve(ServeArgs),
    /// Write the learned label embedding matrix and its label names.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Generator spec (JSON). Defaults to the planted-pairs preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for the preset; overrides the seed in `--config` when both are given.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_train: Option<usize>,
    #[arg(long)]
    pub num_test: Option<usize>,
    /// Output directory; receives `train/` and `test/`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DtypeArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub test_dataset: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Sets the training, mask, init and eval seeds together.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Label mask training; `--lmt=false` trains with every label unknown.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", require_equals = true)]
    pub lmt: Option<bool>,
    #[arg(long, value_enum)]
    pub dtype: Option<DtypeArg>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma-separated percentages of target labels revealed per image, e.g. `0,25,50,75`.
    #[arg(long, value_delimiter = ',', conflicts_with = "known_groups")]
    pub epsilon: Vec<f64>,
    /// Comma-separated extra-label groups revealed per image.
    #[arg(long, value_delimiter = ',')]
    pub known_groups: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 3)]
    pub top_k: usize,
    /// Directory for `eval.csv` and `eval.json`. The CSV is always printed to stdout.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset holding `--sample-id`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, requires = "dataset")]
    pub sample_id: Option<u64>,
    /// JSON file with `{"shape": [...], "data": [...]}`.
    #[arg(long, conflicts_with = "sample_id")]
    pub features: Option<PathBuf>,
    /// Known label, as `name=positive|negative|unknown`. Repeatable.
    #[arg(long = "state", value_name = "NAME=STATE")]
    pub states: Vec<String>,
    /// Full request JSON; replaces the input and state flags.
    #[arg(long, conflicts_with_all = ["sample_id", "features", "states"])]
    pub request: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset exposed through `GET /samples` and addressable by sample id.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Matrix file; label names go to the same path with `.labels.txt` appended.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenerateData(a) => commands::generate_data(&a),
        Command::Train(a) => commands::train(&a).map(|_| ()),
        Command::Eval(a) => write_stdout(&commands::eval(&a)?),
        Command::Predict(a) => {
            let resp = commands::predict(&a)?;
            let text = serde_json::to_string_pretty(&resp).map_err(ctran_core::Error::from)?;
            write_stdout(&(text + "\n"))
        }
        Command::Serve(a) => commands::serve(&a),
        Command::ExportEmbeddings(a) => commands::export(&a),
    }
}

/// A closed reader (`ctran eval | head`) ends output quietly.
fn write_stdout(text: &str) -> Result<(), CliError> {
    let mut out = io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(ctran_core::Error::Io { path: "<stdout>".into(), source: e }.into()),
        _ => Ok(()),
    }
}
