use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod dataset_cmd;
mod pipeline;
mod serve_cmd;

#[derive(Parser)]
#[command(name = "protomsl", version, about = "Prototype classifier for rover surface images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Manifest tools.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a model and write checkpoints plus metrics.jsonl.
    Train(TrainArgs),
    /// Fit a calibrator on VAL logits and store it in the checkpoint.
    Calibrate(CalibrateArgs),
    /// Write predictions.jsonl and traces.jsonl for a manifest.
    Evaluate(EvaluateArgs),
    /// Explain one image: JSON and a panel image.
    Explain(ExplainArgs),
    /// Accuracy table and prototype curves from stored prediction files.
    Report(ReportArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Export stored feedback for review.
    ExportReview(ExportArgs),
}

#[derive(Subcommand)]
pub enum DatasetCommand {
    /// Parse and check a manifest; exits non-zero on any error.
    Validate { manifest: PathBuf },
    /// Assign TRAIN/VAL/TEST by sol and write the split manifest.
    Split {
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        val_frac: f64,
        #[arg(long, default_value_t = 0.1)]
        test_frac: f64,
        /// Output manifest; defaults to `<stem>.split.csv` next to the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-class counts by split.
    Stats { manifest: PathBuf },
    /// Write the synthetic 3-class shapes dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        images: usize,
        #[arg(long, default_value_t = 32)]
        size: u32,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// vgg19, resnet18 or tiny; overrides the config file.
    #[arg(long)]
    pub backbone: Option<String>,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs_phase1: Option<usize>,
    #[arg(long)]
    pub epochs_phase2: Option<usize>,
    #[arg(long)]
    pub backbone_weights: Option<PathBuf>,
}

#[derive(Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// temp, vector or none.
    #[arg(long, default_value = "temp")]
    pub method: String,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where to write the calibrated checkpoint; defaults to replacing the input.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = protomsl::calibrate::DEFAULT_CONFIDENCE_THRESHOLD)]
    pub threshold: f64,
    /// Evidence items recorded per traced image.
    #[arg(long, default_value_t = protomsl::analytics::DEFAULT_K_MAX)]
    pub k: usize,
    /// Split whose images are traced; `all` traces every split.
    #[arg(long, default_value = "test")]
    pub trace_split: String,
}

#[derive(Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub image: String,
    #[arg(long, default_value_t = protomsl::explain::DEFAULT_K)]
    pub k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// `NAME=predictions.jsonl`; repeat for each table row.
    #[arg(long = "row", value_name = "NAME=PATH")]
    pub rows: Vec<String>,
    /// Adds the most-common-class baseline row computed from this manifest.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, default_value_t = protomsl::calibrate::DEFAULT_CONFIDENCE_THRESHOLD)]
    pub threshold: f64,
    /// traces.jsonl for the diversity and in-class curves.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Class names, one per line; defaults to the trace labels.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    #[arg(long, default_value_t = protomsl::analytics::DEFAULT_K_MAX)]
    pub k_max: usize,
    /// In-class curve over correctly classified images only.
    #[arg(long)]
    pub correct_only: bool,
    /// Directory for table.txt and curve SVGs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value = "feedback.sqlite")]
    pub db: PathBuf,
    /// Built UI bundle served under /ui.
    #[arg(long)]
    pub ui: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExportArgs {
    #[arg(long, default_value = "feedback.sqlite")]
    pub db: PathBuf,
    /// Source of class names and the default model version.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub model_version: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Dataset(cmd) => dataset_cmd::run(cmd),
        Command::Train(a) => pipeline::train(a),
        Command::Calibrate(a) => pipeline::calibrate(a),
        Command::Evaluate(a) => pipeline::evaluate(a),
        Command::Explain(a) => pipeline::explain(a),
        Command::Report(a) => pipeline::report(a),
        Command::Serve(a) => serve_cmd::serve(a),
        Command::ExportReview(a) => serve_cmd::export_review(a),
    }
}
