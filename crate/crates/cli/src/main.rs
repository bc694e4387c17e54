use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use pmce_core::eval::{ClassifierKind, LrMode};
use pmce_core::prior::RetrievalSource;

#[derive(Debug, Parser)]
#[command(
    name = "pmce",
    version,
    about = "Few-shot prototype calibration and caption-guided enhancement"
)]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic feature store.
    Synth(SynthArgs),
    /// Build the knowledge bank from a store's base split.
    Bank(BankArgs),
    /// Train the enhancer and auxiliary classifier on the base split.
    Train(TrainArgs),
    /// Run episodic evaluation on the novel split.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Print a summary table for saved evaluation reports.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_base: Option<usize>,
    #[arg(long)]
    pub n_novel: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub d_v: Option<usize>,
    #[arg(long)]
    pub d_t: Option<usize>,
    #[arg(long)]
    pub d_s: Option<usize>,
    #[arg(long)]
    pub sigma_vis: Option<f64>,
    #[arg(long)]
    pub sigma_name: Option<f64>,
    #[arg(long)]
    pub sigma_cap: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BankArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Output directory for bank.json, bank.means and bank.names_emb.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines training log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda_rec: Option<f64>,
    #[arg(long)]
    pub lambda_con: Option<f64>,
    #[arg(long)]
    pub tau_c: Option<f64>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_k: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    /// Trained checkpoint; required unless both enhance flags are off.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-episode accuracies as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Worker threads; the report is identical for every value.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Evaluate all eight combinations of the pipeline stages.
    #[arg(long)]
    pub ablation: bool,
    #[arg(long)]
    pub n_way: Option<usize>,
    #[arg(long)]
    pub k_shot: Option<usize>,
    #[arg(long)]
    pub m_query: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Retrieved neighbours per novel class.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_parser = parse_retrieval)]
    pub retrieval: Option<RetrievalSource>,
    #[arg(long, value_parser = parse_classifier)]
    pub classifier: Option<ClassifierKind>,
    #[arg(long)]
    pub use_map: Option<bool>,
    #[arg(long)]
    pub enhance_support: Option<bool>,
    #[arg(long)]
    pub enhance_query: Option<bool>,
    #[arg(long)]
    pub lr_l2: Option<f64>,
    #[arg(long, value_parser = parse_lr_mode)]
    pub lr_mode: Option<LrMode>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Semantic tokens per sample.
    #[arg(long, default_value_t = 3)]
    pub tokens: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Corrupt one analytic gradient; the check must then fail.
    #[arg(long)]
    pub inject_bug: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Reports written by `pmce eval --out`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

fn parse_classifier(s: &str) -> Result<ClassifierKind, String> {
    s.parse().map_err(|e: pmce_core::PmceError| e.to_string())
}

fn parse_retrieval(s: &str) -> Result<RetrievalSource, String> {
    match s {
        "class-name" | "class_name" => Ok(RetrievalSource::ClassName),
        "visual-mean" | "visual_mean" => Ok(RetrievalSource::VisualMean),
        _ => Err(format!("expected class-name or visual-mean, got `{s}`")),
    }
}

fn parse_lr_mode(s: &str) -> Result<LrMode, String> {
    match s {
        "prototypes" => Ok(LrMode::Prototypes),
        "supports" => Ok(LrMode::Supports),
        _ => Err(format!("expected prototypes or supports, got `{s}`")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome =
        config::RunConfig::load(cli.config.as_deref()).and_then(|cfg| match cli.command {
            Command::Synth(a) => commands::synth(cfg, a),
            Command::Bank(a) => commands::bank(a),
            Command::Train(a) => commands::train(cfg, a),
            Command::Eval(a) => commands::eval(cfg, a),
            Command::Gradcheck(a) => commands::gradcheck(cfg, a),
            Command::Report(a) => commands::report(a),
        });
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
