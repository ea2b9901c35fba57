mod commands;
mod config;
mod error;
mod vectors;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "hman", version, about = "Moment retrieval over video corpora with hierarchical alignment")]
struct Cli {
    #[command(flatten)]
    shared: Shared,

    #[command(subcommand)]
    command: Command,
}

/// Flags accepted by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Shared {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random draw of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for training, index build and query scans.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Floating-point precision of the computation.
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic feature corpus.
    Gen(GenArgs),
    /// Train a model on a feature corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint, ablations or the prior baseline.
    Eval(EvalArgs),
    /// Rank every moment of a corpus against sentence feature vectors.
    Query(QueryArgs),
    /// Run the self-check suite.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Preset name (default, didemo, charades, activitynet) or a JSON spec file.
    #[arg(long, default_value = "default")]
    spec: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Sum,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Proposed,
    Intra,
    Video,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    Log,
    Ave,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    /// Joint embedding size.
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Videos to train on.
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    Proposed,
    Intra,
    Video,
    Ave,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Prior,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Machine-readable JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Retrain with the checkpoint's settings under each listed change and
    /// evaluate the results side by side.
    #[arg(long, value_enum, value_delimiter = ',')]
    ablate: Vec<Ablation>,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Videos whose sentences query and whose moments are ranked.
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    /// Embedding size for ablation runs without a checkpoint.
    #[arg(long)]
    embed_dim: Option<usize>,
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    /// Sentence feature vectors (JSON array(s) or one query per text line).
    vectors: PathBuf,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    Geometry,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Seeds for the composite gradient check.
    #[arg(long, default_value_t = 10)]
    grad_seeds: u64,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<FaultArg>,
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = RunConfig::load(cli.shared.config.as_deref())?;
    let ctx = commands::Context::new(&cli.shared, cfg)?;
    match cli.command {
        Command::Gen(a) => commands::gen(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Query(a) => commands::query(&ctx, a),
        Command::Verify(a) => commands::verify(&ctx, a),
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Gen(_) => "gen",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Query(_) => "query",
        Command::Verify(_) => "verify",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            use std::io::Write;
            let level = record.level().as_str().to_ascii_lowercase();
            writeln!(buf, "level={level} {}", record.args())
        })
        .init();
    let cli = Cli::parse();
    let name = subcommand_name(&cli.command);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Usage(_)) {
                let mut cmd = Cli::command();
                if let Some(sub) = cmd.find_subcommand_mut(name) {
                    let mut sub = sub.clone().bin_name(format!("hman {name}"));
                    eprintln!("\n{}", sub.render_usage());
                }
            }
            e.exit_code()
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}
