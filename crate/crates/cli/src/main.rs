//! `promptalign`: synthesize data, train adapters, score, and evaluate.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use promptalign::{Error, ErrorKind, Split};

/// Multi-label prompt-contrastive alignment over frozen embeddings.
#[derive(Debug, Parser)]
#[command(name = "promptalign", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic features/prompts/subsets triple.
    Synth(SynthArgs),
    /// Train the adapters and temperature; writes the best checkpoint.
    Train(TrainArgs),
    /// Score a split with one or all inference strategies.
    Infer(InferArgs),
    /// Compute per-criterion AP and mAP, or aggregate reports over runs.
    Eval(EvalArgs),
    /// Check analytic loss gradients against central differences.
    Gradcheck(GradcheckArgs),
}

/// Output directory; may be overridden with `PROMPTALIGN_OUT_DIR`.
#[derive(Debug, Args)]
struct OutDir {
    #[arg(long = "out-dir", visible_alias = "out", env = "PROMPTALIGN_OUT_DIR", default_value = ".")]
    dir: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Total records, split 60/20/20 into train/val/test.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Per-criterion positive rate, `c1,c2,c3`, each in (0, 1).
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.5,0.5")]
    prevalence: Vec<f64>,
    /// Standard deviation of per-coordinate image noise.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training paraphrases per criterion and polarity.
    #[arg(long, default_value_t = 4)]
    paraphrases: usize,
    /// Standard deviation of per-coordinate prompt jitter.
    #[arg(long, default_value_t = 0.05)]
    jitter: f64,
    /// One prompt per criterion and polarity, no paraphrases.
    #[arg(long)]
    fixed_class: bool,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
    /// JSON training config; unknown keys are rejected, missing keys default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint instead of starting from identity adapters.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_adapters: Option<f64>,
    #[arg(long)]
    lr_temp: Option<f64>,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Standard,
    Posneg,
    Multiclass,
    All,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
    /// Subset prompts, required by the multiclass strategy.
    #[arg(long)]
    subsets: Option<PathBuf>,
    #[arg(long, required_unless_present = "zero_shot", conflicts_with = "zero_shot")]
    checkpoint: Option<PathBuf>,
    /// Use identity adapters; no checkpoint is read.
    #[arg(long)]
    zero_shot: bool,
    #[arg(long, value_enum, default_value = "standard")]
    strategy: StrategyArg,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    split: Split,
    /// Scale similarities by the learned `exp(θ)` before sigmoid/softmax.
    #[arg(long)]
    use_temperature: bool,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "aggregate")]
    features: Option<PathBuf>,
    #[arg(long, required_unless_present = "aggregate")]
    scores: Option<PathBuf>,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    split: Split,
    /// Report criteria without positives as null instead of failing.
    #[arg(long)]
    skip_undefined: bool,
    /// Checkpoint whose seed and config digest are stamped into the report.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Aggregate existing report JSON files into mean±std.
    #[arg(long, num_args = 1.., conflicts_with_all = ["features", "scores"])]
    aggregate: Vec<PathBuf>,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Batch size.
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random configurations, seeded `seed..seed+configs`.
    #[arg(long, default_value_t = 1)]
    configs: u64,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[command(flatten)]
    out: OutDir,
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failure carrying its process exit code.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Config => 2,
            ErrorKind::Schema => 3,
            ErrorKind::Numeric => 4,
        };
        Self { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a, argv),
        Command::Train(a) => commands::train(a, argv),
        Command::Infer(a) => commands::infer(a, argv),
        Command::Eval(a) => commands::eval(a, argv),
        Command::Gradcheck(a) => commands::gradcheck(a, argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
