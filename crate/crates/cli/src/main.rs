use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Hybrid full/streaming attention inference on small transformers.
#[derive(Debug, Parser)]
#[command(name = "lazykv", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a randomly initialised model file.
    GenModel(GenModelArgs),
    /// Prefill a prompt, transfer lazy layers, and decode greedily.
    Run(RunArgs),
    /// Measure decode throughput and identification overhead.
    Bench(BenchArgs),
    /// Check the error bounds and supporting lemmas on random models.
    VerifyTheory(VerifyArgs),
    /// Report per-layer lazy ratios during prefill and decoding.
    Analyze(AnalyzeArgs),
    /// Pick lazy layers by frequency over a corpus.
    Preselect(PreselectArgs),
    /// Build an ablation policy (pyramid, random, manual).
    MakePolicy(MakePolicyArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Flavor {
    /// GELU, RMS norm, 1/sqrt(d_k) logit scaling.
    Practical,
    /// ReLU, clip norm, unscaled logits.
    Theory,
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    heads: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    dk: usize,
    #[arg(long)]
    vocab: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weights are drawn uniformly from [-scale, scale].
    #[arg(long, default_value_t = 0.5)]
    scale: f64,
    #[arg(long, value_enum, default_value_t = Flavor::Practical)]
    flavor: Flavor,
    #[arg(long)]
    out: PathBuf,
}

/// Detection windows shared by several commands.
#[derive(Debug, Clone, Args)]
pub struct WindowArgs {
    /// Layers kept on full attention (default: half, rounded up).
    #[arg(long)]
    p_layers: Option<usize>,
    #[arg(long, default_value_t = 4)]
    w_sink: usize,
    #[arg(long, default_value_t = 1020)]
    w_recent: usize,
    #[arg(long, default_value_t = 32)]
    w_last: usize,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSON array file, or an inline comma-separated list.
    #[arg(long)]
    tokens: String,
    #[command(flatten)]
    windows: WindowArgs,
    /// Static policy file; disables online identification.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    max_new: usize,
    /// Write the run report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Save the resulting layer split as a policy file.
    #[arg(long)]
    emit_policy: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096,8192")]
    lengths: Vec<usize>,
    #[command(flatten)]
    windows: WindowArgs,
    /// Prefills per length.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Interleaved decode timing rounds.
    #[arg(long, default_value_t = 5)]
    rounds: usize,
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 500)]
    lemma_trials: usize,
    #[arg(long, default_value_t = 4)]
    max_layers: usize,
    #[arg(long, default_value_t = 3)]
    max_heads: usize,
    #[arg(long, default_value_t = 8)]
    max_dim: usize,
    #[arg(long, default_value_t = 24)]
    max_tokens: usize,
    #[arg(long, default_value_t = 1.2)]
    max_b: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    tokens: String,
    #[arg(long)]
    p_layers: Option<usize>,
    #[arg(long, default_value_t = 4)]
    w_sink: usize,
    #[arg(long, default_value_t = 1020)]
    w_recent: usize,
    /// One or more query-window sizes to sweep.
    #[arg(long, value_delimiter = ',', default_value = "32")]
    w_last: Vec<usize>,
    /// Decode steps to analyse after prefill.
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PreselectArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSON-lines file of {"question": [...], "answer": [...]}.
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    windows: WindowArgs,
    /// Policy output path.
    #[arg(long)]
    out: PathBuf,
    /// Frequency table output path (stdout when omitted).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyKind {
    Pyramid,
    Random,
    Manual,
}

#[derive(Debug, Args)]
pub struct MakePolicyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    strategy: StrategyKind,
    #[command(flatten)]
    windows: WindowArgs,
    /// Pyramid: mean recent window (default: --w-recent).
    #[arg(long)]
    mean_recent: Option<usize>,
    /// Random: half-open layer range `a..b` (default: all layers).
    #[arg(long)]
    range: Option<String>,
    /// Manual: comma-separated lazy layers.
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = commands::configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match commands::dispatch(cli.command) {
        Ok(commands::Outcome::Success) => ExitCode::SUCCESS,
        Ok(commands::Outcome::VerificationFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
