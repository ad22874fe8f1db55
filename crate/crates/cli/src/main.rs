//! `controlpipe`: one subcommand per pipeline stage.
//!
//! Exit codes: 0 on success, 1 on operational errors, 2 on usage errors.
//! Logs go to stderr; data goes to the given files or stdout.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use controlpipe_core::marker::ReasoningMode;

use crate::config::{AppConfig, BackendKind};

#[derive(Debug, Parser)]
#[command(name = "controlpipe", version, about = "Controllable-reasoning data pipeline")]
struct Cli {
    /// TOML config file (default: ./controlpipe.toml when present).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Default, Args)]
struct BackendArgs {
    /// Backend kind.
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Cassette JSONL answering requests for the stub backend.
    #[arg(long)]
    cassette: Option<PathBuf>,
    /// Record HTTP exchanges to this cassette path.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    timeout_secs: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
struct SynthArgs {
    /// Directory of prompt templates overriding the bundled ones.
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_tokens: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Instruction,
    Context,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CorpusKind {
    Auto,
    Samples,
    Records,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Sft,
    Ppo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RewardChecker {
    /// Every answer counts as correct; reward tracks validity alone.
    Validity,
    /// The answer must equal the sum.
    Exact,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate reasoning samples from instruction records.
    Generate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "instruction")]
        strategy: StrategyArg,
        #[arg(long, default_value = "max")]
        mode: ReasoningMode,
        /// Reject outputs containing these scripts, e.g. `arabic,cyrillic`.
        #[arg(long)]
        ban_scripts: Option<String>,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Strip emoji and drop length, repetition and duplicate rows.
    Filter {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "auto")]
        kind: CorpusKind,
        #[arg(long)]
        ngram: Option<usize>,
        #[arg(long)]
        rep_threshold: Option<f64>,
        #[arg(long)]
        min_len: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Score samples against gold responses with an LLM judge.
    Verify {
        #[arg(long = "in")]
        input: PathBuf,
        /// Instruction records holding the gold responses.
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<u8>,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Build the multi-length corpus by condensing reasoning to word budgets.
    Condense {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "short,medium,long")]
        modes: String,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Compute binary rewards from `{correct_prob, response, mode}` rows.
    Reward {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output JSONL (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the toy policy and emit the training curve as CSV.
    TrainToy {
        #[arg(long, value_enum)]
        stage: Stage,
        /// SFT steps or PPO epochs.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        clip_eps: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, value_enum, default_value = "validity")]
        reward: RewardChecker,
        /// Curve CSV path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score model outputs on multiple-choice items.
    Eval {
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        outputs: PathBuf,
        /// Report directory.
        #[arg(long)]
        report: PathBuf,
    },
    /// Sample from a bundled mixed-script vocabulary with scripts masked out.
    GuardDemo {
        #[arg(long, default_value = "arabic,cyrillic")]
        ban_scripts: String,
        #[arg(long, default_value_t = 20)]
        len: usize,
    },
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let result = AppConfig::load(cli.config.as_deref()).and_then(|mut app| {
        if cli.seed.is_some() {
            app.seed = cli.seed;
        }
        commands::run(cli.command, &app)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
