//! `card`: train, evaluate, decode, benchmark and analyze causal diffusion
//! language models.
//!
//! Exit status: 0 on success, 1 for usage and configuration errors, 2 for
//! failures while running.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use card_core::config::{LabConfig, KEYS};

#[derive(Parser, Debug)]
#[command(name = "card", version, about = "Causal autoregressive diffusion laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key = value` configuration file
    #[arg(long, short = 'c', value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable, applied after the file
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for every random draw (sets train.seed and decode.seed)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for the resolved configuration and all outputs
    #[arg(long, short = 'o', default_value = "card-out", value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics.csv, best.ck and final.ck
    Train(TrainArgs),
    /// Perplexity of a causal checkpoint on a data split
    EvalPpl(EvalArgs),
    /// Generate a continuation with block decoding or plain autoregression
    Generate(GenerateArgs),
    /// Per-step training cost of each objective on one model shape
    BenchTrain(BenchTrainArgs),
    /// Tokens per forward and generation quality over a decoding grid
    BenchDecode(BenchDecodeArgs),
    /// Numerical checks of the masking and weighting design
    Analyze(AnalyzeArgs),
    /// Print sampled corruption patterns
    InspectMask(InspectArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Objective (objective.name): card, arm, mdlm or bd3lm
    #[arg(long)]
    pub objective: Option<String>,
    /// Optimizer steps (train.steps)
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long, value_name = "CHECKPOINT")]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Split to score: validation or train
    #[arg(long, default_value = "validation")]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Prompt text; digits for symbolic vocabularies
    #[arg(long, default_value = "")]
    pub prompt: String,
    /// Plain greedy autoregressive decoding
    #[arg(long)]
    pub arm: bool,
    /// Block size (decode.block_size)
    #[arg(long = "K", value_name = "K")]
    pub block_size: Option<usize>,
    /// Commit threshold (decode.threshold)
    #[arg(long)]
    pub tau: Option<f64>,
    /// Iteration limit per block (decode.max_iters)
    #[arg(long = "T", value_name = "T")]
    pub max_iters: Option<usize>,
    /// Tokens to generate (decode.max_new_tokens)
    #[arg(long, short = 'n')]
    pub tokens: Option<usize>,
    /// Write one JSON object per decoded block to this file
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchTrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Timed steps per objective
    #[arg(long, default_value_t = 10)]
    pub rounds: usize,
    /// Comma-separated objectives; ARM is the reference when present
    #[arg(long, default_value = "arm,card,mdlm,bd3lm")]
    pub objectives: String,
}

#[derive(Args, Debug)]
pub struct BenchDecodeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Comma-separated K:T or K:T:tau settings
    #[arg(long, default_value = "16:16,16:8,32:8")]
    pub grid: String,
    /// Threshold for settings without one (decode.threshold)
    #[arg(long)]
    pub tau: Option<f64>,
    /// Prepend the autoregressive reference setting 1:1:0
    #[arg(long)]
    pub arm_baseline: bool,
    /// Prompts drawn from the validation split
    #[arg(long, default_value_t = 32)]
    pub prompts: usize,
    #[arg(long, default_value_t = 15)]
    pub prompt_len: usize,
    /// Tokens generated per prompt
    #[arg(long, default_value_t = 48)]
    pub new_tokens: usize,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(subcommand)]
    pub what: Analysis,
}

#[derive(Subcommand, Debug)]
pub enum Analysis {
    /// Learnable conditionals per objective, exact
    Complexity(ComplexityArgs),
    /// Retained pairwise mutual information under soft-tail and uniform masking
    Mi(MiArgs),
    /// Per-position mask marginals and their adjacent differences
    Continuity(ContinuityArgs),
    /// Loss weights and gradient norms binned by ambiguity score
    Weights(WeightArgs),
}

#[derive(Args, Debug)]
pub struct ComplexityArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated sequence lengths
    #[arg(long = "L", value_name = "L", default_value = "3")]
    pub lengths: String,
    /// BD3LM block size, used where it divides L
    #[arg(long = "K", value_name = "K")]
    pub block_size: Option<usize>,
    /// Also count CARD contexts by enumeration (L <= 16)
    #[arg(long)]
    pub check: bool,
}

#[derive(Args, Debug)]
pub struct MiArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long = "L", value_name = "L", default_value_t = 16)]
    pub len: usize,
    /// Stay probability of the two-state chain
    #[arg(long, default_value_t = 0.9)]
    pub stay: f64,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    /// Comma-separated noise times
    #[arg(long = "t", value_name = "T", default_value = "0.25,0.5,0.75")]
    pub t_grid: String,
}

#[derive(Args, Debug)]
pub struct ContinuityArgs {
    #[command(flatten)]
    pub common: Common,
    /// soft_tail, strict_tail, uniform or block:<K>
    #[arg(long, default_value = "soft_tail")]
    pub strategy: String,
    #[arg(long = "L", value_name = "L", default_value_t = 64)]
    pub len: usize,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    /// Fixed noise time instead of t ~ U[0, 1]
    #[arg(long = "t", value_name = "T")]
    pub t: Option<f64>,
    /// Block to profile for the block strategy
    #[arg(long)]
    pub block: Option<usize>,
}

#[derive(Args, Debug)]
pub struct WeightArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long = "L", value_name = "L", default_value_t = 16)]
    pub len: usize,
    #[arg(long, default_value_t = 10_000)]
    pub patterns: usize,
    /// Patterns for gradient norms on an untrained model; 0 skips them
    #[arg(long, default_value_t = 256)]
    pub grad_patterns: usize,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long = "L", value_name = "L", default_value_t = 16)]
    pub len: usize,
    /// Noise time; drawn uniformly per pattern when absent
    #[arg(long = "t", value_name = "T")]
    pub t: Option<f64>,
    /// Patterns to draw
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Masking strategy (corruption.strategy)
    #[arg(long)]
    pub strategy: Option<String>,
    /// Also print per-position costs, scores and weights
    #[arg(long)]
    pub scores: bool,
}

/// Error in how the program was invoked, reported with exit status 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn key_table() -> String {
    let defaults = LabConfig::default();
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Configuration keys (default in brackets), set with --set KEY=VALUE or a --config file:\n");
    for (key, help) in KEYS {
        let value = defaults.get(key).unwrap_or_default();
        out.push_str(&format!("  {key:<width$}  {help} [{value}]\n"));
    }
    out
}

fn command() -> clap::Command {
    let table = key_table();
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        let t = table.clone();
        cmd = cmd.mut_subcommand(name, |sub| {
            let nested: Vec<String> = sub.get_subcommands().map(|s| s.get_name().to_string()).collect();
            let mut sub = sub.after_help(t.clone());
            for n in nested {
                let t = t.clone();
                sub = sub.mut_subcommand(n, |s| s.after_help(t));
            }
            sub
        });
    }
    cmd
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::EvalPpl(a) => commands::eval_ppl(a),
        Command::Generate(a) => commands::generate(a),
        Command::BenchTrain(a) => commands::bench_train(a),
        Command::BenchDecode(a) => commands::bench_decode(a),
        Command::Analyze(a) => match a.what {
            Analysis::Complexity(a) => commands::complexity(a),
            Analysis::Mi(a) => commands::mi(a),
            Analysis::Continuity(a) => commands::continuity(a),
            Analysis::Weights(a) => commands::weights(a),
        },
        Command::InspectMask(a) => commands::inspect_mask(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
