//! `remnist`: reconstruct digit datasets from source scan archives, match
//! them against references, and compare classifier results.
//!
//! Exit codes: 0 on success, 2 for usage or input problems (bad flags,
//! missing or malformed files, domain violations), 1 for internal
//! failures (cannot write outputs, broken invariants).

use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod data;
mod manifest;

use commands::{
    cmd_assemble, cmd_eval, cmd_idx, cmd_match, cmd_preprocess, cmd_stats, AssembleArgs, EvalCmd,
    IdxCmd, MatchArgs, PreprocessArgs, StatsCmd,
};

#[derive(Debug)]
pub enum CliError {
    /// Caller-side problem: bad arguments, unreadable or malformed input.
    Usage(String),
    /// Our-side problem: output writing failed or an invariant broke.
    Internal(String),
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn internal(msg: impl Into<String>) -> CliError {
    CliError::Internal(msg.into())
}

#[derive(Parser)]
#[command(name = "remnist", version, about = "Digit dataset reconstruction and evaluation")]
struct Cli {
    /// Cap on worker threads (default: hardware parallelism). Outputs do
    /// not depend on this except for `eval mlp --parallel`.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build paired train/test sets from a source archive
    Assemble(AssembleArgs),
    /// Run one source image through the preprocessing chain
    Preprocess(PreprocessArgs),
    /// Match two datasets by jittered distance and report quality stats
    Match(MatchArgs),
    /// Error-rate statistics
    #[command(subcommand)]
    Stats(StatsCmd),
    /// Train, evaluate and compare classifiers
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Inspect and slice IDX tensor files
    #[command(subcommand)]
    Idx(IdxCmd),
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| internal(format!("cannot configure thread pool: {e}")))?;
    }
    match cli.command {
        Command::Assemble(args) => cmd_assemble(args, cli.threads),
        Command::Preprocess(args) => cmd_preprocess(args, cli.threads),
        Command::Match(args) => cmd_match(args, cli.threads),
        Command::Stats(cmd) => cmd_stats(cmd),
        Command::Eval(cmd) => cmd_eval(cmd, cli.threads),
        Command::Idx(cmd) => cmd_idx(cmd),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
