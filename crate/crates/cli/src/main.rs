//! `ndbench`: synthetic data, preprocessing, the four experiments,
//! latency benchmarks and report tables.
//!
//! Exit codes: 0 success, 2 usage or data error, 3 recorded training
//! failure (results are still written).

mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Run, Status};
use error::CliError;

#[derive(Parser)]
#[command(name = "ndbench", version, about = "Neural decoding backbone benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config (nested or flat dotted keys), or a run manifest to replay.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Values are
    /// parsed as JSON when possible.
    #[arg(short, long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set out.dir=<DIR>`.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic session bundles to <out>/sessions.
    Synth(Common),
    /// Bin, smooth, split and normalize sessions; write a summary.
    Preprocess(Common),
    /// Single- or multi-session training (`experiment`).
    Train(Common),
    /// Zero-shot plus incremental fine-tuning of a checkpoint on a new session.
    Finetune(Common),
    /// Window-latency distributions and complexity ratios of checkpoints.
    Bench(Common),
    /// Multi-session training across layer counts and seeds.
    Scale(Common),
    /// Summary tables from metrics and latency CSVs.
    Report(Common),
}

fn threads() -> Result<usize, CliError> {
    match std::env::var("NDBENCH_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!("NDBENCH_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn execute(cli: Cli) -> Result<Status, CliError> {
    let (name, common, cmd): (&'static str, Common, fn(&mut Run) -> Result<Status, CliError>) = match cli.command {
        Command::Synth(c) => ("synth", c, commands::synth),
        Command::Preprocess(c) => ("preprocess", c, commands::preprocess_cmd),
        Command::Train(c) => ("train", c, commands::train),
        Command::Finetune(c) => ("finetune", c, commands::finetune),
        Command::Bench(c) => ("bench", c, commands::bench),
        Command::Scale(c) => ("scale", c, commands::scale),
        Command::Report(c) => ("report", c, commands::report),
    };
    let mut overrides = common.set;
    if let Some(out) = common.out {
        overrides.push(format!("out.dir={}", serde_json::Value::String(out.display().to_string())));
    }
    let loaded = config::load(common.config.as_deref(), &overrides)?;
    let mut run = Run::new(loaded.spec, name, threads()?, loaded.expected_hashes);
    let status = cmd(&mut run)?;
    let manifest = run.write_manifest(status)?;
    eprintln!("manifest: {}", manifest.display());
    Ok(status)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::TrainingFailure) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
