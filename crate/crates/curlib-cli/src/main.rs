//! Command-line front end for the compression library: generate a toy
//! teacher, calibrate it, factorize chosen weights, heal the result by
//! distillation, evaluate the damage, sweep ablation axes, and size up real
//! architectures without touching any weights.
//!
//! Failures print a single machine-readable JSON object on stderr and exit
//! with 2 (configuration), 3 (numerical), or 4 (I/O).

mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{
    AblateArgs, CalibrateArgs, CompressArgs, EvalArgs, GenModelArgs, HealArgs, SizeReportArgs,
};
use config::FileConfig;
use error::{CliError, CliResult};

/// CUR-decomposition compression pipeline for a toy transformer.
///
/// Settings resolve as: explicit flag, then the same key in --config, then
/// the built-in default noted on each flag.
#[derive(Parser)]
#[command(name = "curlib", version)]
struct Cli {
    /// Flat `key = value` config file; explicit flags override its entries
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create and train a seeded toy teacher model
    GenModel(GenModelArgs),
    /// Forward a calibration corpus and save activation statistics
    Calibrate(CalibrateArgs),
    /// Factorize planned weights into low-rank form and write reports
    Compress(CompressArgs),
    /// Distill a compressed model toward its teacher, updating only cores
    Heal(HealArgs),
    /// Compare a compressed model against its teacher on held-out data
    Eval(EvalArgs),
    /// Sweep one pipeline axis and tabulate the comparison
    Ablate(AblateArgs),
    /// Parameter and memory arithmetic for real architectures
    SizeReport(SizeReportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = err.exit_code();
            let payload = serde_json::json!({
                "error": {
                    "kind": err.kind(),
                    "message": err.to_string(),
                    "exit_code": code,
                }
            });
            eprintln!("{payload}");
            ExitCode::from(code as u8)
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    init_thread_pool()?;
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::empty(),
    };
    match &cli.command {
        Command::GenModel(a) => commands::cmd_gen_model(a, &file),
        Command::Calibrate(a) => commands::cmd_calibrate(a, &file),
        Command::Compress(a) => commands::cmd_compress(a, &file),
        Command::Heal(a) => commands::cmd_heal(a, &file),
        Command::Eval(a) => commands::cmd_eval(a, &file),
        Command::Ablate(a) => commands::cmd_ablate(a, &file),
        Command::SizeReport(a) => commands::cmd_size_report(a, &file),
    }
}

/// `CURLIB_THREADS` caps the worker pool; unset means one worker per core.
fn init_thread_pool() -> CliResult<()> {
    match std::env::var("CURLIB_THREADS") {
        Ok(v) => {
            let n: usize = v.parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
                CliError::Config(format!(
                    "CURLIB_THREADS must be a positive integer, got `{v}`"
                ))
            })?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Config(format!("worker pool setup failed: {e}")))
        }
        Err(std::env::VarError::NotPresent) => Ok(()),
        Err(e) => Err(CliError::Config(format!("CURLIB_THREADS: {e}"))),
    }
}
