mod estimate;
mod simulate;
mod verify;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};
use tcl_market::error::Error;

/// Market coordination of thermostatically controlled loads.
#[derive(Parser)]
#[command(name = "tclmarket", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a feeder scenario and write period, summary and trajectory files.
    Simulate(simulate::Args),
    /// Fit a thermal model to a measurement log with EM and report the resulting bid.
    Estimate(estimate::Args),
    /// Write a synthetic measurement log with its true and perturbed initial models.
    SynthLog(estimate::SynthArgs),
    /// Check the mechanism against the team optimum on reference fixtures and one scenario period.
    Verify(verify::Args),
}

/// Exit status for a run that completed but whose checks failed.
pub const EXIT_FAILED_CHECK: u8 = 1;
pub const EXIT_MISSING_FILE: u8 = 2;
pub const EXIT_NON_MONOTONE: u8 = 3;

/// Hex SHA-256 of a file's contents.
pub fn file_digest(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()).into());
    }
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn ensure_dir(dir: &PathBuf) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::MissingFile(_)) => EXIT_MISSING_FILE,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TCLMARKET_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => simulate::run(&args),
        Command::Estimate(args) => estimate::run(&args),
        Command::SynthLog(args) => estimate::synth(&args),
        Command::Verify(args) => verify::run(&args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
