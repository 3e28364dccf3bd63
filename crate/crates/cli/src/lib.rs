//! `gplar` command-line front end.
//!
//! Exit codes: 0 success, 1 usage / input / I/O error, 2 numerical failure
//! (non-positive-definite matrix, degenerate conditional, divergence, failed
//! check). Errors are reported on stderr as one `error: <kind>: <message>`
//! line.

use std::ffi::OsString;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

mod commands;
pub mod config;
pub mod output;

use config::{BenchOptions, CheckOptions, GramOptions, KlOptions, LogdensityOptions, SampleOptions, TrainOptions};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 2,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Input(_) => "input",
            CliError::Numerical(_) => "numerical",
            CliError::Io { .. } => "io",
        }
    }
}

impl From<gplar_core::Error> for CliError {
    fn from(e: gplar_core::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gplar", version, about = "Gaussian-process latent autoregression toolkit")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Export the Gram matrix of a kernel on a time grid as CSV.
    Gram(GramOptions),
    /// Draw latent trajectories from the GP prior.
    Sample(SampleOptions),
    /// Chain-rule and joint log-density of a trajectory.
    Logdensity(LogdensityOptions),
    /// KL from a diagonal Gaussian posterior to the GP prior.
    Kl(KlOptions),
    /// Conjugate-gradient iteration and timing benchmark.
    BenchCg(BenchOptions),
    /// Train the toy linear VAE on synthetic GP data.
    Train(TrainOptions),
    /// Run the full invariant suite and print a pass/fail table.
    Check(CheckOptions),
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("GPLAR_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("GPLAR_THREADS must be a positive integer, got `{v}`")))?;
    // A pool may already exist when `run` is called more than once in-process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (program name first), dispatches, and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = stdout.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = stderr.write_all(text.as_bytes());
                    1
                }
            };
        }
    };
    let result = init_threads().and_then(|()| match cli.command {
        Command::Gram(o) => commands::gram(o, stdout),
        Command::Sample(o) => commands::sample(o, stdout),
        Command::Logdensity(o) => commands::logdensity(o, stdout),
        Command::Kl(o) => commands::kl(o, stdout),
        Command::BenchCg(o) => commands::bench_cg(o, stdout),
        Command::Train(o) => commands::train(o, stdout),
        Command::Check(o) => commands::check(o, stdout),
    });
    let _ = stdout.flush();
    match result {
        Ok(()) => 0,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            output::write_stderr(stderr, &format!("error: {}: {line}", e.kind()));
            e.exit_code()
        }
    }
}
