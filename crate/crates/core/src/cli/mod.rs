//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 for usage, configuration and input errors,
//! 3 for numerical failures (including a failed `grad-check`). Errors are
//! written to standard error as one JSON object per line.

pub mod commands;
pub mod config;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::Error;
use crate::gmmflow::MethodKind;
use crate::steering::Space;

pub use config::{ExperimentConfig, RawConfig};

#[derive(Debug, Parser)]
#[command(name = "ctxrepulse", version, about = "Contextual-space repulsion experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Cosine,
    Rbf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    Timestep,
    Blocks,
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    None,
    Contextual,
    Latent,
    Cads,
}

impl From<MethodArg> for MethodKind {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::None => MethodKind::None,
            MethodArg::Contextual => MethodKind::Contextual,
            MethodArg::Latent => MethodKind::Latent,
            MethodArg::Cads => MethodKind::Cads,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpaceArg {
    Contextual,
    Latent,
}

impl From<SpaceArg> for Space {
    fn from(s: SpaceArg) -> Self {
        match s {
            SpaceArg::Contextual => Space::Contextual,
            SpaceArg::Latent => Space::Latent,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Entropy and Vendi score of the rows of a CSV file.
    Vendi {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "cosine")]
        kernel: KernelArg,
        #[arg(long)]
        bandwidth: Option<f64>,
    },
    /// Compare the analytic entropy gradient with central differences.
    GradCheck {
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        fd_step: f64,
    },
    /// Apply the repulsion update to the rows of a CSV file.
    Repulse {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        eta: f64,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long)]
        normalize: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Toy transformer pass with and without repulsion.
    ToyRun {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for snapshot CSVs and the per-block report.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Flow runs over seeds, one JSON metrics record per run.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one axis and write a CSV of seed-averaged metrics.
    Ablate {
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Steer a source run toward a target run.
    Steer {
        #[arg(long, allow_negative_numbers = true)]
        alpha: f64,
        #[arg(long)]
        source_seed: u64,
        #[arg(long)]
        target_seed: u64,
        #[arg(long, value_enum, default_value = "contextual")]
        space: SpaceArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure of a command, with its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Input(Error),
    Numeric(Error),
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input(_) => 2,
            CliError::Numeric(_) | CliError::CheckFailed(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Input(_) => "input",
            CliError::Numeric(_) => "numeric",
            CliError::CheckFailed(_) => "check_failed",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::CheckFailed(m) => m.clone(),
            CliError::Input(e) | CliError::Numeric(e) => e.to_string(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonConvergence { .. }
            | Error::NonFinite(_)
            | Error::NumericOverflow(_)
            | Error::Asymmetric(_) => CliError::Numeric(e),
            _ => CliError::Input(e),
        }
    }
}

/// Parse `args` (including the program name) and run the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let failure = CliError::Usage(e.kind().to_string() + ": " + first_line(&e.to_string()));
            report(&failure, err);
            return failure.exit_code();
        }
    };
    match commands::dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(failure) => {
            report(&failure, err);
            failure.exit_code()
        }
    }
}

fn first_line(s: &str) -> &str {
    s.lines().next().unwrap_or("").trim_start_matches("error: ")
}

fn report(failure: &CliError, err: &mut dyn Write) {
    let line = serde_json::json!({ "error": failure.kind(), "message": failure.message() });
    let _ = writeln!(err, "{line}");
}
