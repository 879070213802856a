//! `qtraj`: run trajectory ensembles, check them against the master equation,
//! build and reconstruct measurement POVMs, and draw effect contours.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{CommandKind, Format, Method, PovmKind, RunConfig, SEED_ENV};
use error::CliError;

#[derive(Parser)]
#[command(
    name = "qtraj",
    version,
    about = "Quantum trajectories of a damped optical mode"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an ensemble and write one record per trajectory
    Simulate(Flags),
    /// Compare an ensemble with the master equation; exit 1 on disagreement
    MasterCheck(Flags),
    /// Write an analytic or reconstructed POVM as JSON
    Povm(Flags),
    /// Write the one-standard-deviation Wigner contour of an effect as CSV
    Wigner(Flags),
    /// Sample completed phase measurements as JSONL
    Adaptive(Flags),
}

/// Flags shared by every subcommand. Unset flags fall back to the config file
/// and then to the defaults.
#[derive(Args, Serialize)]
struct Flags {
    /// JSON config file, or an output file whose config header to reuse
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// vacuum | fock:n | coherent:re,im | qubit:c0,c1 (adaptive: also tomographic)
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    state: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    nmax: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dt: Option<f64>,
    #[arg(long = "tfinal")]
    #[serde(skip_serializing_if = "Option::is_none")]
    t_final: Option<f64>,
    #[arg(long = "ntraj")]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_traj: Option<usize>,
    /// Root seed; falls back to QTRAJ_SEED
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long, value_parser = ["jump", "diffusive"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    scheme: Option<String>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    method: Option<Method>,
    /// Local-oscillator amplitude |gamma| for jump schemes
    #[arg(long = "lo-amplitude")]
    #[serde(skip_serializing_if = "Option::is_none")]
    lo_amplitude: Option<f64>,
    /// constant:PHI | heterodyne[:PHI0,DELTA] | adaptive-single | adaptive-mean
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    controller: Option<String>,
    /// Model file {"nmax", "H", "collapse"}; defaults to the freely damped mode
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    format: Option<Format>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    threads: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    nbins: Option<usize>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    kind: Option<PovmKind>,
    /// Phase-sample JSONL files to reconstruct a POVM from
    #[arg(long, num_args = 1..)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    reconstruct: Vec<PathBuf>,
    /// Write completed measurements (A, B) instead of trajectory records
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    completed: bool,
    /// Extra comparison times for master-check, comma separated
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    times: Vec<f64>,
    /// R as re,im
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    r: Option<String>,
    /// S as re,im
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    s: Option<String>,
    /// Completed-measurement JSONL file to take R, S and t from
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    record: Option<PathBuf>,
    #[arg(long = "record-index")]
    #[serde(skip_serializing_if = "Option::is_none")]
    record_index: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    npoints: Option<usize>,
    /// Half-width of homodyne and heterodyne POVM grids
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    xmax: Option<f64>,
    /// Scale every weight before estimating (negative control for master-check)
    #[arg(long, hide = true)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    corrupt_weights: bool,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (kind, flags) = match cli.command {
        Command::Simulate(f) => (CommandKind::Simulate, f),
        Command::MasterCheck(f) => (CommandKind::MasterCheck, f),
        Command::Povm(f) => (CommandKind::Povm, f),
        Command::Wigner(f) => (CommandKind::Wigner, f),
        Command::Adaptive(f) => (CommandKind::Adaptive, f),
    };
    let layer = serde_json::to_value(&flags).map_err(|e| CliError::Config(e.to_string()))?;
    let cfg = RunConfig::resolve(
        kind,
        flags.config.as_deref(),
        layer,
        std::env::var(SEED_ENV).ok(),
    )?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    log::debug!("effective config: {}", cfg.to_json());
    match kind {
        CommandKind::Simulate => commands::simulate(&cfg),
        CommandKind::MasterCheck => commands::master_check(&cfg),
        CommandKind::Povm => commands::povm(&cfg),
        CommandKind::Wigner => commands::wigner(&cfg),
        CommandKind::Adaptive => commands::adaptive(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qtraj: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
