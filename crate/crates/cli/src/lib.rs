//! `logfrag` command-line front end: configuration, dispatch and run
//! directories with a manifest written last.

pub mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::commands::{CommandError, Completed};
use crate::config::{Config, ConfigError};
use crate::manifest::RunManifest;

pub const EXIT_OK: u8 = 0;
pub const EXIT_NUMERICAL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "logfrag",
    version,
    about = "Steady logistic-diffusive resource optimisation laboratory"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    /// TOML configuration; every key has a default.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Run directory (default: runs/<command>-<UTC timestamp>).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the state and adjoint for the configured resource.
    Solve(RunArgs),
    /// Maximise the criterion over admissible resources.
    Optimize(RunArgs),
    /// Optimise over a log-spaced range of diffusivities and fit the BV growth.
    Sweep(RunArgs),
    /// Eigenvalues of the linearised operator and the bang-bang certificate.
    Spectral(RunArgs),
    /// Run the invariant suite; exits non-zero if any check fails.
    Verify(RunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Solve(_) => "solve",
            Self::Optimize(_) => "optimize",
            Self::Sweep(_) => "sweep",
            Self::Spectral(_) => "spectral",
            Self::Verify(_) => "verify",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Self::Solve(a)
            | Self::Optimize(a)
            | Self::Sweep(a)
            | Self::Spectral(a)
            | Self::Verify(a) => a,
        }
    }
}

/// Caps the global rayon pool from `LOGFRAG_THREADS`.
fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("LOGFRAG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("LOGFRAG_THREADS must be a positive integer, got `{raw}`"))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn default_run_dir(command: &str) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    Path::new("runs").join(format!("{command}-{stamp}"))
}

fn dispatch(command: &Command, cfg: &Config, dir: &Path) -> Result<Completed, CommandError> {
    match command {
        Command::Solve(_) => commands::solve(cfg, dir),
        Command::Optimize(_) => commands::optimize(cfg, dir),
        Command::Sweep(_) => commands::sweep(cfg, dir),
        Command::Spectral(_) => commands::spectral(cfg, dir),
        Command::Verify(_) => commands::verify(cfg, dir),
    }
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return EXIT_CONFIG;
    }
    let name = cli.command.name();
    let args = cli.command.args();
    let loaded: Result<Config, ConfigError> = match &args.config {
        Some(p) => Config::load(p),
        None => Config::minimal(),
    };
    let cfg = match loaded {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    let dir = args.out.clone().unwrap_or_else(|| default_run_dir(name));
    if let Err(e) = std::fs::create_dir_all(&dir) {
        eprintln!("error: cannot create run directory {}: {e}", dir.display());
        return EXIT_NUMERICAL;
    }
    let completed = match dispatch(&cli.command, &cfg, &dir) {
        Ok(c) => c,
        Err(e @ CommandError::Unsupported(_)) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_NUMERICAL;
        }
    };
    let manifest = RunManifest::new(name, args.config.as_deref(), &cfg, &completed.files);
    if let Err(e) = manifest.write(&dir) {
        eprintln!("error: cannot write manifest: {e}");
        return EXIT_NUMERICAL;
    }
    println!("run directory: {}", dir.display());
    if completed.passed {
        EXIT_OK
    } else {
        eprintln!("error: some checks failed");
        EXIT_NUMERICAL
    }
}
