//! `svdcache` command-line harness.

pub mod commands;
pub mod config;
pub mod selftest;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 1.
    Validation(String),
    /// Failure while running; exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid configuration: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<svdcache_core::Error> for CliError {
    fn from(e: svdcache_core::Error) -> Self {
        use svdcache_core::Error::*;
        match e {
            InvalidTau(_) | InvalidBeta(_) | InvalidSchedule(_) | InvalidConfig(_) => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "svdcache",
    version,
    about = "Spectrally decomposed feature caching experiments"
)]
pub struct Cli {
    /// TOML experiment config.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set strategy.tau=0.7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Seed to run; repeatable, replaces `seeds` from the config.
    #[arg(long = "seed", global = true)]
    pub seeds: Vec<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, short, global = true)]
    pub jobs: Option<usize>,
    /// Output directory. Falls back to `out_dir`, then `$SVDCACHE_OUT`, then `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decompose the reference trajectory into a basis store.
    Decompose,
    /// Generate and save trajectories, one per seed.
    Synth,
    /// Cached run per seed with per-step error and similarity.
    Run,
    /// Rank strategies over intervals and thresholds.
    Compare,
    /// PCA traces, cross-seed basis similarity and smoothness tables.
    Analyze,
    /// Built-in property checks at small sizes.
    Selftest {
        #[arg(long, hide = true)]
        inject_corruption: bool,
    },
}

fn output_dir(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .or_else(|| std::env::var_os("SVDCACHE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::Validation("--jobs must be >= 1".into()));
        }
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global();
    }
    if let Command::Selftest { inject_corruption } = cli.command {
        let results = selftest::run_all(inject_corruption);
        let failed = results.iter().filter(|r| r.error.is_some()).count();
        return if failed == 0 {
            Ok(())
        } else {
            Err(CliError::Runtime(format!(
                "{failed} selftest suite(s) failed"
            )))
        };
    }
    let mut overrides = cli.overrides.clone();
    if !cli.seeds.is_empty() {
        let list: Vec<String> = cli.seeds.iter().map(u64::to_string).collect();
        overrides.push(format!("seeds=[{}]", list.join(",")));
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    let out = output_dir(cli, &cfg);
    run_command(&cli.command, &cfg, &out)
}

pub fn run_command(command: &Command, cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    match command {
        Command::Decompose => commands::cmd_decompose(cfg, out).map(drop),
        Command::Synth => commands::cmd_synth(cfg, out).map(drop),
        Command::Run => commands::cmd_run(cfg, out).map(drop),
        Command::Compare => commands::cmd_compare(cfg, out).map(drop),
        Command::Analyze => commands::cmd_analyze(cfg, out).map(drop),
        Command::Selftest { .. } => unreachable!("handled in dispatch"),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
