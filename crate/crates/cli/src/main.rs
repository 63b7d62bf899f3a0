//! `skybid`: train, verify, validate, and sweep from the command line.
//!
//! Exit codes: 0 success, 1 configuration error, 2 a verification check
//! failed, 3 runtime error. Output directories default to a subdirectory of
//! `$SKYBID_OUT` (or `./runs`).

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub const OUT_ENV: &str = "SKYBID_OUT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Check(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
        move |e| CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl From<skybid_core::Error> for CliError {
    fn from(e: skybid_core::Error) -> Self {
        match e {
            skybid_core::Error::InvalidArgument(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "skybid", version, about = "Sealed-bid UAV auction simulator and federated trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct ConfigArgs {
    /// Built-in preset (see `skybid train --list-presets`).
    #[arg(long)]
    pub preset: Option<String>,
    /// Flat TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override, repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy and write metrics.csv, params.bin, and manifest.json.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (default: $SKYBID_OUT/<preset>-seed<seed>-<hash>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Validate and print the resolved configuration without training.
        #[arg(long)]
        dry_run: bool,
        /// Shorthand for `--set epochs=N`.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        list_presets: bool,
    },
    /// Exhaustively verify the auction game properties on small instances.
    Oracle(commands::OracleArgs),
    /// Evaluate a frozen policy over fresh episodes.
    Validate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Snapshot written by `train`.
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every (preset, seed) pair, skipping completed runs.
    Sweep {
        /// Comma-separated preset names.
        #[arg(long, value_delimiter = ',', required = true)]
        presets: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            out,
            dry_run,
            epochs,
            list_presets,
        } => {
            if list_presets {
                for p in config::PRESETS {
                    println!("{p}");
                }
                return Ok(());
            }
            let mut overrides = config.overrides.clone();
            if let Some(e) = epochs {
                overrides.push(format!("epochs={e}"));
            }
            let cfg = config::RunConfig::resolve(
                config.preset.as_deref(),
                config.config.as_deref(),
                &overrides,
            )?;
            if dry_run {
                print!("{}", cfg.to_toml());
                println!("# config_hash = \"{}\"", cfg.hash());
                println!("# action_dim_delta = {}", cfg.action_dim_delta());
                return Ok(());
            }
            let dir = out.unwrap_or_else(|| commands::default_run_dir(&out_root(), &cfg));
            commands::train(&cfg, &dir).map(|summary| println!("{summary}"))
        }
        Command::Oracle(args) => commands::oracle(&args),
        Command::Validate {
            config,
            params,
            episodes,
            seed,
            out,
        } => {
            let cfg = config::RunConfig::resolve(
                config.preset.as_deref(),
                config.config.as_deref(),
                &config.overrides,
            )?;
            let dir = out.unwrap_or_else(|| out_root().join(format!("validate-seed{seed}")));
            commands::validate(&cfg, &params, episodes, seed, &dir)
        }
        Command::Sweep {
            presets,
            seeds,
            overrides,
            out,
        } => {
            let root = out.unwrap_or_else(|| out_root().join("sweep"));
            commands::sweep(&presets, &seeds, &overrides, &root)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("skybid: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
