//! `mapinv`: feature map inversion and modified code inversion from the
//! command line.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod fetch;
mod grid;
mod inputs;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use config::{
    merge, read_config_file, CommonArgs, FmiArgs, FmiConfig, RandomStyleArgs, RandomStyleConfig, StyleTransferArgs,
    StyleTransferConfig, WeightsSource,
};

/// How a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config, inputs or request: exit 1.
    Usage(anyhow::Error),
    /// Optimisation or output failure: exit 2.
    Runtime(anyhow::Error),
}

#[derive(Parser)]
#[command(name = "mapinv", version, about = "Invert modified CNN codes back into images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Invert codes in which one filter carries its layer's whole energy.
    Fmi {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        args: FmiArgs,
    },
    /// Invert codes whose per-channel energy is reallocated at random.
    RandomStyle {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        args: RandomStyleArgs,
    },
    /// Combine a content code with the channel energies (or Gram matrices)
    /// of a style image.
    StyleTransfer {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        args: StyleTransferArgs,
    },
    /// Print code shapes and per-channel sums as JSON.
    Inspect(InspectArgs),
    /// Download or copy a weights file into the cache and verify it.
    FetchWeights(FetchArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
struct InspectArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    size: Option<u32>,
    #[arg(long)]
    image: Option<PathBuf>,
    /// Comma separated layers, or `all` for every relu layer.
    #[arg(long)]
    layers: Option<String>,
    /// Include Gram matrices.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    gram: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FetchArgs {
    /// URL or local path of the weights file.
    source: String,
    /// Expected SHA-256 (hex).
    #[arg(long)]
    sha256: Option<String>,
    /// Cache directory (default `$MAPINV_CACHE` or `~/.cache/mapinv`).
    #[arg(long)]
    cache: Option<PathBuf>,
    /// File name inside the cache.
    #[arg(long)]
    name: Option<String>,
}

/// Merges flags over the config file named by `--config`, if any.
fn with_file<T>(config: &Option<PathBuf>, flags: T) -> anyhow::Result<T>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    match config {
        Some(path) => merge(&flags, &read_config_file(path)?),
        None => Ok(flags),
    }
}

fn usage<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Usage)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Fmi { common, args } => {
            let cfg = usage((|| {
                let c = with_file(&common.config, common.clone())?;
                let a = with_file(&common.config, args)?;
                FmiConfig::resolve(&c, &a)
            })())?;
            commands::fmi(cfg)
        }
        Command::RandomStyle { common, args } => {
            let cfg = usage((|| {
                let c = with_file(&common.config, common.clone())?;
                let a = with_file(&common.config, args)?;
                RandomStyleConfig::resolve(&c, &a)
            })())?;
            commands::random_style(cfg)
        }
        Command::StyleTransfer { common, args } => {
            let cfg = usage((|| {
                let c = with_file(&common.config, common.clone())?;
                let a = with_file(&common.config, args)?;
                StyleTransferConfig::resolve(&c, &a)
            })())?;
            commands::style_transfer(cfg)
        }
        Command::Inspect(args) => {
            let req = usage((|| {
                let a = with_file(&args.config, args.clone())?;
                let weights = match a.weights {
                    Some(w) => w,
                    None => std::env::var("MAPINV_WEIGHTS")
                        .context("no weights given: pass --weights or set MAPINV_WEIGHTS")?,
                };
                Ok(commands::InspectRequest {
                    image: a.image.context("--image is required")?,
                    weights: WeightsSource::parse(&weights)?,
                    size: a.size.unwrap_or(224),
                    layers: a.layers.unwrap_or_else(|| "all".into()),
                    gram: a.gram,
                    out: a.out,
                })
            })())?;
            commands::inspect(req)
        }
        Command::FetchWeights(args) => {
            let req = fetch::FetchRequest {
                source: args.source,
                sha256: args.sha256,
                cache: args.cache.unwrap_or_else(fetch::default_cache),
                name: args.name,
            };
            let path = fetch::fetch(&req).map_err(Failure::Runtime)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
