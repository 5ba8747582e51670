//! Experiment runner for the FedSiKD simulator.
//!
//! `fedsikd run` executes one configuration; `fedsikd grid` sweeps
//! strategies × Dirichlet alphas and writes one output directory per cell.

mod config;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use config::{read_config_file, resolve_config, ExperimentConfig, KeyValue, Preset};

#[derive(Parser)]
#[command(name = "fedsikd", version, about = "Federated learning simulator: similarity-clustered knowledge distillation and baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Config file in `key = value` format.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a single key, e.g. `--set alpha=0.5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Defaults profile: `paper` (full scale) or `smoke` (CI scale).
    #[arg(long, default_value = "paper")]
    preset: String,

    /// Output directory (overrides the config).
    #[arg(long)]
    output_dir: Option<PathBuf>,

    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,

    /// Dataset root containing `mnist/` and `har/` (overrides the config
    /// and the FEDSIKD_DATA_ROOT environment variable).
    #[arg(long)]
    data_root: Option<PathBuf>,

    /// Suppress per-round progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single experiment configuration.
    Run(CommonArgs),
    /// Run a strategies × alphas grid (defaults reproduce the full
    /// four-strategy, four-alpha sweep).
    Grid {
        #[command(flatten)]
        common: CommonArgs,

        /// Comma-separated strategy list.
        #[arg(long, default_value = "fedsikd,fedavg,random_cluster,fl_hc")]
        strategies: String,

        /// Comma-separated Dirichlet alpha list.
        #[arg(long, default_value = "2.0,1.0,0.5,0.1")]
        alphas: String,
    },
}

fn parse_preset(name: &str) -> Result<Preset> {
    match name {
        "paper" => Ok(Preset::Paper),
        "smoke" => Ok(Preset::Smoke),
        other => bail!("preset '{other}' is not one of paper, smoke"),
    }
}

fn resolve(common: &CommonArgs) -> Result<ExperimentConfig> {
    let preset = parse_preset(&common.preset)?;
    let file_pairs = match &common.config {
        Some(path) => read_config_file(path)?,
        None => Vec::new(),
    };
    let mut overrides = Vec::new();
    for raw in &common.set {
        let Some((key, value)) = raw.split_once('=') else {
            bail!("--set expects KEY=VALUE, got '{raw}'");
        };
        overrides.push(KeyValue {
            key: key.trim().to_string(),
            value: value.trim().to_string(),
            location: format!("--set {raw}"),
        });
    }
    let flag = |key: &str, value: String| KeyValue {
        key: key.to_string(),
        value,
        location: format!("--{}", key.replace('_', "-")),
    };
    if let Some(dir) = &common.data_root {
        overrides.push(flag("data_root", dir.display().to_string()));
    }
    if let Some(seed) = common.seed {
        overrides.push(flag("seed", seed.to_string()));
    }
    if let Some(out) = &common.output_dir {
        overrides.push(flag("output_dir", out.display().to_string()));
    }
    resolve_config(&file_pairs, &overrides, preset)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(common) => resolve(common).and_then(|cfg| {
            let (train, test) = runner::load_dataset(&cfg)?;
            runner::execute(&cfg, &train, &test, common.quiet).map(|_| 0)
        }),
        Command::Grid {
            common,
            strategies,
            alphas,
        } => resolve(common).and_then(|cfg| {
            let strategy_list: Vec<String> = strategies
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            for s in &strategy_list {
                config::parse_strategy(s)?;
            }
            let mut alpha_list = Vec::new();
            for a in alphas.split(',') {
                let v: f64 = a.trim().parse().map_err(|_| {
                    anyhow::anyhow!("--alphas: '{}' is not a number", a.trim())
                })?;
                if v <= 0.0 {
                    bail!("--alphas: {v} must be positive");
                }
                alpha_list.push(v);
            }
            runner::run_grid(&cfg, &strategy_list, &alpha_list, common.quiet)
        }),
    };
    match result {
        Ok(0) => ExitCode::SUCCESS,
        Ok(failed) => {
            eprintln!("{failed} grid cell(s) failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
