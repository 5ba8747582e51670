//! Executes resolved configurations: data loading, the round loop, and the
//! metrics/summary/echo files in the output directory.

use std::time::Instant;

use anyhow::{Context, Result};

use fedsikd::data::{load_har, load_mnist, subsample_dataset, Dataset};
use fedsikd::federation::ExperimentRunner;
use fedsikd::metrics::{write_metrics, write_summary, ExperimentSummary, RoundMetrics};

use crate::config::{DatasetKind, ExperimentConfig};

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let dir = cfg.dataset_dir();
    let loaded = match cfg.dataset {
        DatasetKind::Mnist => load_mnist(&dir),
        DatasetKind::Har => load_har(&dir),
    }
    .with_context(|| format!("loading {} from {}", cfg.dataset, dir.display()))?;
    Ok(loaded)
}

/// Run one configuration end to end and write `metrics.csv`,
/// `summary.json`, and `config_echo.txt` into its output directory.
pub fn execute(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, quiet: bool) -> Result<Vec<RoundMetrics>> {
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config_echo.txt"), cfg.echo())
        .with_context(|| "writing config echo")?;

    let train = subsample_dataset(train, cfg.subset_fraction, cfg.seed)?;
    let fed_cfg = cfg.federation_config()?;
    let started = Instant::now();
    let mut runner = ExperimentRunner::new(fed_cfg, &train, test)?;
    if !quiet {
        let report = runner.clustering();
        match report.selected_k {
            Some(k) => println!(
                "[{} α={} seed={}] {} clients in {} clusters (selected K={k})",
                cfg.strategy,
                cfg.alpha,
                cfg.seed,
                cfg.clients,
                report.labels.iter().max().map_or(1, |&m| m + 1),
            ),
            None => println!(
                "[{} α={} seed={}] {} clients",
                cfg.strategy, cfg.alpha, cfg.seed, cfg.clients
            ),
        }
    }
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let m = runner.step()?;
        if !quiet {
            println!(
                "round {:>3}/{}: accuracy {:.4}  loss {:.4}  ({} ms)",
                m.round, cfg.rounds, m.test_accuracy, m.test_loss, m.wall_ms
            );
        }
        rounds.push(m);
    }

    write_metrics(&rounds, &out.join("metrics.csv"))?;
    let summary = ExperimentSummary::new(serde_json::to_value(cfg)?, rounds.clone())?;
    write_summary(&summary, &out.join("summary.json"))?;
    if !quiet {
        println!(
            "done in {:.1}s -> {}",
            started.elapsed().as_secs_f64(),
            out.display()
        );
    }
    Ok(rounds)
}

/// Run a strategies × alphas grid, one subdirectory per cell. Cells are
/// independent: a failing cell is reported and the rest still run.
pub fn run_grid(
    base: &ExperimentConfig,
    strategies: &[String],
    alphas: &[f64],
    quiet: bool,
) -> Result<usize> {
    let (train, test) = load_dataset(base)?;
    let root = base.output_dir.clone();
    let mut failures = 0usize;
    for strategy in strategies {
        for &alpha in alphas {
            let mut cell = base.clone();
            cell.strategy = strategy.clone();
            cell.alpha = alpha;
            cell.output_dir = root.join(format!("{}_{strategy}_alpha{alpha}", base.dataset));
            let label = cell
                .output_dir
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            println!("=== cell {label} ===");
            match cell
                .validate()
                .map_err(anyhow::Error::from)
                .and_then(|()| execute(&cell, &train, &test, quiet))
            {
                Ok(_) => {}
                Err(e) => {
                    failures += 1;
                    eprintln!("cell {label} failed: {e:#}");
                }
            }
        }
    }
    Ok(failures)
}

