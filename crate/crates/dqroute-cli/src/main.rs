//! `dqroute` — train, sweep, and evaluate long-tailed classifiers that
//! combine difficulty-aware class reweighting with OOD-routed experts.

mod ablate;
mod logging;
mod summary;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use dqroute_core::config::RunConfig;
use dqroute_core::datagen;
use dqroute_core::moe::Checkpoint;
use dqroute_core::trainer;

#[derive(Parser)]
#[command(
    name = "dqroute",
    version,
    about = "Difficulty-aware reweighting with OOD-confidence expert routing \
             on synthetic long-tailed data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model from a config file into a run directory.
    Train {
        /// JSON run config; omitted fields take their defaults.
        #[arg(long)]
        config: PathBuf,
        /// Run directory for config.json, metrics.csv, class_stats.csv,
        /// model.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one of the fixed sweeps and aggregate a summary.csv.
    Ablate {
        #[arg(long, value_enum)]
        plan: ablate::Plan,
        /// Base config; defaults to the built-in full configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seeds, one run per (cell, seed).
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved checkpoint on a CSV dataset.
    Eval {
        /// model.json from a run directory.
        #[arg(long)]
        model: PathBuf,
        /// CSV dataset (label,f0,...).
        #[arg(long)]
        data: PathBuf,
        /// config.json describing the class profile and thresholds.
        #[arg(long)]
        spec: PathBuf,
    },
    /// Write a synthetic long-tailed training split as CSV.
    GenData {
        #[arg(long = "C")]
        num_classes: usize,
        #[arg(long = "IR")]
        imbalance_ratio: f64,
        #[arg(long = "Nmax")]
        max_count: usize,
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn cmd_train(config_path: &Path, out: &Path) -> anyhow::Result<()> {
    let config = RunConfig::load(config_path)
        .with_context(|| format!("loading config {}", config_path.display()))?;
    config.validate()?;
    let outcome = trainer::train_with_observer(&config, Some(out), |report| {
        logging::debug(format!(
            "epoch {}: loss_total={:.6} acc_all={:.4} acc_few={:.4}",
            report.epoch, report.loss_total, report.acc_all, report.acc_few
        ));
    })?;
    for w in &outcome.warnings {
        logging::info(format!("warning: {w}"));
    }
    let last = outcome.final_report();
    logging::info(format!(
        "finished {} epochs: acc_all={:.4} many={:.4} med={:.4} few={:.4} -> {}",
        outcome.reports.len(),
        last.acc_all,
        last.acc_many,
        last.acc_med,
        last.acc_few,
        out.display()
    ));
    Ok(())
}

fn cmd_eval(model: &Path, data: &Path, spec_path: &Path) -> anyhow::Result<()> {
    let checkpoint = Checkpoint::load(model)
        .with_context(|| format!("loading checkpoint {}", model.display()))?;
    let spec_config = RunConfig::load(spec_path)
        .with_context(|| format!("loading config {}", spec_path.display()))?;
    spec_config.validate()?;
    let m = &checkpoint.config.dataset;
    let s = &spec_config.dataset;
    if m.num_classes != s.num_classes || m.feature_dim != s.feature_dim {
        bail!(
            "checkpoint was trained for C={} d={}, but --spec describes C={} d={}",
            m.num_classes,
            m.feature_dim,
            s.num_classes,
            s.feature_dim
        );
    }
    let bank = checkpoint.to_bank()?;
    let dataset = datagen::load_csv(data, Some(s.num_classes))?;
    if dataset.feature_dim != s.feature_dim {
        bail!(
            "dataset has {} features, config expects {}",
            dataset.feature_dim,
            s.feature_dim
        );
    }
    let lt_spec = spec_config.long_tail_spec()?;
    let split = lt_spec.shot_split();
    let eval = trainer::evaluate(
        &bank,
        &dataset,
        &split,
        spec_config.enable_moe,
        spec_config.optimizer.batch_size,
    )?;
    println!(
        "acc_all={} acc_many={} acc_med={} acc_few={} samples={}",
        eval.acc_all,
        eval.acc_many,
        eval.acc_med,
        eval.acc_few,
        dataset.len()
    );
    Ok(())
}

fn cmd_gen_data(
    num_classes: usize,
    imbalance_ratio: f64,
    max_count: usize,
    d: usize,
    seed: u64,
    out: &Path,
) -> anyhow::Result<()> {
    let mut config = RunConfig::default();
    config.dataset.num_classes = num_classes;
    config.dataset.imbalance_ratio = imbalance_ratio;
    config.dataset.max_count = max_count;
    config.dataset.feature_dim = d;
    config.dataset.seed = seed;
    config.dataset.hard_classes.retain(|&c| c < num_classes);
    config.validate()?;
    let spec = config.long_tail_spec()?;
    let (train, _, _) = datagen::generate(&spec, &config.gen_options())?;
    datagen::write_csv(&train, out)?;
    logging::info(format!(
        "wrote {} samples across {} classes to {}",
        train.len(),
        num_classes,
        out.display()
    ));
    Ok(())
}

fn real_main() -> anyhow::Result<()> {
    logging::init_from_env()?;
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Train { config, out } => cmd_train(config, out),
        Cmd::Ablate {
            plan,
            config,
            seeds,
            jobs,
            out,
        } => {
            let base = match config {
                Some(path) => {
                    let cfg = RunConfig::load(path)
                        .with_context(|| format!("loading config {}", path.display()))?;
                    cfg.validate()?;
                    cfg
                }
                None => RunConfig::full(),
            };
            ablate::run_plan(*plan, &base, seeds, *jobs, out)
        }
        Cmd::Eval { model, data, spec } => cmd_eval(model, data, spec),
        Cmd::GenData {
            num_classes,
            imbalance_ratio,
            max_count,
            d,
            seed,
            out,
        } => cmd_gen_data(*num_classes, *imbalance_ratio, *max_count, *d, *seed, out),
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
