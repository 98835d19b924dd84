//! The three fixed ablation sweeps and their concurrent runner.

use std::path::Path;
use std::sync::Mutex;

use anyhow::{anyhow, bail};
use clap::ValueEnum;

use dqroute_core::config::RunConfig;
use dqroute_core::losses::OodLossKind;
use dqroute_core::trainer;

use crate::logging;
use crate::summary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Plan {
    /// Sweep the difficulty/quantity blend from pure quantity to pure
    /// difficulty.
    Ratio,
    /// Toggle the two mechanisms: baseline, ood_only, difficulty_only, full.
    Modules,
    /// Swap the OOD head loss across its four variants.
    #[value(name = "ood_loss")]
    OodLoss,
}

/// Fully resolved configs for every cell of a plan, derived from the base
/// config by overriding only the swept fields.
pub fn plan_cells(plan: Plan, base: &RunConfig) -> Vec<(String, RunConfig)> {
    match plan {
        Plan::Ratio => [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&alpha| {
                let mut cfg = base.clone();
                cfg.enable_difficulty = true;
                cfg.enable_moe = true;
                cfg.difficulty.alpha = alpha;
                (format!("alpha-{alpha:.2}"), cfg)
            })
            .collect(),
        Plan::Modules => {
            let flags = [
                ("baseline", false, false),
                ("ood_only", false, true),
                ("difficulty_only", true, false),
                ("full", true, true),
            ];
            flags
                .iter()
                .map(|&(name, difficulty, moe)| {
                    let mut cfg = base.clone();
                    cfg.enable_difficulty = difficulty;
                    cfg.enable_moe = moe;
                    (name.to_string(), cfg)
                })
                .collect()
        }
        Plan::OodLoss => OodLossKind::ALL
            .iter()
            .map(|&kind| {
                let mut cfg = base.clone();
                cfg.enable_difficulty = true;
                cfg.enable_moe = true;
                cfg.losses.ood_loss = kind;
                (kind.name().to_string(), cfg)
            })
            .collect(),
    }
}

/// Run every (cell, seed) combination, up to `jobs` in parallel, then write
/// `summary.csv`. Any failed or incomplete run makes the whole sweep fail
/// after the remaining runs finish.
pub fn run_plan(
    plan: Plan,
    base: &RunConfig,
    seeds: &[u64],
    jobs: usize,
    out_dir: &Path,
) -> anyhow::Result<()> {
    if seeds.is_empty() {
        bail!("at least one seed is required");
    }
    let cells = plan_cells(plan, base);
    std::fs::create_dir_all(out_dir)?;

    let mut runs: Vec<(String, RunConfig)> = Vec::new();
    for (cell, cfg) in &cells {
        for &seed in seeds {
            let mut cfg = cfg.clone();
            cfg.dataset.seed = seed;
            runs.push((summary::run_dir_name(cell, seed), cfg));
        }
    }

    let next = Mutex::new(0usize);
    let failures: Mutex<Vec<String>> = Mutex::new(Vec::new());
    let jobs = jobs.max(1).min(runs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let idx = {
                    let mut guard = next.lock().unwrap();
                    let idx = *guard;
                    *guard += 1;
                    idx
                };
                if idx >= runs.len() {
                    break;
                }
                let (name, cfg) = &runs[idx];
                let dir = out_dir.join(name);
                logging::debug(format!("running {name}"));
                match trainer::train(cfg, Some(&dir)) {
                    Ok(outcome) => {
                        let last = outcome.final_report();
                        logging::info(format!(
                            "{name}: acc_all={:.4} acc_few={:.4}",
                            last.acc_all, last.acc_few
                        ));
                    }
                    Err(e) => failures.lock().unwrap().push(format!("{name}: {e}")),
                }
            });
        }
    });

    let failures = failures.into_inner().unwrap();
    for f in &failures {
        eprintln!("run failed: {f}");
    }

    let cell_names: Vec<String> = cells.iter().map(|(n, _)| n.clone()).collect();
    let (rows, missing) = summary::summarize(out_dir, &cell_names, seeds);
    for m in &missing {
        eprintln!("missing metrics: {m}");
    }
    if rows.is_empty() {
        bail!("no completed runs to summarize");
    }
    summary::write_summary(&out_dir.join("summary.csv"), &rows)?;
    logging::info(format!(
        "summary written to {}",
        out_dir.join("summary.csv").display()
    ));
    if !failures.is_empty() || !missing.is_empty() {
        return Err(anyhow!(
            "{} run(s) failed, {} missing",
            failures.len(),
            missing.len()
        ));
    }
    Ok(())
}
