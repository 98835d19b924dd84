//! Aggregation of finished runs into `summary.csv`.

use std::path::Path;

use anyhow::{anyhow, Context};

pub const SUMMARY_HEADER: &str = "cell,seeds,acc_all_mean,acc_all_std,acc_many_mean,\
acc_many_std,acc_med_mean,acc_med_std,acc_few_mean,acc_few_std";

/// Per-cell aggregate of final-epoch accuracies over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub cell: String,
    pub seeds: usize,
    /// mean of [acc_all, acc_many, acc_med, acc_few]
    pub mean: [f64; 4],
    /// population standard deviation of the same columns
    pub std: [f64; 4],
}

impl CellSummary {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.cell,
            self.seeds,
            self.mean[0],
            self.std[0],
            self.mean[1],
            self.std[1],
            self.mean[2],
            self.std[2],
            self.mean[3],
            self.std[3]
        )
    }
}

pub fn run_dir_name(cell: &str, seed: u64) -> String {
    format!("{cell}_s{seed}")
}

/// Final-epoch `[acc_all, acc_many, acc_med, acc_few]` from a run directory.
pub fn final_accuracies(run_dir: &Path) -> anyhow::Result<[f64; 4]> {
    let path = run_dir.join("metrics.csv");
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let last = text
        .lines()
        .rfind(|l| !l.trim().is_empty())
        .ok_or_else(|| anyhow!("{}: empty metrics file", path.display()))?;
    let fields: Vec<&str> = last.split(',').collect();
    if fields.len() != 8 || fields[0] == "epoch" {
        return Err(anyhow!("{}: no metric rows", path.display()));
    }
    let mut out = [0.0; 4];
    for (i, field) in fields[4..8].iter().enumerate() {
        out[i] = field
            .parse()
            .with_context(|| format!("{}: bad accuracy field {field:?}", path.display()))?;
    }
    Ok(out)
}

/// Aggregate every (cell, seed) run under `out_dir`. Returns the summary
/// rows plus the list of missing/incomplete run directories; cells with any
/// missing run are skipped.
pub fn summarize(
    out_dir: &Path,
    cells: &[String],
    seeds: &[u64],
) -> (Vec<CellSummary>, Vec<String>) {
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for cell in cells {
        let mut finals = Vec::new();
        let mut cell_ok = true;
        for &seed in seeds {
            let dir = out_dir.join(run_dir_name(cell, seed));
            match final_accuracies(&dir) {
                Ok(acc) => finals.push(acc),
                Err(e) => {
                    missing.push(format!("{}: {e}", dir.display()));
                    cell_ok = false;
                }
            }
        }
        if !cell_ok || finals.is_empty() {
            continue;
        }
        let n = finals.len() as f64;
        let mut mean = [0.0; 4];
        let mut std = [0.0; 4];
        for col in 0..4 {
            let m: f64 = finals.iter().map(|f| f[col]).sum::<f64>() / n;
            let var: f64 = finals.iter().map(|f| (f[col] - m).powi(2)).sum::<f64>() / n;
            mean[col] = m;
            std[col] = var.sqrt();
        }
        rows.push(CellSummary {
            cell: cell.clone(),
            seeds: finals.len(),
            mean,
            std,
        });
    }
    (rows, missing)
}

pub fn write_summary(path: &Path, rows: &[CellSummary]) -> anyhow::Result<()> {
    let mut text = String::from(SUMMARY_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.csv_row());
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plant_metrics(dir: &Path, accs: [f64; 4]) {
        std::fs::create_dir_all(dir).unwrap();
        let text = format!(
            "epoch,loss_cls,loss_ood,loss_total,acc_all,acc_many,acc_med,acc_few\n\
             0,1.0,1.0,2.0,0.1,0.1,0.1,0.1\n\
             1,0.5,0.5,1.0,{},{},{},{}\n",
            accs[0], accs[1], accs[2], accs[3]
        );
        std::fs::write(dir.join("metrics.csv"), text).unwrap();
    }

    #[test]
    fn single_seed_summary_equals_final_row_with_zero_std() {
        let tmp = tempfile::tempdir().unwrap();
        plant_metrics(&tmp.path().join("full_s1"), [0.8, 0.9, 0.7, 0.5]);
        let (rows, missing) = summarize(tmp.path(), &["full".to_string()], &[1]);
        assert!(missing.is_empty());
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].mean, [0.8, 0.9, 0.7, 0.5]);
        assert_eq!(rows[0].std, [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn three_seed_mean_and_std_match_hand_arithmetic() {
        let tmp = tempfile::tempdir().unwrap();
        plant_metrics(&tmp.path().join("full_s1"), [0.6, 0.0, 0.0, 0.0]);
        plant_metrics(&tmp.path().join("full_s2"), [0.7, 0.0, 0.0, 0.0]);
        plant_metrics(&tmp.path().join("full_s3"), [0.8, 0.0, 0.0, 0.0]);
        let (rows, missing) = summarize(tmp.path(), &["full".to_string()], &[1, 2, 3]);
        assert!(missing.is_empty());
        let row = &rows[0];
        assert!((row.mean[0] - 0.7).abs() < 1e-12);
        // population std of {0.6, 0.7, 0.8} = sqrt(2/300)
        let expected = (0.02f64 / 3.0).sqrt();
        assert!((row.std[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn missing_run_skips_cell_and_reports_it() {
        let tmp = tempfile::tempdir().unwrap();
        plant_metrics(&tmp.path().join("a_s1"), [0.5; 4]);
        plant_metrics(&tmp.path().join("b_s1"), [0.5; 4]);
        // b_s2 never created
        let (rows, missing) = summarize(tmp.path(), &["a".to_string(), "b".to_string()], &[1, 2]);
        assert_eq!(missing.len(), 2, "{missing:?}");
        assert!(rows.is_empty(), "both cells have a missing seed");
    }

    #[test]
    fn empty_cells_produce_no_rows() {
        let tmp = tempfile::tempdir().unwrap();
        let (rows, missing) = summarize(tmp.path(), &[], &[1]);
        assert!(rows.is_empty());
        assert!(missing.is_empty());
    }
}
