use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::train::train;
use super::{RunConfig, Variant};

pub const SUMMARY_FILE: &str = "ablation.csv";
pub const RUNS_FILE: &str = "ablation_runs.csv";

/// Final metrics of one variant and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub dice_cup: f64,
    pub dice_disc: f64,
    pub gamma_cdr: f64,
}

/// Mean and sample standard deviation over seeds for one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub n_seeds: usize,
    pub dice_cup_mean: f64,
    pub dice_cup_sd: f64,
    pub dice_disc_mean: f64,
    pub dice_disc_sd: f64,
    pub gamma_mean: f64,
    pub gamma_sd: f64,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(variant: Variant, runs: &[AblationRun]) -> AblationRow {
    let col = |f: fn(&AblationRun) -> f64| mean_sd(&runs.iter().map(f).collect::<Vec<_>>());
    let (dice_cup_mean, dice_cup_sd) = col(|r| r.dice_cup);
    let (dice_disc_mean, dice_disc_sd) = col(|r| r.dice_disc);
    let (gamma_mean, gamma_sd) = col(|r| r.gamma_cdr);
    AblationRow {
        variant: variant.name().to_string(),
        n_seeds: runs.len(),
        dice_cup_mean,
        dice_cup_sd,
        dice_disc_mean,
        dice_disc_sd,
        gamma_mean,
        gamma_sd,
    }
}

/// Trains every variant for every seed in `base.ablation_seeds` under
/// `base.out_dir/{variant}/seed{seed}` and writes the summary CSV (one row
/// per variant) and the per-run CSV.
pub fn ablate(base: &RunConfig, suite: &[Variant]) -> Result<Vec<AblationRow>> {
    if suite.is_empty() || base.ablation_seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let root = base.out_dir.clone();
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut rows = Vec::new();
    let mut all_runs = Vec::new();
    for &variant in suite {
        let mut runs = Vec::new();
        for &seed in &base.ablation_seeds {
            let mut cfg = base.with_variant(variant);
            cfg.seed = seed;
            cfg.out_dir = root.join(variant.name()).join(format!("seed{seed}"));
            let report = train(&cfg)?.report.expect("uninterrupted run reports");
            log::info!("{} seed {seed}: dice_cup {:.4}", variant.name(), report.dice_cup);
            runs.push(AblationRun {
                variant: variant.name().to_string(),
                seed,
                dice_cup: report.dice_cup,
                dice_disc: report.dice_disc,
                gamma_cdr: report.gamma_cdr,
            });
        }
        rows.push(summarize(variant, &runs));
        all_runs.extend(runs);
    }
    write_csv(&root.join(SUMMARY_FILE), &rows)?;
    write_csv(&root.join(RUNS_FILE), &all_runs)?;
    Ok(rows)
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_sd_matches_hand_values() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_sd(&[0.7]), (0.7, 0.0));
    }
}
