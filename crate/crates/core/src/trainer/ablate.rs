use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{load_dataset, DatasetSplit};
use crate::error::Result;
use crate::metrics::ClassReport;

use super::config::TrainConfig;
use super::run::{prepare_split, run_on_split};

/// The five rows of the mechanism ablation: baseline, each mechanism alone,
/// and all three.
pub const DEFAULT_GRID: [&str; 5] = ["mod", "hm", "pc", "sn", "full"];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub report: ClassReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub variant: String,
    pub runs: usize,
    pub mean_dice: f64,
    pub std_dice: f64,
    pub mean_hd95: Option<f64>,
    pub std_hd95: Option<f64>,
    /// Mean per-subclass dice, foreground subclasses in order.
    pub class_dice: Vec<f64>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Train every `(variant, seed)` pair on `split`. Run directories are
/// `<base.out_dir>/<variant>_s<seed>`. Each run is seeded only by its own
/// configuration, so `parallel` does not change the results.
pub fn run_grid(
    base: &TrainConfig,
    split: &DatasetSplit,
    variants: &[String],
    seeds: &[u64],
    parallel: bool,
) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(String, u64)> = variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v.clone(), s)))
        .collect();
    let run = |(variant, seed): &(String, u64)| -> Result<AblationRow> {
        let mut cfg = base.clone();
        cfg.apply_variant(variant)?;
        cfg.seed = *seed;
        cfg.out_dir = base.out_dir.join(format!("{}_s{seed}", cfg.variant_name()));
        cfg.validate()?;
        let prepared = prepare_split(split.clone(), &cfg)?;
        let out = run_on_split(&cfg, &prepared, &mut |_, _| {})?;
        Ok(AblationRow {
            variant: cfg.variant_name(),
            seed: *seed,
            report: out.test,
        })
    };
    if parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    }
}

/// Load `base.data` and run the grid; see [`run_grid`].
pub fn run_ablation(base: &TrainConfig, variants: &[String], seeds: &[u64], parallel: bool) -> Result<Vec<AblationRow>> {
    let (split, _) = load_dataset(&base.data, false)?;
    run_grid(base, &split, variants, seeds, parallel)
}

/// One summary per variant, in order of first appearance.
pub fn summarize(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    order
        .into_iter()
        .map(|variant| {
            let group: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == variant).collect();
            let dice: Vec<f64> = group.iter().map(|r| r.report.mean_dice).collect();
            let hd: Vec<f64> = group.iter().filter_map(|r| r.report.mean_hd95).collect();
            let (mean_dice, std_dice) = mean_std(&dice);
            let (mean_hd95, std_hd95) = if hd.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&hd);
                (Some(m), Some(s))
            };
            let classes: Vec<usize> = group[0].report.per_class.keys().copied().collect();
            let class_dice = classes
                .iter()
                .map(|c| {
                    let v: Vec<f64> = group.iter().filter_map(|r| r.report.per_class.get(c)).map(|s| s.dice).collect();
                    mean_std(&v).0
                })
                .collect();
            AblationSummary {
                variant: variant.to_string(),
                runs: group.len(),
                mean_dice,
                std_dice,
                mean_hd95,
                std_hd95,
                class_dice,
            }
        })
        .collect()
}

/// `config,seed,mean_dice,mean_dice_std,mean_hd95,mean_hd95_std,dice_1..`:
/// one row per run, then one `seed = all` aggregate row per variant.
pub fn ablation_csv(rows: &[AblationRow], summaries: &[AblationSummary]) -> String {
    let k = rows.first().map_or(0, |r| r.report.per_class.len());
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.6}"));
    let mut s = String::from("config,seed,mean_dice,mean_dice_std,mean_hd95,mean_hd95_std");
    for c in 1..=k {
        let _ = write!(s, ",dice_{c}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{:.6},,{},", r.variant, r.seed, r.report.mean_dice, opt(r.report.mean_hd95));
        for sc in r.report.per_class.values() {
            let _ = write!(s, ",{:.6}", sc.dice);
        }
        s.push('\n');
    }
    for a in summaries {
        let _ = write!(
            s,
            "{},all,{:.6},{:.6},{},{}",
            a.variant,
            a.mean_dice,
            a.std_dice,
            opt(a.mean_hd95),
            opt(a.std_hd95)
        );
        for d in &a.class_dice {
            let _ = write!(s, ",{d:.6}");
        }
        s.push('\n');
    }
    s
}
