use serde::{Deserialize, Serialize};

use super::{load_plan_data, run_loaded, ExperimentPlan, RunResult};
use crate::error::{Error, Result};

/// Rates `lo%, lo+step%, …, hi%` as fractions, built from integer percents
/// so both endpoints appear exactly once.
pub fn rate_grid(lo_pct: u32, hi_pct: u32, step_pct: u32) -> Result<Vec<f64>> {
    if step_pct == 0 || lo_pct == 0 || hi_pct >= 100 || lo_pct > hi_pct {
        return Err(Error::InvalidArgument(format!(
            "rate grid needs 0 < lo <= hi < 100 and step > 0, got {lo_pct}..{hi_pct} by {step_pct}"
        )));
    }
    Ok((lo_pct..=hi_pct)
        .step_by(step_pct as usize)
        .map(|p| f64::from(p) / 100.0)
        .collect())
}

/// How many repeats to run at sample count `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepeatRule {
    /// Repeats are `⌈budget / m⌉`.
    pub budget: f64,
    pub cap: usize,
}

impl Default for RepeatRule {
    fn default() -> Self {
        Self {
            budget: 1e5,
            cap: 10_000,
        }
    }
}

impl RepeatRule {
    pub fn repeats(&self, m: usize) -> usize {
        ((self.budget / m.max(1) as f64).ceil() as usize).clamp(1, self.cap.max(1))
    }
}

/// One point of a sweep: the swept value and the run it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub result: RunResult,
}

/// Reruns `base` at each in-distribution rate, loading the data once.
pub fn sweep_in_rate(base: &ExperimentPlan, rates: &[f64]) -> Result<Vec<SweepPoint>> {
    base.validate()?;
    let data = load_plan_data(base)?;
    rates
        .iter()
        .map(|&rate| {
            let plan = ExperimentPlan {
                in_rate: rate,
                ..base.clone()
            };
            Ok(SweepPoint {
                value: rate,
                result: run_loaded(&plan, &data)?,
            })
        })
        .collect()
}

/// Reruns `base` with `total = m` for each count, with repeats from `rule`.
/// Cells in the exact-fit regime carry `exact_fit = true`.
pub fn sweep_sample_count(
    base: &ExperimentPlan,
    counts: &[usize],
    rule: &RepeatRule,
) -> Result<Vec<SweepPoint>> {
    if let Some(bad) = counts.iter().find(|&&m| m == 0) {
        return Err(Error::InvalidArgument(format!(
            "sample counts must be positive, got {bad}"
        )));
    }
    base.validate()?;
    let data = load_plan_data(base)?;
    counts
        .iter()
        .map(|&m| {
            let plan = ExperimentPlan {
                total: m,
                repeats: rule.repeats(m),
                ..base.clone()
            };
            Ok(SweepPoint {
                value: m as f64,
                result: run_loaded(&plan, &data)?,
            })
        })
        .collect()
}

/// Plot data: one row per (swept value, aggregate key).
pub fn sweep_csv(param: &str, points: &[SweepPoint]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut write = || -> csv::Result<()> {
        w.write_record([
            param,
            "in_dataset",
            "ood_dataset",
            "scorer",
            "method",
            "repeats",
            "exact_fit",
            "fpr95_mean",
            "fpr95_std",
            "auroc_mean",
            "auroc_std",
            "aupr_mean",
            "aupr_std",
        ])?;
        for p in points {
            for a in &p.result.aggregates {
                w.write_record([
                    p.value.to_string(),
                    a.key.in_dataset.clone(),
                    a.key.ood_dataset.clone(),
                    a.key.scorer.clone(),
                    a.key.method.clone(),
                    a.repeats.to_string(),
                    a.exact_fit.to_string(),
                    a.fpr95.mean.to_string(),
                    a.fpr95.stdev.to_string(),
                    a.auroc.mean.to_string(),
                    a.auroc.stdev.to_string(),
                    a.aupr.mean.to_string(),
                    a.aupr.stdev.to_string(),
                ])?;
            }
        }
        Ok(())
    };
    write().expect("writing to memory");
    String::from_utf8(w.into_inner().expect("flushing to memory")).expect("csv output is UTF-8")
}
