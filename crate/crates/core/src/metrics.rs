//! Detection metrics with in-distribution as the positive class.
//!
//! A sample is accepted as in-distribution when its score is at least the
//! threshold, so every metric here treats "score ≥ t" as a positive call.

use serde::{Deserialize, Serialize};

use crate::datasets::Origin;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScores {
    scores: Vec<f64>,
    origins: Vec<Origin>,
    n_in: usize,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, origins: Vec<Origin>) -> Result<Self> {
        if scores.len() != origins.len() {
            return Err(Error::shape(format!(
                "{} scores but {} labels",
                scores.len(),
                origins.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("scores contain non-finite values"));
        }
        let n_in = origins.iter().filter(|o| **o == Origin::In).count();
        Ok(Self {
            scores,
            origins,
            n_in,
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn origins(&self) -> &[Origin] {
        &self.origins
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.scores.len() - self.n_in
    }

    fn require_both(&self) -> Result<()> {
        if self.n_in == 0 || self.n_out() == 0 {
            return Err(Error::UndefinedMetric(format!(
                "need both classes, got {} in and {} out",
                self.n_in,
                self.n_out()
            )));
        }
        Ok(())
    }

    /// Distinct scores in descending order with `(in, out)` counts at each.
    fn tie_groups(&self) -> Vec<(f64, usize, usize)> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut groups: Vec<(f64, usize, usize)> = Vec::new();
        for i in idx {
            let s = self.scores[i];
            let is_in = self.origins[i] == Origin::In;
            match groups.last_mut() {
                Some(g) if g.0 == s => {
                    if is_in {
                        g.1 += 1
                    } else {
                        g.2 += 1
                    }
                }
                _ => groups.push((s, is_in as usize, (!is_in) as usize)),
            }
        }
        groups
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fpr95: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub n_in: usize,
    pub n_out: usize,
}

/// Probability that a random in-sample outscores a random out-sample,
/// ties counted one half.
pub fn auroc(ls: &LabeledScores) -> Result<f64> {
    ls.require_both()?;
    // Twice the U statistic, kept integral.
    let mut twice_u: u128 = 0;
    let mut out_below = ls.n_out() as u128;
    for (_, n_in, n_out) in ls.tie_groups() {
        out_below -= n_out as u128;
        twice_u += 2 * n_in as u128 * out_below + n_in as u128 * n_out as u128;
    }
    Ok(twice_u as f64 / (2.0 * ls.n_in() as f64 * ls.n_out() as f64))
}

/// False-positive rate at the largest observed in-score threshold whose
/// true-positive rate reaches `tpr_target`. No interpolation.
pub fn fpr_at_tpr(ls: &LabeledScores, tpr_target: f64) -> Result<f64> {
    ls.require_both()?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "TPR target must lie in (0, 1], got {tpr_target}"
        )));
    }
    let threshold = tpr_threshold(ls, tpr_target);
    let false_pos = ls
        .scores
        .iter()
        .zip(&ls.origins)
        .filter(|(s, o)| **o == Origin::Out && **s >= threshold)
        .count();
    Ok(false_pos as f64 / ls.n_out() as f64)
}

/// The threshold used by [`fpr_at_tpr`].
pub fn tpr_threshold(ls: &LabeledScores, tpr_target: f64) -> f64 {
    let n_in = ls.n_in();
    let needed = ((tpr_target * n_in as f64) - 1e-9)
        .ceil()
        .clamp(1.0, n_in as f64) as usize;
    let mut ins: Vec<f64> = ls
        .scores
        .iter()
        .zip(&ls.origins)
        .filter(|(_, o)| **o == Origin::In)
        .map(|(s, _)| *s)
        .collect();
    ins.sort_by(|a, b| b.total_cmp(a));
    ins[needed - 1]
}

/// Non-interpolated area under the precision–recall curve:
/// `Σ_k (R_k − R_{k−1}) · P_k` over descending distinct thresholds.
pub fn aupr(ls: &LabeledScores) -> Result<f64> {
    ls.require_both()?;
    let n_in = ls.n_in() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    for (_, g_in, g_out) in ls.tie_groups() {
        tp += g_in;
        fp += g_out;
        if g_in > 0 {
            let precision = tp as f64 / (tp + fp) as f64;
            area += (g_in as f64 / n_in) * precision;
        }
    }
    Ok(area)
}

/// `(fpr, tpr, threshold)` at each distinct score, descending thresholds.
pub fn roc_points(ls: &LabeledScores) -> Result<Vec<(f64, f64, f64)>> {
    ls.require_both()?;
    let (n_in, n_out) = (ls.n_in() as f64, ls.n_out() as f64);
    let (mut tp, mut fp) = (0usize, 0usize);
    Ok(ls
        .tie_groups()
        .into_iter()
        .map(|(s, g_in, g_out)| {
            tp += g_in;
            fp += g_out;
            (fp as f64 / n_out, tp as f64 / n_in, s)
        })
        .collect())
}

pub fn evaluate(ls: &LabeledScores) -> Result<EvalReport> {
    Ok(EvalReport {
        fpr95: fpr_at_tpr(ls, 0.95)?,
        auroc: auroc(ls)?,
        aupr: aupr(ls)?,
        n_in: ls.n_in(),
        n_out: ls.n_out(),
    })
}

/// Fraction of samples classified correctly by the best single threshold.
pub fn best_threshold_accuracy(ls: &LabeledScores) -> Result<f64> {
    ls.require_both()?;
    let n = ls.scores.len() as f64;
    // Threshold above every score: everything called out.
    let mut correct = ls.n_out();
    let mut best = correct;
    for (_, g_in, g_out) in ls.tie_groups() {
        correct = correct + g_in - g_out;
        best = best.max(correct);
    }
    Ok(best as f64 / n)
}
