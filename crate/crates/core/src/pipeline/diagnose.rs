use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::calibrate::{fit_dlr, PreprocessSpec};
use crate::datasets::Origin;
use crate::error::{Error, Result};
use crate::linalg::{pca_fit, pca_transform, Matrix};
use crate::metrics::{best_threshold_accuracy, LabeledScores};

/// Plot-ready evidence that scores are (close to) linear in features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityDiagnostics {
    /// First two principal coordinates of every sample (one column if the
    /// features are one-dimensional).
    pub coords: Matrix,
    /// Regression of the scores on `coords` plus a bias, bias last.
    pub plane: Vec<f64>,
    /// Scores predicted by a regression on the full features plus bias.
    pub fitted: Vec<f64>,
    pub scores: Vec<f64>,
    pub origins: Vec<Origin>,
    /// `1 − SS_res / SS_tot` of the full-feature fit, clamped to `[0, 1]`.
    /// Constant scores count as perfectly explained.
    pub r_squared: f64,
    /// Accuracy of the best single threshold on `fitted`; absent when only
    /// one class is present.
    pub separability: Option<f64>,
    pub warnings: Vec<String>,
}

pub fn diagnose_linearity(
    features: &Matrix,
    scores: &[f64],
    origins: &[Origin],
) -> Result<LinearityDiagnostics> {
    let n = features.rows();
    if n < 3 {
        return Err(Error::invalid(format!(
            "linearity diagnostics need at least 3 samples, got {n}"
        )));
    }
    if scores.len() != n || origins.len() != n {
        return Err(Error::shape(format!(
            "{n} feature rows, {} scores, {} labels",
            scores.len(),
            origins.len()
        )));
    }
    let k = features.cols().min(2);
    let basis = pca_fit(features, k)?;
    let coords = pca_transform(&basis, features)?;
    let plane = fit_dlr(&coords, scores, &PreprocessSpec::bias_only())?.beta;
    let fitted = fit_dlr(features, scores, &PreprocessSpec::bias_only())?.predict(features)?;

    let mean = scores.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = scores.iter().map(|s| (s - mean).powi(2)).sum();
    let ss_res: f64 = scores
        .iter()
        .zip(&fitted)
        .map(|(s, f)| (s - f).powi(2))
        .sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };

    let mut warnings = Vec::new();
    let separability = match LabeledScores::new(fitted.clone(), origins.to_vec())
        .and_then(|ls| best_threshold_accuracy(&ls))
    {
        Ok(acc) => Some(acc),
        Err(Error::UndefinedMetric(msg)) => {
            warnings.push(format!(
                "degenerate diagnostic, separability omitted: {msg}"
            ));
            None
        }
        Err(e) => return Err(e),
    };
    Ok(LinearityDiagnostics {
        coords,
        plane,
        fitted,
        scores: scores.to_vec(),
        origins: origins.to_vec(),
        r_squared,
        separability,
        warnings,
    })
}

impl LinearityDiagnostics {
    /// One row per sample: principal coordinates, score, fitted score, origin.
    pub fn plot_csv(&self) -> String {
        let mut out = String::new();
        let pcs: Vec<String> = (1..=self.coords.cols()).map(|k| format!("pc{k}")).collect();
        let _ = writeln!(out, "{},score,fitted,origin", pcs.join(","));
        for i in 0..self.scores.len() {
            for v in self.coords.row(i) {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(
                out,
                "{},{},{}",
                self.scores[i], self.fitted[i], self.origins[i]
            );
        }
        out
    }
}
