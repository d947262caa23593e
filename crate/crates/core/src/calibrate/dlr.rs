use serde::{Deserialize, Serialize};

use super::preprocess::{preprocess_fit, PreprocessSpec, Preprocessor};
use crate::error::{Error, Result};
use crate::linalg::{least_squares_full, norm2, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub n_samples: usize,
    /// `‖Zβ̂ − Ŝ‖₂` on the rows used for fitting; not tracked online.
    pub residual_norm: Option<f64>,
    /// Numerical rank of the Gram matrix.
    pub gram_rank: usize,
    /// All fitted rows are identical; β̂ is the minimum-norm solution.
    pub identical_rows: bool,
    /// Rows left unscaled by unit normalisation because their norm was 0.
    pub zero_norm_rows: Vec<usize>,
}

/// Linear map from (preprocessed) features to rectified scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub beta: Vec<f64>,
    pub preprocessor: Preprocessor,
    pub diagnostics: FitDiagnostics,
}

pub(crate) fn check_scores(rows: usize, scores: &[f64]) -> Result<()> {
    if rows != scores.len() {
        return Err(Error::shape(format!(
            "{rows} feature rows but {} scores",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores contain non-finite values"));
    }
    Ok(())
}

fn rows_identical(z: &Matrix) -> bool {
    z.rows() > 1 && z.row_iter().all(|r| r == z.row(0))
}

/// Fits `β̂ = (ZᵀZ)⁺ZᵀŜ` on already-preprocessed features.
pub fn fit_processed(
    preprocessor: Preprocessor,
    z: &Matrix,
    scores: &[f64],
) -> Result<RegressionModel> {
    check_scores(z.rows(), scores)?;
    if z.rows() == 0 {
        return Err(Error::invalid("cannot fit on zero samples"));
    }
    let ls = least_squares_full(z, scores)?;
    let fitted = z.matvec(&ls.beta)?;
    let resid: Vec<f64> = fitted.iter().zip(scores).map(|(f, s)| f - s).collect();
    Ok(RegressionModel {
        diagnostics: FitDiagnostics {
            n_samples: z.rows(),
            residual_norm: Some(norm2(&resid)),
            gram_rank: ls.rank,
            identical_rows: rows_identical(z),
            zero_norm_rows: Vec::new(),
        },
        beta: ls.beta,
        preprocessor,
    })
}

/// Direct linear regression of base scores on features.
pub fn fit_dlr(
    features: &Matrix,
    scores: &[f64],
    prep: &PreprocessSpec,
) -> Result<RegressionModel> {
    check_scores(features.rows(), scores)?;
    if features.rows() == 0 {
        return Err(Error::invalid("cannot fit on zero samples"));
    }
    let preprocessor = preprocess_fit(features, prep)?;
    let processed = preprocessor.transform_flagged(features)?;
    let mut model = fit_processed(preprocessor, &processed.matrix, scores)?;
    model.diagnostics.zero_norm_rows = processed.zero_norm_rows;
    Ok(model)
}

impl RegressionModel {
    /// Rectified scores `zᵀβ̂` after the model's preprocessing.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<f64>> {
        let z = self.preprocessor.transform(features)?;
        self.predict_processed(&z)
    }

    pub fn predict_processed(&self, z: &Matrix) -> Result<Vec<f64>> {
        if z.rows() == 0 {
            return Ok(Vec::new());
        }
        z.matvec(&self.beta)
    }
}

pub fn predict(model: &RegressionModel, features: &Matrix) -> Result<Vec<f64>> {
    model.predict(features)
}
