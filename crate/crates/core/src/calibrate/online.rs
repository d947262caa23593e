use serde::{Deserialize, Serialize};

use super::dlr::{check_scores, FitDiagnostics, RegressionModel};
use super::preprocess::Preprocessor;
use crate::error::{Error, Result};
use crate::linalg::{default_rtol, Matrix, PsdPseudoInverse};

/// Running sufficient statistics `A = Σ ZᵀZ`, `b = Σ ZᵀŜ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineState {
    pub a: Matrix,
    pub b: Vec<f64>,
    pub samples_seen: usize,
}

pub fn online_init(dim: usize) -> Result<OnlineState> {
    if dim == 0 {
        return Err(Error::InvalidArgument(
            "online state dimension must be positive".into(),
        ));
    }
    Ok(OnlineState {
        a: Matrix::zeros(dim, dim),
        b: vec![0.0; dim],
        samples_seen: 0,
    })
}

/// Folds one batch of preprocessed features into `state` and returns the
/// batch's calibrated scores under the updated `β`.
pub fn online_update(state: &mut OnlineState, z: &Matrix, scores: &[f64]) -> Result<Vec<f64>> {
    state.update(z, scores)
}

impl OnlineState {
    pub fn from_parts(a: Matrix, b: Vec<f64>, samples_seen: usize) -> Result<Self> {
        let d = b.len();
        if d == 0 || a.shape() != (d, d) {
            return Err(Error::shape(format!(
                "online state needs a {d}x{d} matrix, got {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        if !a.is_finite() || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("online state contains non-finite values"));
        }
        Ok(Self { a, b, samples_seen })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// `β = A⁺b`; zero before any data has been seen.
    pub fn beta(&self) -> Result<Vec<f64>> {
        if self.samples_seen == 0 {
            return Ok(vec![0.0; self.dim()]);
        }
        self.pinv()?.apply(&self.b)
    }

    /// `A⁺`, whose rank cannot exceed the number of samples folded in.
    fn pinv(&self) -> Result<PsdPseudoInverse> {
        let rtol = default_rtol(self.samples_seen, self.dim());
        Ok(PsdPseudoInverse::new(&self.a, rtol)?.cap_rank(self.samples_seen))
    }

    pub fn rank(&self) -> Result<usize> {
        if self.samples_seen == 0 {
            return Ok(0);
        }
        Ok(self.pinv()?.rank())
    }

    pub fn update(&mut self, z: &Matrix, scores: &[f64]) -> Result<Vec<f64>> {
        check_scores(z.rows(), scores)?;
        if z.rows() == 0 {
            return Ok(Vec::new());
        }
        if z.cols() != self.dim() {
            return Err(Error::shape(format!(
                "online state has dimension {}, batch has {} columns",
                self.dim(),
                z.cols()
            )));
        }
        z.ensure_finite("batch features")?;
        let gram = z.gram();
        let zs = z.t_matvec(scores)?;
        self.a.add_assign(&gram)?;
        for (bi, v) in self.b.iter_mut().zip(&zs) {
            *bi += v;
        }
        self.samples_seen += z.rows();
        let beta = self.beta()?;
        z.matvec(&beta)
    }
}

/// Online calibration on raw features through a fixed preprocessor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineCalibrator {
    pub preprocessor: Preprocessor,
    pub state: OnlineState,
}

impl OnlineCalibrator {
    pub fn new(preprocessor: Preprocessor) -> Result<Self> {
        let state = online_init(preprocessor.output_dim())?;
        Ok(Self {
            preprocessor,
            state,
        })
    }

    pub fn update(&mut self, features: &Matrix, scores: &[f64]) -> Result<Vec<f64>> {
        let z = self.preprocessor.transform(features)?;
        self.state.update(&z, scores)
    }

    /// Freezes the current state into a regression model.
    pub fn to_model(&self) -> Result<RegressionModel> {
        Ok(RegressionModel {
            beta: self.state.beta()?,
            preprocessor: self.preprocessor.clone(),
            diagnostics: FitDiagnostics {
                n_samples: self.state.samples_seen,
                residual_norm: None,
                gram_rank: self.state.rank()?,
                identical_rows: false,
                zero_norm_rows: Vec::new(),
            },
        })
    }
}
