use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm2, pca_fit, pca_transform, Matrix, PcaBasis};

/// What to do to raw features before regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    /// Scale each row to unit Euclidean norm.
    pub unit_normalize: bool,
    /// Reduce to this many principal components (fitted on the data given
    /// to [`preprocess_fit`]).
    pub pca_dim: Option<usize>,
    /// Append a constant-1 column as the last feature.
    pub add_bias: bool,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            unit_normalize: false,
            pca_dim: None,
            add_bias: true,
        }
    }
}

impl PreprocessSpec {
    /// No transformation at all: `s = zᵀβ` exactly as written.
    pub fn raw() -> Self {
        Self {
            unit_normalize: false,
            pca_dim: None,
            add_bias: false,
        }
    }

    pub fn bias_only() -> Self {
        Self::default()
    }
}

/// A fitted, deterministic feature transform: unit-normalise, then PCA,
/// then bias column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub unit_normalize: bool,
    pub pca: Option<PcaBasis>,
    pub add_bias: bool,
    input_dim: usize,
}

/// Transformed features plus the rows whose norm was zero (left unscaled).
#[derive(Debug, Clone, PartialEq)]
pub struct Processed {
    pub matrix: Matrix,
    pub zero_norm_rows: Vec<usize>,
}

pub fn preprocess_fit(features: &Matrix, spec: &PreprocessSpec) -> Result<Preprocessor> {
    if features.rows() == 0 {
        return Err(Error::invalid("cannot fit a preprocessor on zero samples"));
    }
    features.ensure_finite("features")?;
    let d = features.cols();
    let pca = match spec.pca_dim {
        None => None,
        Some(k) => {
            if k == 0 || k >= d {
                return Err(Error::InvalidArgument(format!(
                    "PCA dimension must be in 1..{d} for {d}-dimensional features, got {k}"
                )));
            }
            let base = if spec.unit_normalize {
                normalize_rows(features).0
            } else {
                features.clone()
            };
            Some(pca_fit(&base, k)?)
        }
    };
    Ok(Preprocessor {
        unit_normalize: spec.unit_normalize,
        pca,
        add_bias: spec.add_bias,
        input_dim: d,
    })
}

fn normalize_rows(x: &Matrix) -> (Matrix, Vec<usize>) {
    let mut out = x.clone();
    let mut zero = Vec::new();
    for i in 0..out.rows() {
        let n = norm2(out.row(i));
        if n > 0.0 {
            out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        } else {
            zero.push(i);
        }
    }
    (out, zero)
}

impl Preprocessor {
    /// Identity transform on `dim`-dimensional features, optionally with a
    /// bias column.
    pub fn identity(dim: usize, add_bias: bool) -> Self {
        Self {
            unit_normalize: false,
            pca: None,
            add_bias,
            input_dim: dim,
        }
    }

    pub fn from_parts(
        unit_normalize: bool,
        pca: Option<PcaBasis>,
        add_bias: bool,
        input_dim: usize,
    ) -> Result<Self> {
        if let Some(p) = &pca {
            if p.input_dim() != input_dim {
                return Err(Error::shape(format!(
                    "PCA basis expects {} inputs, preprocessor declares {input_dim}",
                    p.input_dim()
                )));
            }
        }
        Ok(Self {
            unit_normalize,
            pca,
            add_bias,
            input_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.pca
            .as_ref()
            .map_or(self.input_dim, PcaBasis::output_dim)
            + self.add_bias as usize
    }

    pub fn spec(&self) -> PreprocessSpec {
        PreprocessSpec {
            unit_normalize: self.unit_normalize,
            pca_dim: self.pca.as_ref().map(PcaBasis::output_dim),
            add_bias: self.add_bias,
        }
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        self.transform_flagged(x).map(|p| p.matrix)
    }

    pub fn transform_flagged(&self, x: &Matrix) -> Result<Processed> {
        if x.cols() != self.input_dim && !(x.rows() == 0 && x.cols() == 0) {
            return Err(Error::shape(format!(
                "preprocessor expects {} feature columns, got {}",
                self.input_dim,
                x.cols()
            )));
        }
        if x.rows() == 0 {
            return Ok(Processed {
                matrix: Matrix::zeros(0, self.output_dim()),
                zero_norm_rows: Vec::new(),
            });
        }
        x.ensure_finite("features")?;
        let (mut m, zero_norm_rows) = if self.unit_normalize {
            normalize_rows(x)
        } else {
            (x.clone(), Vec::new())
        };
        if let Some(p) = &self.pca {
            m = pca_transform(p, &m)?;
        }
        if self.add_bias {
            m = m.with_constant_column(1.0);
        }
        Ok(Processed {
            matrix: m,
            zero_norm_rows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_norm_row() {
        let x = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let spec = PreprocessSpec {
            unit_normalize: true,
            pca_dim: None,
            add_bias: false,
        };
        let p = preprocess_fit(&x, &spec).unwrap();
        let z = p.transform(&x).unwrap();
        assert!((z[(0, 0)] - 0.6).abs() < 1e-15 && (z[(0, 1)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_row_is_flagged_and_left_alone() {
        let x = Matrix::from_rows(&[[3.0, 4.0], [0.0, 0.0]]).unwrap();
        let spec = PreprocessSpec {
            unit_normalize: true,
            pca_dim: None,
            add_bias: false,
        };
        let p = preprocess_fit(&x, &spec).unwrap();
        let out = p.transform_flagged(&x).unwrap();
        assert_eq!(out.zero_norm_rows, vec![1]);
        assert_eq!(out.matrix.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn bias_column_trails() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 7.0]]).unwrap();
        let p = preprocess_fit(&x, &PreprocessSpec::bias_only()).unwrap();
        let z = p.transform(&x).unwrap();
        assert_eq!(z.cols(), 3);
        assert!(z.column(2).iter().all(|v| *v == 1.0));
        assert_eq!(p.output_dim(), 3);
    }

    #[test]
    fn pca_dim_must_reduce() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 7.0]]).unwrap();
        let spec = PreprocessSpec {
            pca_dim: Some(2),
            ..Default::default()
        };
        assert!(matches!(
            preprocess_fit(&x, &spec),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn wrong_width_is_shape_error() {
        let p = Preprocessor::identity(3, true);
        assert!(matches!(
            p.transform(&Matrix::zeros(2, 2)),
            Err(Error::Shape(_))
        ));
    }
}
