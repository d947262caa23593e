use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Matrix, SymmetricEigen};

/// Principal axes of a data matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `k x d`, orthonormal rows.
    pub components: Matrix,
    /// Nonincreasing, nonnegative.
    pub explained_variance: Vec<f64>,
    /// Total variance of the fitted data (trace of the covariance).
    pub total_variance: f64,
}

impl PcaBasis {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.rows()
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        if self.total_variance <= 0.0 {
            return vec![0.0; self.explained_variance.len()];
        }
        self.explained_variance
            .iter()
            .map(|v| v / self.total_variance)
            .collect()
    }

    /// Maps projected coordinates back to the input space.
    pub fn inverse_transform(&self, y: &Matrix) -> Result<Matrix> {
        if y.cols() != self.output_dim() {
            return Err(Error::shape(format!(
                "expected {} PCA coordinates, got {}",
                self.output_dim(),
                y.cols()
            )));
        }
        let mut x = y.matmul(&self.components)?;
        for i in 0..x.rows() {
            for (v, m) in x.row_mut(i).iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        Ok(x)
    }
}

/// Fits `k` principal components from the sample covariance of `x`.
///
/// Each component is flipped so that its largest-magnitude entry is
/// positive.
pub fn pca_fit(x: &Matrix, k: usize) -> Result<PcaBasis> {
    let (n, d) = x.shape();
    if k == 0 || k > n.min(d) {
        return Err(Error::InvalidArgument(format!(
            "PCA dimension {k} out of range 1..={} for {n}x{d} data",
            n.min(d)
        )));
    }
    x.ensure_finite("PCA input")?;

    let mut mean = vec![0.0; d];
    for r in x.row_iter() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = Matrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let denom = (n.max(2) - 1) as f64;
    let cov = centered.gram().scale(1.0 / denom);
    let total_variance = (0..d).map(|i| cov[(i, i)]).sum();

    let eig = SymmetricEigen::new(&cov)?;
    let mut components = Matrix::zeros(k, d);
    for c in 0..k {
        let mut v = eig.vectors.column(c);
        let pivot = v
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, x)| {
                if x.abs() > bv {
                    (i, x.abs())
                } else {
                    (bi, bv)
                }
            })
            .0;
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.row_mut(c).copy_from_slice(&v);
    }
    let explained_variance = eig.values[..k].iter().map(|v| v.max(0.0)).collect();

    Ok(PcaBasis {
        mean,
        components,
        explained_variance,
        total_variance,
    })
}

/// `(x − mean) · componentsᵀ`.
pub fn pca_transform(basis: &PcaBasis, x: &Matrix) -> Result<Matrix> {
    if x.cols() != basis.input_dim() {
        return Err(Error::shape(format!(
            "PCA basis expects {} input columns, got {}",
            basis.input_dim(),
            x.cols()
        )));
    }
    let k = basis.output_dim();
    let mut out = Matrix::zeros(x.rows(), k);
    let mut centered = vec![0.0; basis.input_dim()];
    for i in 0..x.rows() {
        for ((c, v), m) in centered.iter_mut().zip(x.row(i)).zip(&basis.mean) {
            *c = v - m;
        }
        for j in 0..k {
            out[(i, j)] = super::matrix::dot(&centered, basis.components.row(j));
        }
    }
    Ok(out)
}
