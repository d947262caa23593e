use crate::error::{Error, Result};

use super::Matrix;

/// Eigendecomposition of a real symmetric matrix, eigenvalues sorted in
/// descending order.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    /// Column `j` is the unit eigenvector for `values[j]`.
    pub vectors: Matrix,
}

impl SymmetricEigen {
    /// Decomposes `a`. Only the symmetric part `(a + aᵀ)/2` is used.
    pub fn new(a: &Matrix) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::shape(format!(
                "eigendecomposition needs a square matrix, got {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        a.ensure_finite("symmetric matrix")?;
        let n = a.rows();
        if n == 0 {
            return Ok(Self {
                values: Vec::new(),
                vectors: Matrix::zeros(0, 0),
            });
        }
        let sym = nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
        let eig = sym.symmetric_eigen();

        let mut order: Vec<usize> = (0..n).collect();
        // Stable sort keeps the decomposition deterministic under ties.
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

        let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let vectors = Matrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
        Ok(Self { values, vectors })
    }

    pub fn max_value(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }
}
