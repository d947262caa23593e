//! Moore–Penrose pseudoinverse and minimum-norm least squares.
//!
//! Everything here goes through the symmetric eigendecomposition of a Gram
//! matrix (`MᵀM` or `MMᵀ`, whichever is smaller). Eigenvalues at or below
//! `rtol · λ_max` are treated as zero, with `rtol = max(rows, cols) · ε`
//! measured on the matrix that produced the Gram.

use crate::error::{Error, Result};

use super::matrix::{axpy, dot};
use super::{Matrix, SymmetricEigen};

/// Relative truncation tolerance for a `rows x cols` problem.
pub fn default_rtol(rows: usize, cols: usize) -> f64 {
    rows.max(cols).max(1) as f64 * f64::EPSILON
}

/// Pseudoinverse of a symmetric positive semidefinite matrix, kept in
/// factored form `V Λ⁺ Vᵀ`.
#[derive(Debug, Clone)]
pub struct PsdPseudoInverse {
    eigen: SymmetricEigen,
    rank: usize,
}

impl PsdPseudoInverse {
    pub fn new(a: &Matrix, rtol: f64) -> Result<Self> {
        let eigen = SymmetricEigen::new(a)?;
        let cutoff = rtol * eigen.max_value().max(0.0);
        let rank = eigen
            .values
            .iter()
            .take_while(|&&v| v > cutoff && v > 0.0)
            .count();
        Ok(Self { eigen, rank })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Drops all but the `max_rank` largest eigenpairs, for callers that know
    /// an upper bound on the true rank.
    pub fn cap_rank(mut self, max_rank: usize) -> Self {
        self.rank = self.rank.min(max_rank);
        self
    }

    pub fn dim(&self) -> usize {
        self.eigen.values.len()
    }

    /// Retained eigenvalues, descending.
    pub fn retained_values(&self) -> &[f64] {
        &self.eigen.values[..self.rank]
    }

    /// Retained eigenvector `k` (a column of `V`).
    pub fn retained_vector(&self, k: usize) -> Vec<f64> {
        assert!(k < self.rank);
        self.eigen.vectors.column(k)
    }

    /// `A⁺ b`.
    pub fn apply(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        if b.len() != n {
            return Err(Error::shape(format!(
                "pseudoinverse of dimension {n} applied to vector of length {}",
                b.len()
            )));
        }
        let mut out = vec![0.0; n];
        for k in 0..self.rank {
            let v = self.eigen.vectors.column(k);
            let coef = dot(&v, b) / self.eigen.values[k];
            axpy(coef, &v, &mut out);
        }
        Ok(out)
    }

    pub fn to_matrix(&self) -> Matrix {
        let n = self.dim();
        let mut out = Matrix::zeros(n, n);
        for k in 0..self.rank {
            let v = self.eigen.vectors.column(k);
            let inv = 1.0 / self.eigen.values[k];
            for i in 0..n {
                let vi = v[i] * inv;
                for j in 0..n {
                    out[(i, j)] += vi * v[j];
                }
            }
        }
        out
    }
}

/// Moore–Penrose pseudoinverse `M⁺`.
pub fn pseudoinverse(m: &Matrix) -> Result<Matrix> {
    if m.is_empty() {
        return Err(Error::invalid("pseudoinverse of an empty matrix"));
    }
    m.ensure_finite("pseudoinverse input")?;
    let rtol = default_rtol(m.rows(), m.cols());
    if m.rows() >= m.cols() {
        // M⁺ = (MᵀM)⁺ Mᵀ
        let g = PsdPseudoInverse::new(&m.gram(), rtol)?;
        g.to_matrix().matmul(&m.transpose())
    } else {
        // M⁺ = Mᵀ (MMᵀ)⁺
        let g = PsdPseudoInverse::new(&m.outer_gram(), rtol)?;
        m.transpose().matmul(&g.to_matrix())
    }
}

/// Result of a minimum-norm least-squares solve.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub beta: Vec<f64>,
    /// Numerical rank of `ZᵀZ`.
    pub rank: usize,
}

/// `β̂ = (ZᵀZ)⁺ Zᵀ s`, the minimum-norm least-squares solution.
pub fn least_squares(z: &Matrix, s: &[f64]) -> Result<Vec<f64>> {
    least_squares_full(z, s).map(|ls| ls.beta)
}

pub fn least_squares_full(z: &Matrix, s: &[f64]) -> Result<LeastSquares> {
    if z.rows() != s.len() {
        return Err(Error::shape(format!(
            "design has {} rows but target has length {}",
            z.rows(),
            s.len()
        )));
    }
    if z.rows() == 0 {
        return Err(Error::invalid("least squares needs at least one row"));
    }
    z.ensure_finite("design")?;
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("target contains non-finite entries"));
    }
    let rtol = default_rtol(z.rows(), z.cols());
    if z.rows() >= z.cols() {
        let g = PsdPseudoInverse::new(&z.gram(), rtol)?;
        let beta = g.apply(&z.t_matvec(s)?)?;
        Ok(LeastSquares {
            beta,
            rank: g.rank(),
        })
    } else {
        // Underdetermined: β = Zᵀ (ZZᵀ)⁺ s is the same minimum-norm solution
        // computed from the smaller Gram.
        let g = PsdPseudoInverse::new(&z.outer_gram(), rtol)?;
        let beta = z.t_matvec(&g.apply(s)?)?;
        Ok(LeastSquares {
            beta,
            rank: g.rank(),
        })
    }
}
