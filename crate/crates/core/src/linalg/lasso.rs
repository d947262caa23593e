//! Cyclic coordinate descent for `½‖y − Xγ‖² + λ‖γ‖₁`.

use crate::error::{Error, Result};

use super::matrix::{axpy, dot, norm_inf};
use super::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoOptions {
    /// Stop once the largest coefficient change in a sweep is at most this.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Record the objective after every sweep.
    pub record_objective: bool,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_sweeps: 10_000,
            record_objective: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LassoStatus {
    Converged,
    /// Sweep budget exhausted; the last iterate is returned.
    MaxSweepsReached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub coef: Vec<f64>,
    pub sweeps: usize,
    pub status: LassoStatus,
    /// Objective after each sweep, starting with the value at `γ = 0`.
    /// Empty unless requested.
    pub objective_trace: Vec<f64>,
    /// The final coefficients come from an exact solve on a support found
    /// by coordinate descent rather than from the last sweep.
    pub polished: bool,
}

impl LassoFit {
    pub fn converged(&self) -> bool {
        self.status == LassoStatus::Converged
    }
}

#[inline]
pub fn soft_threshold(x: f64, lambda: f64) -> f64 {
    if x > lambda {
        x - lambda
    } else if x < -lambda {
        x + lambda
    } else {
        0.0
    }
}

pub fn lasso(design: &Matrix, target: &[f64], lambda: f64) -> Result<LassoFit> {
    lasso_with(design, target, lambda, &LassoOptions::default())
}

pub fn lasso_with(
    design: &Matrix,
    target: &[f64],
    lambda: f64,
    opts: &LassoOptions,
) -> Result<LassoFit> {
    if design.rows() != target.len() {
        return Err(Error::shape(format!(
            "design has {} rows but target has length {}",
            design.rows(),
            target.len()
        )));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lasso penalty must be finite and nonnegative, got {lambda}"
        )));
    }
    design.ensure_finite("lasso design")?;
    if target.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("lasso target contains non-finite entries"));
    }

    let p = design.cols();
    let columns = design.transpose();
    let sq_norms: Vec<f64> = (0..p)
        .map(|j| dot(columns.row(j), columns.row(j)))
        .collect();

    let mut coef = vec![0.0; p];
    let mut residual = target.to_vec();
    let mut trace = Vec::new();
    if opts.record_objective {
        trace.push(objective(&residual, &coef, lambda));
    }

    let mut sweeps = 0;
    let mut status = LassoStatus::MaxSweepsReached;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut max_change = 0.0f64;
        for j in 0..p {
            if sq_norms[j] == 0.0 {
                continue;
            }
            let col = columns.row(j);
            let old = coef[j];
            let rho = dot(col, &residual) + sq_norms[j] * old;
            let new = soft_threshold(rho, lambda) / sq_norms[j];
            let delta = new - old;
            if delta != 0.0 {
                axpy(-delta, col, &mut residual);
                coef[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if opts.record_objective {
            trace.push(objective(&residual, &coef, lambda));
        }
        if max_change <= opts.tol {
            status = LassoStatus::Converged;
            break;
        }
    }

    let mut polished = false;
    if kkt_violation(design, target, &coef, lambda)? > POLISH_ABOVE {
        if let Some(better) = polish(design, target, &coef, lambda)? {
            coef = better;
            polished = true;
        }
    }

    Ok(LassoFit {
        coef,
        sweeps,
        status,
        objective_trace: trace,
        polished,
    })
}

const POLISH_ABOVE: f64 = 1e-9;
const MAX_POLISH_SOLVES: usize = 32;

/// Coordinate descent can crawl on wide or highly correlated designs. Given
/// its support and signs, the optimum solves `X_SᵀX_S γ_S = X_Sᵀy − λσ`;
/// try that on the full support and on the largest-magnitude prefixes, and
/// keep whichever candidate lowers the KKT residual.
fn polish(design: &Matrix, target: &[f64], coef: &[f64], lambda: f64) -> Result<Option<Vec<f64>>> {
    let mut support: Vec<usize> = (0..coef.len()).filter(|&j| coef[j] != 0.0).collect();
    if support.is_empty() {
        return Ok(None);
    }
    support.sort_by(|&a, &b| coef[b].abs().total_cmp(&coef[a].abs()).then(a.cmp(&b)));
    let mut sizes: Vec<usize> = Vec::new();
    if support.len() <= design.rows() {
        sizes.push(support.len());
    }
    sizes.extend(
        (1..=support.len().min(design.rows()))
            .rev()
            .filter(|&k| k != support.len()),
    );
    sizes.truncate(MAX_POLISH_SOLVES);

    let mut best_kkt = kkt_violation(design, target, coef, lambda)?;
    let mut best = None;
    for k in sizes {
        let s = &support[..k];
        let xs = nalgebra::DMatrix::from_fn(design.rows(), k, |i, j| design[(i, s[j])]);
        let y = nalgebra::DVector::from_column_slice(target);
        let rhs =
            xs.tr_mul(&y) - nalgebra::DVector::from_fn(k, |j, _| lambda * coef[s[j]].signum());
        let Some(chol) = nalgebra::Cholesky::new(xs.tr_mul(&xs)) else {
            continue;
        };
        let sol = chol.solve(&rhs);
        if s.iter()
            .zip(sol.iter())
            .any(|(&j, v)| v.signum() != coef[j].signum() || *v == 0.0)
        {
            continue;
        }
        let mut candidate = vec![0.0; coef.len()];
        for (&j, v) in s.iter().zip(sol.iter()) {
            candidate[j] = *v;
        }
        let kkt = kkt_violation(design, target, &candidate, lambda)?;
        if kkt < best_kkt {
            best_kkt = kkt;
            best = Some(candidate);
            if kkt <= POLISH_ABOVE {
                break;
            }
        }
    }
    Ok(best)
}

fn objective(residual: &[f64], coef: &[f64], lambda: f64) -> f64 {
    0.5 * dot(residual, residual) + lambda * coef.iter().map(|c| c.abs()).sum::<f64>()
}

/// Largest violation of the Lasso optimality conditions at `coef`.
///
/// With `g = Xᵀ(y − Xγ)`, optimality requires `g_j = λ·sign(γ_j)` where
/// `γ_j ≠ 0` and `|g_j| ≤ λ` elsewhere.
pub fn kkt_violation(design: &Matrix, target: &[f64], coef: &[f64], lambda: f64) -> Result<f64> {
    let fitted = design.matvec(coef)?;
    let resid: Vec<f64> = target.iter().zip(&fitted).map(|(y, f)| y - f).collect();
    let g = design.t_matvec(&resid)?;
    let viol = g
        .iter()
        .zip(coef)
        .map(|(&gj, &cj)| {
            if cj > 0.0 {
                (gj - lambda).abs()
            } else if cj < 0.0 {
                (gj + lambda).abs()
            } else {
                (gj.abs() - lambda).max(0.0)
            }
        })
        .collect::<Vec<_>>();
    Ok(norm_inf(&viol))
}
