use serde::{Deserialize, Serialize};

use super::dlr::{check_scores, fit_processed, RegressionModel};
use super::preprocess::{preprocess_fit, PreprocessSpec};
use crate::datasets::round_half_up;
use crate::error::{Error, Result};
use crate::linalg::{
    default_rtol, dot, norm_inf, soft_threshold, LassoFit, LassoOptions, LassoStatus, Matrix,
    PsdPseudoInverse, SymmetricEigen,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlrConfig {
    /// Lasso penalty on the per-sample residual coefficients.
    pub lambda: f64,
    /// Percentage of samples (lowest `|γ|`) kept for the refit.
    pub percentile: f64,
    #[serde(skip)]
    pub lasso: LassoOptions,
}

impl Default for RlrConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-5,
            percentile: 80.0,
            lasso: LassoOptions::default(),
        }
    }
}

impl RlrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be finite and positive, got {}",
                self.lambda
            )));
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(Error::InvalidArgument(format!(
                "percentile must lie in (0, 100], got {}",
                self.percentile
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// Per-sample residual coefficients from the Lasso.
    pub gamma: Vec<f64>,
    /// Indices kept for the refit, ascending.
    pub selected: Vec<usize>,
    pub lasso_sweeps: usize,
    pub lasso_converged: bool,
}

/// Orthonormal basis `Q` (n x r) of the column space of `Z`, truncated with
/// the same rule as the least-squares solve.
pub fn column_space_basis(z: &Matrix) -> Result<Matrix> {
    let (n, d) = z.shape();
    if n == 0 {
        return Err(Error::invalid("column space of an empty matrix"));
    }
    z.ensure_finite("design")?;
    let rtol = default_rtol(n, d);
    if n >= d {
        let g = PsdPseudoInverse::new(&z.gram(), rtol)?;
        let r = g.rank();
        let mut q = Matrix::zeros(n, r);
        for k in 0..r {
            let v = g.retained_vector(k);
            let inv_sqrt = 1.0 / g.retained_values()[k].sqrt();
            let col = z.matvec(&v)?;
            for i in 0..n {
                q[(i, k)] = col[i] * inv_sqrt;
            }
        }
        Ok(q)
    } else {
        let e = SymmetricEigen::new(&z.outer_gram())?;
        let cutoff = rtol * e.max_value().max(0.0);
        let r = e
            .values
            .iter()
            .take_while(|&&v| v > cutoff && v > 0.0)
            .count();
        Ok(Matrix::from_fn(n, r, |i, k| e.vectors[(i, k)]))
    }
}

/// The residual-maker `I − Z(ZᵀZ)⁺Zᵀ`, materialised.
pub fn annihilator(z: &Matrix) -> Result<Matrix> {
    let q = column_space_basis(z)?;
    let n = z.rows();
    let mut out = Matrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] -= dot(q.row(i), q.row(j));
        }
    }
    Ok(out)
}

/// Solves `min_γ ½‖Z̃Ŝ − Z̃γ‖² + λ‖γ‖₁` with `Z̃` the annihilator of `Z`,
/// without forming the n x n matrix.
///
/// Since `½‖Z̃(Ŝ − γ)‖² = min_c ½‖Ŝ − Qc − γ‖²` for an orthonormal basis `Q`
/// of the column space of `Z`, the problem is jointly convex in `(γ, c)`.
/// Eliminating `γ = soft(Ŝ − Qc, λ)` leaves a Huber regression in the
/// r-dimensional `c`, solved here by active-set Newton steps with an exact
/// line search, following the penalty down from the least-squares fit.
///
/// `sweeps` in the result counts Newton iterations. The objective trace, if
/// requested, covers the iterations at the final penalty.
pub fn residual_lasso(
    z: &Matrix,
    scores: &[f64],
    lambda: f64,
    opts: &LassoOptions,
) -> Result<LassoFit> {
    check_scores(z.rows(), scores)?;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "lasso penalty must be finite and positive, got {lambda}"
        )));
    }
    let q = column_space_basis(z)?;
    let n = z.rows();
    let rank = q.cols();

    let mut c = q.t_matvec(scores)?;
    let residual = |c: &[f64]| -> Result<Vec<f64>> {
        let fit = q.matvec(c)?;
        Ok(scores.iter().zip(&fit).map(|(s, f)| s - f).collect())
    };
    let mut r = residual(&c)?;
    let start = norm_inf(&r);

    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut status = LassoStatus::Converged;
    let mut stage = start;
    while stage > lambda {
        stage = (stage * CONTINUATION_FACTOR).max(lambda);
        let last = stage == lambda;
        if last && opts.record_objective {
            trace.push(huber_objective(&r, lambda));
        }
        let mut converged = false;
        while iterations < opts.max_sweeps {
            iterations += 1;
            let psi: Vec<f64> = r.iter().map(|v| v.clamp(-stage, stage)).collect();
            let grad = q.t_matvec(&psi)?;
            if norm_inf(&grad) <= opts.tol * stage {
                converged = true;
                break;
            }
            let mut h = Matrix::identity(rank).scale(NEWTON_RIDGE);
            for i in (0..n).filter(|&i| r[i].abs() <= stage) {
                let qi = q.row(i);
                for a in 0..rank {
                    for b in 0..rank {
                        h[(a, b)] += qi[a] * qi[b];
                    }
                }
            }
            let step = PsdPseudoInverse::new(&h, 0.0)?.apply(&grad)?;
            let dir = q.matvec(&step)?;
            let t = huber_line_search(&r, &dir, stage);
            for (ck, sk) in c.iter_mut().zip(&step) {
                *ck += t * sk;
            }
            r = residual(&c)?;
            if last && opts.record_objective {
                trace.push(huber_objective(&r, lambda));
            }
            let moved = t * norm_inf(&step);
            if moved <= opts.tol * (1.0 + norm_inf(&c)) {
                converged = true;
                break;
            }
        }
        if !converged {
            status = LassoStatus::MaxSweepsReached;
            break;
        }
    }

    Ok(LassoFit {
        coef: r.iter().map(|v| soft_threshold(*v, lambda)).collect(),
        sweeps: iterations,
        status,
        objective_trace: trace,
        polished: false,
    })
}

/// Each continuation stage shrinks the penalty by this factor.
const CONTINUATION_FACTOR: f64 = 0.1;
/// Keeps the Newton system invertible when few residuals are in the
/// quadratic zone; the exact line search absorbs the resulting long steps.
const NEWTON_RIDGE: f64 = 1e-10;

fn huber(v: f64, lambda: f64) -> f64 {
    let a = v.abs();
    if a <= lambda {
        0.5 * a * a
    } else {
        lambda * a - 0.5 * lambda * lambda
    }
}

fn huber_objective(r: &[f64], lambda: f64) -> f64 {
    r.iter().map(|v| huber(*v, lambda)).sum()
}

/// Exact minimiser over `t ≥ 0` of `Σ h(r_i − t·a_i)`.
///
/// The derivative `−Σ a_i ψ(r_i − t·a_i)` is nondecreasing and piecewise
/// linear in `t`, with kinks where a residual enters or leaves `[−λ, λ]`.
fn huber_line_search(r: &[f64], a: &[f64], lambda: f64) -> f64 {
    // A residual sitting on ±λ counts as quadratic only if it moves inward.
    let mut quadratic: Vec<bool> = r
        .iter()
        .zip(a)
        .map(|(&v, &ai)| {
            v.abs() < lambda || (v == lambda && ai > 0.0) || (v == -lambda && ai < 0.0)
        })
        .collect();
    let mut deriv = 0.0;
    let mut slope = 0.0;
    let mut kinks: Vec<(f64, usize)> = Vec::new();
    for i in 0..r.len() {
        if a[i] == 0.0 {
            continue;
        }
        deriv -= a[i] * r[i].clamp(-lambda, lambda);
        if quadratic[i] {
            slope += a[i] * a[i];
        }
        for edge in [lambda, -lambda] {
            let t = (r[i] - edge) / a[i];
            if t > 0.0 {
                kinks.push((t, i));
            }
        }
    }
    if deriv >= 0.0 {
        return 0.0;
    }
    kinks.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut t = 0.0;
    for (tk, i) in kinks {
        if slope > 0.0 {
            let root = t - deriv / slope;
            if root <= tk {
                return root;
            }
        }
        deriv += slope * (tk - t);
        t = tk;
        if quadratic[i] {
            slope -= a[i] * a[i];
        } else {
            slope += a[i] * a[i];
        }
        quadratic[i] = !quadratic[i];
        if deriv >= 0.0 {
            return t;
        }
    }
    if slope > 0.0 {
        t - deriv / slope
    } else {
        t
    }
}

/// Indices of the `round(p% · n)` smallest `|γ|` (at least one), ties
/// broken by lower index, returned ascending.
pub fn select_lowest(gamma: &[f64], percentile: f64) -> Result<Vec<usize>> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentile must lie in (0, 100], got {percentile}"
        )));
    }
    let n = gamma.len();
    if n == 0 {
        return Err(Error::invalid("nothing to select from"));
    }
    let keep = round_half_up(percentile / 100.0 * n as f64).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| gamma[a].abs().total_cmp(&gamma[b].abs()).then(a.cmp(&b)));
    idx.truncate(keep);
    idx.sort_unstable();
    Ok(idx)
}

/// Robust linear regression: flag samples with large sparse residuals, then
/// regress on the rest.
pub fn fit_rlr(
    features: &Matrix,
    scores: &[f64],
    prep: &PreprocessSpec,
    cfg: &RlrConfig,
) -> Result<(RegressionModel, ResidualReport)> {
    cfg.validate()?;
    check_scores(features.rows(), scores)?;
    if features.rows() < 2 {
        return Err(Error::invalid(format!(
            "robust regression needs at least 2 samples, got {}",
            features.rows()
        )));
    }
    let preprocessor = preprocess_fit(features, prep)?;
    let processed = preprocessor.transform_flagged(features)?;
    let z = processed.matrix;
    let fit = residual_lasso(&z, scores, cfg.lambda, &cfg.lasso)?;
    let selected = select_lowest(&fit.coef, cfg.percentile)?;
    let sub_scores: Vec<f64> = selected.iter().map(|&i| scores[i]).collect();
    let mut model = fit_processed(preprocessor, &z.select_rows(&selected), &sub_scores)?;
    model.diagnostics.zero_norm_rows = processed.zero_norm_rows;
    Ok((
        model,
        ResidualReport {
            gamma: fit.coef,
            selected,
            lasso_sweeps: fit.sweeps,
            lasso_converged: fit.status == LassoStatus::Converged,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::fit_dlr;
    use crate::linalg::lasso_with;

    fn design() -> Matrix {
        Matrix::from_fn(12, 3, |i, j| {
            ((i * 7 + j * 3) % 5) as f64 - 1.5 + 0.1 * (i as f64) * (j as f64)
        })
    }

    #[test]
    fn annihilator_kills_columns_and_is_idempotent() {
        let z = design();
        let a = annihilator(&z).unwrap();
        assert!(a.matmul(&z).unwrap().max_abs() < 1e-12);
        assert!(a.matmul(&a).unwrap().max_abs_diff(&a) < 1e-12);
        assert!(a.max_abs_diff(&a.transpose()) < 1e-15);
    }

    #[test]
    fn annihilator_of_square_full_rank_is_zero() {
        let z = Matrix::from_rows(&[[2.0, 1.0], [1.0, 3.0]]).unwrap();
        assert!(annihilator(&z).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn structured_matches_generic_lasso() {
        let z = design();
        let s: Vec<f64> = (0..12)
            .map(|i| (i as f64 * 0.7).sin() + if i == 4 { 5.0 } else { 0.0 })
            .collect();
        let opts = LassoOptions {
            tol: 1e-13,
            ..Default::default()
        };
        let a = annihilator(&z).unwrap();
        let target = a.matvec(&s).unwrap();
        for &lam in &[0.05, 0.3, 1.0] {
            let generic = lasso_with(&a, &target, lam, &opts).unwrap();
            let fast = residual_lasso(&z, &s, lam, &opts).unwrap();
            assert!(generic.converged() && fast.converged());
            for (g, f) in generic.coef.iter().zip(&fast.coef) {
                assert!((g - f).abs() < 1e-9, "λ={lam}: {g} vs {f}");
            }
        }
    }

    #[test]
    fn objective_never_increases() {
        let z = design();
        let s: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect();
        let opts = LassoOptions {
            record_objective: true,
            ..Default::default()
        };
        let fit = residual_lasso(&z, &s, 0.1, &opts).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn selection_rounds_and_breaks_ties_by_index() {
        let g = [0.0, 0.5, 0.0, -0.1, 2.0];
        assert_eq!(select_lowest(&g, 80.0).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(select_lowest(&g, 40.0).unwrap(), vec![0, 2]);
        assert_eq!(select_lowest(&g, 1.0).unwrap(), vec![0]);
        assert_eq!(select_lowest(&[0.0; 5], 50.0).unwrap(), vec![0, 1, 2]);
        assert!(select_lowest(&g, 0.0).is_err());
        assert!(select_lowest(&g, 101.0).is_err());
    }

    #[test]
    fn full_keep_matches_dlr_exactly() {
        let z = design();
        let s: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect();
        let cfg = RlrConfig {
            lambda: 1e6,
            percentile: 100.0,
            ..Default::default()
        };
        let (rlr, report) = fit_rlr(&z, &s, &PreprocessSpec::default(), &cfg).unwrap();
        let dlr = fit_dlr(&z, &s, &PreprocessSpec::default()).unwrap();
        assert_eq!(report.selected, (0..12).collect::<Vec<_>>());
        assert_eq!(rlr.beta, dlr.beta);
    }

    #[test]
    fn outlier_is_dropped() {
        let n = 20;
        let z = Matrix::from_fn(n, 2, |i, j| {
            if j == 0 {
                i as f64
            } else {
                ((i * i) % 7) as f64
            }
        });
        let mut s: Vec<f64> = (0..n).map(|i| 2.0 * z[(i, 0)] - z[(i, 1)] + 0.5).collect();
        s[7] += 40.0;
        let cfg = RlrConfig {
            percentile: 95.0,
            ..Default::default()
        };
        let (model, report) = fit_rlr(&z, &s, &PreprocessSpec::default(), &cfg).unwrap();
        assert!(!report.selected.contains(&7));
        assert!((model.beta[0] - 2.0).abs() < 1e-8);
        assert!((model.beta[1] + 1.0).abs() < 1e-8);
        assert!((model.beta[2] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn too_few_samples() {
        let z = Matrix::from_rows(&[[1.0]]).unwrap();
        let err = fit_rlr(&z, &[1.0], &PreprocessSpec::raw(), &RlrConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }
}
