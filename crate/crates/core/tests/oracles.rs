//! Library routines checked against slow, independent reference
//! implementations.

use etlt::calibrate::{annihilator, fit_dlr, PreprocessSpec};
use etlt::datasets::Origin;
use etlt::linalg::{kkt_violation, lasso, pseudoinverse, Matrix, SymmetricEigen};
use etlt::metrics::{aupr, auroc, fpr_at_tpr, LabeledScores};
use etlt::scorers::{score_kl, score_msp, score_odin, DifferentiableClassifier};
use etlt::tinynet::{GradientTarget, Mlp};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Cyclic Jacobi rotations; returns eigenvalues sorted descending.
fn jacobi_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in m.iter_mut() {
                    let (a, b) = (row[p], row[q]);
                    row[p] = c * a - s * b;
                    row[q] = s * a + c * b;
                }
                let (rp, rq) = (m[p].clone(), m[q].clone());
                m[p] = rp.iter().zip(&rq).map(|(a, b)| c * a - s * b).collect();
                m[q] = rp.iter().zip(&rq).map(|(a, b)| s * a + c * b).collect();
            }
        }
    }
    let mut v: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

#[test]
fn eigenvalues_match_jacobi() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 1..9 {
        let b = gaussian(&mut rng, n, n);
        let a = b
            .matmul(&b.transpose())
            .unwrap()
            .sub(&Matrix::identity(n).scale(0.5))
            .unwrap();
        let ours = SymmetricEigen::new(&a).unwrap().values;
        let reference = jacobi_eigenvalues(&a);
        for (x, y) in ours.iter().zip(&reference) {
            assert!((x - y).abs() < 1e-10 * (1.0 + y.abs()), "n={n}: {x} vs {y}");
        }
    }
}

#[test]
fn pseudoinverse_matches_svd() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (rows, cols, rank) in [(6, 4, 2), (4, 6, 3), (5, 5, 5), (8, 3, 1), (3, 8, 3)] {
        let m = gaussian(&mut rng, rows, rank)
            .matmul(&gaussian(&mut rng, rank, cols))
            .unwrap();
        let ours = pseudoinverse(&m).unwrap();
        let reference = to_na(&m).pseudo_inverse(1e-10).unwrap();
        let scale = reference.amax();
        for i in 0..cols {
            for j in 0..rows {
                assert!(
                    (ours[(i, j)] - reference[(i, j)]).abs() < 1e-8 * scale,
                    "{rows}x{cols} rank {rank} at ({i},{j})"
                );
            }
        }
    }
}

#[test]
fn dlr_matches_svd_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (n, d) in [(50, 5), (10, 9), (4, 10)] {
        let z = gaussian(&mut rng, n, d);
        let s: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let ours = fit_dlr(&z, &s, &PreprocessSpec::bias_only()).unwrap().beta;
        let z1 = to_na(&z.with_constant_column(1.0));
        let reference = z1.pseudo_inverse(1e-12).unwrap() * nalgebra::DVector::from_vec(s);
        for (a, b) in ours.iter().zip(reference.iter()) {
            assert!(
                (a - b).abs() < 1e-8 * (1.0 + b.abs()),
                "n={n} d={d}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn annihilator_matches_svd_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = gaussian(&mut rng, 7, 3);
    let ours = annihilator(&z).unwrap();
    let zn = to_na(&z);
    let reference = DMatrix::identity(7, 7) - &zn * zn.clone().pseudo_inverse(1e-12).unwrap();
    for i in 0..7 {
        for j in 0..7 {
            assert!((ours[(i, j)] - reference[(i, j)]).abs() < 1e-10);
        }
    }
}

/// Exact Lasso by enumerating sign patterns; valid for full-column-rank `x`.
fn lasso_by_enumeration(x: &Matrix, y: &[f64], lambda: f64) -> (Vec<f64>, f64) {
    let p = x.cols();
    let objective = |g: &[f64]| {
        let f = x.matvec(g).unwrap();
        0.5 * y
            .iter()
            .zip(&f)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            + lambda * g.iter().map(|v| v.abs()).sum::<f64>()
    };
    let mut best = (vec![0.0; p], objective(&vec![0.0; p]));
    for code in 0..3usize.pow(p as u32) {
        let signs: Vec<i32> = (0..p)
            .map(|j| (code / 3usize.pow(j as u32) % 3) as i32 - 1)
            .collect();
        let support: Vec<usize> = (0..p).filter(|&j| signs[j] != 0).collect();
        if support.is_empty() {
            continue;
        }
        let xs = DMatrix::from_fn(x.rows(), support.len(), |i, k| x[(i, support[k])]);
        let rhs = xs.transpose() * nalgebra::DVector::from_column_slice(y)
            - nalgebra::DVector::from_iterator(
                support.len(),
                support.iter().map(|&j| lambda * signs[j] as f64),
            );
        let Some(sol) = (xs.transpose() * &xs).cholesky().map(|c| c.solve(&rhs)) else {
            continue;
        };
        if support
            .iter()
            .enumerate()
            .any(|(k, &j)| sol[k] * signs[j] as f64 <= 0.0)
        {
            continue;
        }
        let mut g = vec![0.0; p];
        for (k, &j) in support.iter().enumerate() {
            g[j] = sol[k];
        }
        let obj = objective(&g);
        if obj < best.1 {
            best = (g, obj);
        }
    }
    best
}

#[test]
fn lasso_matches_sign_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..40 {
        let p = 1 + trial % 5;
        let x = gaussian(&mut rng, 12, p);
        let y: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
        let lambda = rng.random_range(0.01..3.0);
        let fit = lasso(&x, &y, lambda).unwrap();
        let (reference, _) = lasso_by_enumeration(&x, &y, lambda);
        for (a, b) in fit.coef.iter().zip(&reference) {
            assert!(
                (a - b).abs() < 1e-6,
                "trial {trial}: {:?} vs {reference:?}",
                fit.coef
            );
        }
        assert!(kkt_violation(&x, &y, &fit.coef, lambda).unwrap() < 1e-6);
    }
}

fn brute_auroc(s: &[f64], o: &[Origin]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (si, oi) in s.iter().zip(o) {
        for (sj, oj) in s.iter().zip(o) {
            if *oi == Origin::In && *oj == Origin::Out {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

/// Largest in-score threshold with TPR ≥ 0.95, then the share of out-scores at or above it.
fn brute_fpr95(s: &[f64], o: &[Origin]) -> f64 {
    let n_in = o.iter().filter(|&&x| x == Origin::In).count() as f64;
    let n_out = o.len() as f64 - n_in;
    let mut best = f64::NEG_INFINITY;
    for (t, ot) in s.iter().zip(o) {
        if *ot != Origin::In {
            continue;
        }
        let tpr = s
            .iter()
            .zip(o)
            .filter(|(v, x)| **x == Origin::In && *v >= t)
            .count() as f64
            / n_in;
        if tpr >= 0.95 && *t > best {
            best = *t;
        }
    }
    s.iter()
        .zip(o)
        .filter(|(v, x)| **x == Origin::Out && **v >= best)
        .count() as f64
        / n_out
}

/// Average precision over distinct in-score thresholds.
fn brute_aupr(s: &[f64], o: &[Origin]) -> f64 {
    let n_in = o.iter().filter(|&&x| x == Origin::In).count() as f64;
    let mut thresholds: Vec<f64> = s
        .iter()
        .zip(o)
        .filter(|(_, x)| **x == Origin::In)
        .map(|(v, _)| *v)
        .collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let tp = s
            .iter()
            .zip(o)
            .filter(|(v, x)| **x == Origin::In && **v >= t)
            .count() as f64;
        let fp = s
            .iter()
            .zip(o)
            .filter(|(v, x)| **x == Origin::Out && **v >= t)
            .count() as f64;
        area += (tp / n_in - prev_recall) * tp / (tp + fp);
        prev_recall = tp / n_in;
    }
    area
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..300 {
        let n = rng.random_range(2..40);
        let mut o: Vec<Origin> = (0..n)
            .map(|_| {
                if rng.random_bool(0.5) {
                    Origin::In
                } else {
                    Origin::Out
                }
            })
            .collect();
        o[0] = Origin::In;
        o[1] = Origin::Out;
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let ls = LabeledScores::new(s.clone(), o.clone()).unwrap();
        assert!((auroc(&ls).unwrap() - brute_auroc(&s, &o)).abs() < 1e-12);
        assert!((fpr_at_tpr(&ls, 0.95).unwrap() - brute_fpr95(&s, &o)).abs() < 1e-12);
        assert!((aupr(&ls).unwrap() - brute_aupr(&s, &o)).abs() < 1e-12);
    }
}

#[test]
fn kl_matches_direct_divergence() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..500 {
        let c = rng.random_range(2..10);
        let t = rng.random_range(0.5..5.0);
        let f: Vec<f64> = (0..c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let z: f64 = f.iter().map(|v| (v / t).exp()).sum();
        let u = 1.0 / c as f64;
        let direct: f64 = f.iter().map(|v| u * (u / ((v / t).exp() / z)).ln()).sum();
        assert!((score_kl(&f, t).unwrap() - direct).abs() < 1e-10);
    }
}

#[test]
fn input_gradient_matches_central_differences() {
    let mlp = Mlp::new(&[4, 10, 6, 3], 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = 2.0;
    let h = 1e-6;
    let neg_log_msp = |x: &[f64]| -score_msp(&mlp.logits(x).unwrap(), t).unwrap().ln();
    for _ in 0..50 {
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let grad = mlp
            .input_gradient(&x, GradientTarget::NegLogMsp { temperature: t })
            .unwrap();
        for i in 0..4 {
            let (mut up, mut down) = (x.clone(), x.clone());
            up[i] += h;
            down[i] -= h;
            let numeric = (neg_log_msp(&up) - neg_log_msp(&down)) / (2.0 * h);
            assert!(
                (grad[i] - numeric).abs() <= 1e-5 * (1.0 + numeric.abs()),
                "{} vs {numeric}",
                grad[i]
            );
        }
    }
}

#[test]
fn odin_step_matches_manual_perturbation() {
    let mlp = Mlp::new(&[3, 8, 4], 10).unwrap();
    let x = [0.3, -1.2, 0.7];
    let (t, eps) = (10.0, 0.05);
    let g = mlp.neg_log_msp_gradient(&x, t).unwrap();
    let moved: Vec<f64> = x
        .iter()
        .zip(&g)
        .map(|(xi, gi)| xi - eps * gi.signum())
        .collect();
    let manual = score_msp(&mlp.logits(&moved).unwrap(), t).unwrap();
    assert_eq!(score_odin(&x, &mlp, t, eps).unwrap(), manual);
    assert!(manual >= score_msp(&mlp.logits(&x).unwrap(), t).unwrap());
}
