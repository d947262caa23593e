//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Run with `cargo test --test acceptance`.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use etlt::calibrate::{
    annihilator, fit_dlr, fit_rlr, OnlineCalibrator, PreprocessSpec, Preprocessor, RlrConfig,
};
use etlt::datasets::synthetic::LinearScoreFamily;
use etlt::datasets::Origin;
use etlt::linalg::{kkt_violation, lasso, norm2, pca_fit, pseudoinverse, Matrix};
use etlt::metrics::{aupr, auroc, fpr_at_tpr, LabeledScores};
use etlt::pipeline::stream_calibrate;
use etlt::scorers::{score_energy, score_kl, score_msp, score_odin};
use etlt::tinynet::{GradientTarget, Mlp};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn normal_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm2(&diff) / norm2(b).max(f64::MIN_POSITIVE)
}

fn online_equals_batch() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let d = rng.random_range(1..=64);
        let n = rng.random_range(1..=2000);
        let x = gaussian(n, d, &mut rng);
        let beta = normal_vec(d, &mut rng);
        let s: Vec<f64> = x
            .matvec(&beta)
            .unwrap()
            .into_iter()
            .map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let batch = fit_dlr(&x, &s, &PreprocessSpec::bias_only()).unwrap().beta;

        let parts = rng.random_range(1..=32.min(n));
        let mut cuts: Vec<usize> = (0..parts - 1).map(|_| rng.random_range(1..n)).collect();
        cuts.extend([0, n]);
        cuts.sort_unstable();
        cuts.dedup();
        let mut online = OnlineCalibrator::new(Preprocessor::identity(d, true)).unwrap();
        for w in cuts.windows(2) {
            let idx: Vec<usize> = (w[0]..w[1]).collect();
            let part: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
            online.update(&x.select_rows(&idx), &part).unwrap();
        }
        let streamed = online.to_model().unwrap().beta;
        worst = worst.max(rel_err(&streamed, &batch));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-8 && secs < 10.0,
        format!("max relative beta error {worst:.2e} (<= 1e-8), {secs:.2} s (< 10 s)"),
    )
}

fn interpolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let d = rng.random_range(1..=64);
        let n = rng.random_range(1..=d + 1);
        let x = gaussian(n, d, &mut rng);
        let s = normal_vec(n, &mut rng);
        let m = fit_dlr(&x, &s, &PreprocessSpec::bias_only()).unwrap();
        let fitted = m.predict(&x).unwrap();
        let resid: Vec<f64> = fitted.iter().zip(&s).map(|(f, y)| f - y).collect();
        worst = worst.max(norm2(&resid));
    }
    outcome(
        worst <= 1e-8,
        format!("max training residual {worst:.2e} (<= 1e-8) over 200 instances"),
    )
}

fn rlr_robustness() -> Outcome {
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    let cfg = RlrConfig {
        lambda: 1e-5,
        percentile: 80.0,
        ..Default::default()
    };
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (n, d) = (20, 4);
        let x = gaussian(n, d, &mut rng);
        let beta = normal_vec(d, &mut rng);
        let mut s = x.matvec(&beta).unwrap();
        let mut corrupted = rand::seq::index::sample(&mut rng, n, 2).into_vec();
        corrupted.sort_unstable();
        for &i in &corrupted {
            s[i] += 100.0;
        }
        let (model, report) = fit_rlr(&x, &s, &PreprocessSpec::raw(), &cfg).unwrap();
        let excluded: Vec<usize> = (0..n).filter(|i| !report.selected.contains(i)).collect();
        let flagged: Vec<usize> = excluded
            .iter()
            .copied()
            .filter(|&i| report.gamma[i] != 0.0)
            .collect();
        let mut by_gamma: Vec<usize> = (0..n).collect();
        by_gamma.sort_by(|&a, &b| report.gamma[b].abs().total_cmp(&report.gamma[a].abs()));
        let mut top2 = by_gamma[..2].to_vec();
        top2.sort_unstable();
        let err = norm2(
            &model
                .beta
                .iter()
                .zip(&beta)
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>(),
        );
        worst = worst.max(err);
        if flagged != corrupted || top2 != corrupted || err > 1e-6 {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("{failures} failures over 100 seeds; max refit beta error {worst:.2e} (<= 1e-6)"),
    )
}

fn mean_auroc(scores: Vec<f64>, origins: &[Origin]) -> f64 {
    auroc(&LabeledScores::new(scores, origins.to_vec()).unwrap()).unwrap()
}

fn synthetic_gain() -> Outcome {
    let start = Instant::now();
    let (mut raw, mut dlr) = (0.0, 0.0);
    for seed in 0..20 {
        let sample = LinearScoreFamily {
            seed,
            ..Default::default()
        }
        .generate()
        .unwrap();
        let calibrated = fit_dlr(
            &sample.features,
            &sample.noisy_scores,
            &PreprocessSpec::default(),
        )
        .unwrap()
        .predict(&sample.features)
        .unwrap();
        raw += mean_auroc(sample.noisy_scores, &sample.origins) / 20.0;
        dlr += mean_auroc(calibrated, &sample.origins) / 20.0;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        dlr >= 0.99 && raw <= 0.95 && secs < 5.0,
        format!("DLR AUROC {dlr:.4} (>= 0.99), raw AUROC {raw:.4} (<= 0.95), {secs:.2} s (< 5 s)"),
    )
}

fn scorer_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut kl_err: f64 = 0.0;
    let mut shift_err: f64 = 0.0;
    for _ in 0..10_000 {
        let c = rng.random_range(2..=20);
        let t: f64 = rng.random_range(0.1..10.0);
        let f: Vec<f64> = (0..c)
            .map(|_| 5.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mean = f.iter().sum::<f64>() / c as f64;
        let energy = score_energy(&f, t).unwrap();
        let expect = energy / t - mean / t - (c as f64).ln();
        kl_err = kl_err.max((score_kl(&f, t).unwrap() - expect).abs());
        let shift: f64 = rng.random_range(-10.0..10.0);
        let shifted: Vec<f64> = f.iter().map(|v| v + shift).collect();
        shift_err = shift_err.max((score_energy(&shifted, t).unwrap() - energy - shift).abs());
    }
    let mlp = Mlp::new(&[6, 12, 5], 3).unwrap();
    let mut odin_err: f64 = 0.0;
    for _ in 0..1000 {
        let x = normal_vec(6, &mut rng);
        let t: f64 = rng.random_range(0.5..1000.0);
        let odin = score_odin(&x, &mlp, t, 0.0).unwrap();
        let msp = score_msp(&mlp.forward(&x).unwrap(), t).unwrap();
        odin_err = odin_err.max((odin - msp).abs());
    }
    outcome(
        kl_err <= 1e-10 && odin_err <= 1e-12 && shift_err <= 1e-12,
        format!("KL identity {kl_err:.1e} (<= 1e-10), ODIN(eps=0) vs MSP {odin_err:.1e} (<= 1e-12), energy shift {shift_err:.1e} (<= 1e-12)"),
    )
}

fn brute_auroc(s: &[f64], o: &[Origin]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if o[i] == Origin::In && o[j] == Origin::Out {
                pairs += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

/// Every distinct score as a threshold `s >= t`.
fn brute_curve(s: &[f64], o: &[Origin]) -> Vec<(f64, usize, usize)> {
    let mut ts = s.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    ts.into_iter()
        .map(|t| {
            let tp = (0..s.len())
                .filter(|&i| o[i] == Origin::In && s[i] >= t)
                .count();
            let fp = (0..s.len())
                .filter(|&i| o[i] == Origin::Out && s[i] >= t)
                .count();
            (t, tp, fp)
        })
        .collect()
}

fn brute_aupr(s: &[f64], o: &[Origin]) -> f64 {
    let n_in = o.iter().filter(|&&x| x == Origin::In).count() as f64;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for (_, tp, fp) in brute_curve(s, o) {
        let recall = tp as f64 / n_in;
        if tp > 0 {
            area += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        }
        prev_recall = recall;
    }
    area
}

fn brute_fpr95(s: &[f64], o: &[Origin]) -> f64 {
    let n_in = o.iter().filter(|&&x| x == Origin::In).count() as f64;
    let n_out = s.len() as f64 - n_in;
    // Highest threshold reaching TPR >= 0.95.
    brute_curve(s, o)
        .into_iter()
        .find(|&(_, tp, _)| tp as f64 / n_in >= 0.95)
        .map(|(_, _, fp)| fp as f64 / n_out)
        .unwrap()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..=200);
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
        // Coarse grid so ties occur.
        let s: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(0..25u32)) / 4.0)
            .collect();
        let ls = LabeledScores::new(s.clone(), o.clone()).unwrap();
        worst = worst
            .max((auroc(&ls).unwrap() - brute_auroc(&s, &o)).abs())
            .max((aupr(&ls).unwrap() - brute_aupr(&s, &o)).abs())
            .max((fpr_at_tpr(&ls, 0.95).unwrap() - brute_fpr95(&s, &o)).abs());
    }
    outcome(
        worst <= 1e-12,
        format!("max deviation from brute force {worst:.1e} (<= 1e-12) on 200 sets"),
    )
}

fn linalg_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut penrose, mut kkt, mut idem, mut ortho): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..50 {
        let (m, n) = (rng.random_range(1..=30), rng.random_range(1..=30));
        let r = rng.random_range(1..=m.min(n));
        let a = gaussian(m, r, &mut rng)
            .matmul(&gaussian(r, n, &mut rng))
            .unwrap();
        let p = pseudoinverse(&a).unwrap();
        let ap = a.matmul(&p).unwrap();
        let pa = p.matmul(&a).unwrap();
        penrose = penrose
            .max(ap.matmul(&a).unwrap().max_abs_diff(&a))
            .max(pa.matmul(&p).unwrap().max_abs_diff(&p))
            .max(ap.max_abs_diff(&ap.transpose()))
            .max(pa.max_abs_diff(&pa.transpose()));

        let x = gaussian(m, n, &mut rng);
        let y = normal_vec(m, &mut rng);
        let lambda = rng.random_range(0.01..2.0);
        let fit = lasso(&x, &y, lambda).unwrap();
        kkt = kkt.max(kkt_violation(&x, &y, &fit.coef, lambda).unwrap());

        let z = gaussian(rng.random_range(2..=40), rng.random_range(1..=10), &mut rng);
        let h = annihilator(&z).unwrap();
        idem = idem.max(h.matmul(&h).unwrap().max_abs_diff(&h));

        let k = rng.random_range(1..=z.rows().min(z.cols()));
        let v = pca_fit(&z, k).unwrap().components;
        ortho = ortho.max(
            v.matmul(&v.transpose())
                .unwrap()
                .max_abs_diff(&Matrix::identity(k)),
        );
    }
    outcome(
        penrose <= 1e-9 && kkt <= 1e-6 && idem <= 1e-10 && ortho <= 1e-8,
        format!("Penrose {penrose:.1e} (<= 1e-9), KKT {kkt:.1e} (<= 1e-6), idempotence {idem:.1e} (<= 1e-10), PCA orthonormality {ortho:.1e} (<= 1e-8)"),
    )
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for probe in 0..100 {
        let mlp = Mlp::new(&[5, 16, 8, 4], probe).unwrap();
        let x = normal_vec(5, &mut rng);
        let t: f64 = rng.random_range(0.5..5.0);
        let grad = mlp
            .input_gradient(&x, GradientTarget::NegLogMsp { temperature: t })
            .unwrap();
        let logits = mlp.forward(&x).unwrap();
        let top = etlt::tinynet::argmax(&logits);
        // −log softmax_top, predicted class held fixed.
        let objective = |x: &[f64]| {
            let f = mlp.forward(x).unwrap();
            let p = etlt::scorers::softmax(&f, t);
            -p[top].ln()
        };
        let fd: Vec<f64> = (0..x.len())
            .map(|j| {
                let (mut hi, mut lo) = (x.clone(), x.clone());
                hi[j] += h;
                lo[j] -= h;
                (objective(&hi) - objective(&lo)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&grad, &fd));
    }
    outcome(
        worst <= 1e-5,
        format!("max relative gradient error {worst:.1e} (<= 1e-5) over 100 probes"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.cfg");
    std::fs::write(
        &plan,
        "dataset = synthetic\nsynth.train_per_class = 60\nsynth.pool_per_class = 100\nsynth.ood_count = 300\n\
         synth.epochs = 10\ntotal = 400\nscorers = msp, energy, odin:T=1000:eps=0.001\n\
         methods = none, dlr, rlr, online:32:all\nrepeats = 2\nseed = 3\n",
    )
    .unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for prefix in [&a, &b] {
        let code = etlt::cli::main_with_args([
            "etlt",
            "run",
            plan.to_str().unwrap(),
            "-o",
            prefix.to_str().unwrap(),
        ]);
        if code != 0 {
            return outcome(false, format!("run exited with {code}"));
        }
    }
    let read = |p: &std::path::Path, ext: &str| std::fs::read(p.with_extension(ext)).unwrap();
    let same = read(&a, "csv") == read(&b, "csv") && read(&a, "json") == read(&b, "json");
    let rows = String::from_utf8(read(&a, "csv")).unwrap().lines().count() - 1;
    outcome(
        same,
        format!("two runs of a {rows}-row plan byte-identical: {same}"),
    )
}

fn batch_insensitivity() -> Outcome {
    let batches = [Some(32), Some(256), None];
    let mut means = [0.0; 3];
    for seed in 0..20 {
        let sample = LinearScoreFamily {
            seed,
            ..Default::default()
        }
        .generate()
        .unwrap();
        for (k, b) in batches.iter().enumerate() {
            let (scores, _) = stream_calibrate(
                &sample.features,
                &sample.noisy_scores,
                &PreprocessSpec::default(),
                *b,
                seed,
            )
            .unwrap();
            means[k] += mean_auroc(scores, &sample.origins) / 20.0;
        }
    }
    let spread = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - means.iter().cloned().fold(f64::INFINITY, f64::min);
    outcome(
        spread <= 0.02,
        format!(
            "AUROC b=32 {:.4}, b=256 {:.4}, b=all {:.4}; spread {spread:.4} (<= 0.02)",
            means[0], means[1], means[2]
        ),
    )
}

type Check = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let checks: [Check; 10] = [
        ("online equals batch", online_equals_batch),
        ("interpolation regime", interpolation),
        ("rlr robustness", rlr_robustness),
        ("synthetic calibration gain", synthetic_gain),
        ("scorer identities", scorer_identities),
        ("metric oracles", metric_oracles),
        ("linear algebra suite", linalg_suite),
        ("tinynet gradient check", gradient_check),
        ("determinism", determinism),
        ("batch-size insensitivity", batch_insensitivity),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let o = check();
        println!(
            "{} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += (!o.pass) as usize;
    }
    println!(
        "{} of {} criteria passed",
        checks.len() - failed,
        checks.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
