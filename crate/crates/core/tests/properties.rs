//! Property-based invariants across modules.

use std::path::Path;

use etlt::calibrate::{fit_dlr, select_lowest, OnlineCalibrator, PreprocessSpec, Preprocessor};
use etlt::datasets::{mix, stream_indices, FeatureRecord, MixSpec, OodPool, Origin, StreamSpec};
use etlt::io::{Container, Payload, Section};
use etlt::linalg::{pca_fit, soft_threshold, Matrix};
use etlt::metrics::{aupr, auroc, fpr_at_tpr, LabeledScores};
use etlt::scorers::{score_energy, score_kl, score_msp, softmax};
use proptest::prelude::*;

fn labelled(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<Origin>)> {
    (
        prop::collection::vec(-5i32..5, n),
        prop::collection::vec(any::<bool>(), n),
    )
        .prop_filter("both classes present", |(_, o)| {
            o.iter().any(|&b| b) && o.iter().any(|&b| !b)
        })
        .prop_map(|(s, o)| {
            (
                s.into_iter().map(f64::from).collect(),
                o.into_iter()
                    .map(|b| if b { Origin::In } else { Origin::Out })
                    .collect(),
            )
        })
}

fn dense(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn section() -> impl Strategy<Value = Section> {
    let name = "[a-z][a-z0-9_.]{0,12}";
    prop_oneof![
        (name, prop::collection::vec(any::<f64>(), 0..20)).prop_map(|(n, v)| Section::new(
            n,
            vec![v.len()],
            Payload::F64(v)
        )
        .unwrap()),
        (name, prop::collection::vec(any::<f32>(), 0..20)).prop_map(|(n, v)| Section::new(
            n,
            vec![v.len()],
            Payload::F32(v)
        )
        .unwrap()),
        (name, prop::collection::vec(any::<u8>(), 0..20)).prop_map(|(n, v)| Section::new(
            n,
            vec![v.len()],
            Payload::U8(v)
        )
        .unwrap()),
        (name, prop::collection::vec("[^\\x00]{0,10}", 0..6)).prop_map(|(n, v)| Section::new(
            n,
            vec![v.len()],
            Payload::Strings(v)
        )
        .unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn container_bytes_round_trip(sections in prop::collection::vec(section(), 0..6)) {
        let mut c = Container::new();
        for s in sections {
            if c.get(&s.name).is_none() {
                c.push(s).unwrap();
            }
        }
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes, Path::new("mem")).unwrap();
        // Compare bytes, since NaN payloads defeat PartialEq.
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_containers_are_rejected(sections in prop::collection::vec(section(), 1..4), cut in 0.0f64..1.0) {
        let mut c = Container::new();
        for s in sections {
            if c.get(&s.name).is_none() {
                c.push(s).unwrap();
            }
        }
        let bytes = c.to_bytes();
        let keep = (cut * bytes.len() as f64) as usize;
        prop_assume!(keep < bytes.len());
        prop_assert!(Container::from_bytes(&bytes[..keep], Path::new("mem")).is_err());
    }

    #[test]
    fn metrics_invariant_under_increasing_maps((s, o) in labelled(30), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let base = LabeledScores::new(s.clone(), o.clone()).unwrap();
        let mapped = LabeledScores::new(s.iter().map(|v| (a * v + b).exp()).collect(), o).unwrap();
        prop_assert_eq!(auroc(&base).unwrap(), auroc(&mapped).unwrap());
        prop_assert_eq!(aupr(&base).unwrap(), aupr(&mapped).unwrap());
        prop_assert_eq!(fpr_at_tpr(&base, 0.95).unwrap(), fpr_at_tpr(&mapped, 0.95).unwrap());
    }

    #[test]
    fn auroc_negation_complements((s, o) in labelled(25)) {
        let fwd = auroc(&LabeledScores::new(s.clone(), o.clone()).unwrap()).unwrap();
        let rev = auroc(&LabeledScores::new(s.iter().map(|v| -v).collect(), o).unwrap()).unwrap();
        prop_assert!((fwd + rev - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&fwd));
    }

    #[test]
    fn metric_ranges((s, o) in labelled(40)) {
        let ls = LabeledScores::new(s, o).unwrap();
        let p = aupr(&ls).unwrap();
        let f = fpr_at_tpr(&ls, 0.95).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0 + 1e-12);
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn online_matches_batch(
        z in (1usize..6, 2usize..40).prop_flat_map(|(d, n)| dense(n, d)),
        cuts in prop::collection::vec(0.0f64..1.0, 0..5),
        seed in any::<u64>(),
    ) {
        let n = z.rows();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let s: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let mut bounds: Vec<usize> = cuts.iter().map(|c| (c * n as f64) as usize).collect();
        bounds.extend([0, n]);
        bounds.sort_unstable();
        bounds.dedup();
        let mut cal = OnlineCalibrator::new(Preprocessor::identity(z.cols(), true)).unwrap();
        for w in bounds.windows(2) {
            cal.update(&z.row_block(w[0], w[1]), &s[w[0]..w[1]]).unwrap();
        }
        let online = cal.to_model().unwrap().beta;
        let batch = fit_dlr(&z, &s, &PreprocessSpec::bias_only()).unwrap().beta;
        let scale = batch.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in online.iter().zip(&batch) {
            prop_assert!((a - b).abs() <= 1e-8 * scale, "{} vs {}", a, b);
        }
    }

    #[test]
    fn select_lowest_keeps_the_smallest(gamma in prop::collection::vec(-10.0f64..10.0, 1..50), p in 1.0f64..100.0) {
        let kept = select_lowest(&gamma, p).unwrap();
        let n = gamma.len();
        let expected = ((p / 100.0 * n as f64) + 0.5 + 1e-9).floor().clamp(1.0, n as f64) as usize;
        prop_assert_eq!(kept.len(), expected);
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        let worst_kept = kept.iter().map(|&i| gamma[i].abs()).fold(0.0, f64::max);
        for i in (0..n).filter(|i| !kept.contains(i)) {
            prop_assert!(gamma[i].abs() >= worst_kept);
        }
    }

    #[test]
    fn stream_batches_partition(n in 0usize..300, b in 1usize..64, seed in any::<u64>()) {
        let batches = stream_indices(n, &StreamSpec::new(b, seed)).unwrap();
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        prop_assert!(batches.iter().rev().skip(1).all(|x| x.len() == b));
        prop_assert!(batches.last().is_none_or(|x| !x.is_empty() && x.len() <= b));
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(stream_indices(n, &StreamSpec::new(b, seed)).unwrap(), batches);
    }

    #[test]
    fn mix_counts_and_determinism(rate in 0.05f64..0.95, total in 2usize..120, w in 0.0f64..1.0, seed in any::<u64>()) {
        let rec = |v: f64, o: Origin, tag: &str| FeatureRecord::new(vec![v], None, o, tag);
        let ins: Vec<_> = (0..120).map(|i| rec(i as f64, Origin::In, "in")).collect();
        let pools = vec![
            OodPool { tag: "a".into(), records: (0..120).map(|i| rec(-(i as f64), Origin::Out, "a")).collect() },
            OodPool { tag: "b".into(), records: (0..120).map(|i| rec(1e3 + i as f64, Origin::Out, "b")).collect() },
        ];
        let spec = MixSpec { in_rate: rate, total, seed, ood_sources: vec![("a".into(), w), ("b".into(), 1.0 - w)] };
        let got = mix(&ins, &pools, &spec).unwrap();
        prop_assert_eq!(got.len(), total);
        let n_in = got.iter().filter(|r| r.origin == Origin::In).count();
        prop_assert_eq!(n_in, spec.in_count());
        let counts = spec.out_counts();
        prop_assert_eq!(got.iter().filter(|r| r.source_tag == "a").count(), counts[0]);
        prop_assert_eq!(got.iter().filter(|r| r.source_tag == "b").count(), counts[1]);
        prop_assert_eq!(mix(&ins, &pools, &spec).unwrap(), got);
    }

    #[test]
    fn scorer_bounds(logits in prop::collection::vec(-50.0f64..50.0, 2..12), t in 0.1f64..100.0) {
        let c = logits.len() as f64;
        let msp = score_msp(&logits, t).unwrap();
        prop_assert!(msp >= 1.0 / c - 1e-12 && msp <= 1.0 + 1e-12);
        let kl = score_kl(&logits, t).unwrap();
        prop_assert!((0.0..=c.ln() + 1e-9 + 100.0 / t).contains(&kl));
        let max = logits.iter().copied().fold(f64::MIN, f64::max);
        let e = score_energy(&logits, t).unwrap();
        prop_assert!(e >= max - 1e-9 && e <= max + t * c.ln() + 1e-9);
        let p = softmax(&logits, t);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn energy_shift_equivariance(logits in prop::collection::vec(-20.0f64..20.0, 2..8), t in 0.5f64..10.0, k in -30.0f64..30.0) {
        let shifted: Vec<f64> = logits.iter().map(|v| v + k).collect();
        let d = score_energy(&shifted, t).unwrap() - score_energy(&logits, t).unwrap();
        prop_assert!((d - k).abs() < 1e-10);
        prop_assert!((score_msp(&shifted, t).unwrap() - score_msp(&logits, t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn soft_threshold_shrinks(x in -10.0f64..10.0, lam in 0.0f64..5.0) {
        let y = soft_threshold(x, lam);
        prop_assert!(y.abs() <= x.abs());
        prop_assert!(y == 0.0 || y.signum() == x.signum());
        prop_assert!((y - x).abs() <= lam + 1e-15);
    }

    #[test]
    fn pca_components_orthonormal(x in (3usize..30, 2usize..8).prop_flat_map(|(n, d)| dense(n, d)), k in 1usize..8) {
        let k = k.min(x.cols()).min(x.rows());
        let basis = pca_fit(&x, k).unwrap();
        let v = &basis.components;
        let gram = v.matmul(&v.transpose()).unwrap();
        prop_assert!(gram.max_abs_diff(&Matrix::identity(v.rows())) < 1e-8);
        prop_assert!(basis.explained_variance.windows(2).all(|w| w[0] >= w[1] - 1e-12));
    }
}
