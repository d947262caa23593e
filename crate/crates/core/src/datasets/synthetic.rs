//! Desk-scale stand-ins for real benchmark features.
//!
//! Two generators live here:
//!
//! * [`LinearScoreFamily`]: features with a known linear score `zᵀβ*`,
//!   linearly separable in/out clusters, and base scores corrupted by
//!   Gaussian noise. Calibration should recover the clean score.
//! * [`SynthSpec`] / [`build_world`]: Gaussian class clusters fed through a
//!   trained [`Mlp`], giving realistic logits and penultimate features for
//!   every base scorer, plus out-of-distribution pools.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{gen_noise_ood, rng, round_half_up, FeatureRecord, NoiseKind, OodPool, Origin};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, Matrix};
use crate::tinynet::{Mlp, TrainConfig};

/// Derives an independent sub-seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm2(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearScoreFamily {
    pub n: usize,
    pub dim: usize,
    pub in_rate: f64,
    /// Cluster means sit at `±separation · β*` with unit-variance noise.
    pub separation: f64,
    /// Score noise standard deviation as a fraction of the clean score range.
    pub noise_ratio: f64,
    pub seed: u64,
}

impl Default for LinearScoreFamily {
    fn default() -> Self {
        Self {
            n: 2000,
            dim: 16,
            in_rate: 0.5,
            separation: 3.0,
            noise_ratio: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearScoreSample {
    pub features: Matrix,
    pub clean_scores: Vec<f64>,
    pub noisy_scores: Vec<f64>,
    pub origins: Vec<Origin>,
    /// The unit direction `β*`.
    pub beta: Vec<f64>,
}

impl LinearScoreFamily {
    pub fn generate(&self) -> Result<LinearScoreSample> {
        if self.n < 2 || self.dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "linear family needs n >= 2 and dim >= 1, got n={} dim={}",
                self.n, self.dim
            )));
        }
        let mut rng = rng(self.seed);
        let beta = random_unit(self.dim, &mut rng);
        let n_in = round_half_up(self.in_rate * self.n as f64).clamp(1, self.n - 1);
        let mut origins: Vec<Origin> = (0..self.n)
            .map(|i| if i < n_in { Origin::In } else { Origin::Out })
            .collect();
        origins.shuffle(&mut rng);

        let mut features = Matrix::zeros(self.n, self.dim);
        for (i, o) in origins.iter().enumerate() {
            let sign = if *o == Origin::In { 1.0 } else { -1.0 };
            for (j, v) in features.row_mut(i).iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *v = sign * self.separation * beta[j] + z;
            }
        }
        let clean_scores: Vec<f64> = features.row_iter().map(|r| dot(r, &beta)).collect();
        let (lo, hi) = clean_scores
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| {
                (a.min(s), b.max(s))
            });
        let sigma = self.noise_ratio * (hi - lo);
        let noisy_scores = clean_scores
            .iter()
            .map(|s| s + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(LinearScoreSample {
            features,
            clean_scores,
            noisy_scores,
            origins,
            beta,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OodKind {
    /// Isotropic Gaussian blob centred at a random point `radius` away from
    /// the origin.
    Cluster {
        radius: f64,
        std: f64,
    },
    Noise(NoiseKind),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodSourceSpec {
    pub tag: String,
    pub kind: OodKind,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub input_dim: usize,
    pub classes: usize,
    pub hidden: Vec<usize>,
    /// Class means lie at this distance from the origin.
    pub class_radius: f64,
    pub class_std: f64,
    pub train_per_class: usize,
    /// In-distribution test pool size per class.
    pub pool_per_class: usize,
    pub ood: Vec<OodSourceSpec>,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            input_dim: 8,
            classes: 4,
            hidden: vec![32, 16],
            class_radius: 4.0,
            class_std: 1.0,
            train_per_class: 150,
            pool_per_class: 250,
            ood: vec![
                OodSourceSpec {
                    tag: "far_cluster".into(),
                    kind: OodKind::Cluster {
                        radius: 5.0,
                        std: 1.5,
                    },
                    count: 1000,
                },
                OodSourceSpec {
                    tag: "uniform_noise".into(),
                    kind: OodKind::Noise(NoiseKind::Uniform01),
                    count: 1000,
                },
            ],
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

/// A trained model with the pools it was evaluated on.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub model: Mlp,
    pub in_pool: Vec<FeatureRecord>,
    pub ood_pools: Vec<OodPool>,
    pub train_accuracy: f64,
}

pub const SYNTH_IN_TAG: &str = "synth_in";

fn annotate(
    model: &Mlp,
    inputs: Vec<Vec<f64>>,
    origin: Origin,
    tag: &str,
) -> Result<Vec<FeatureRecord>> {
    inputs
        .into_iter()
        .map(|x| {
            let (feature, logits) = model.forward_with_features(&x)?;
            let mut r = FeatureRecord::new(feature, Some(logits), origin, tag);
            r.input = Some(x);
            Ok(r)
        })
        .collect()
}

/// Trains the surrogate classifier and materialises in/out pools.
pub fn build_world(spec: &SynthSpec) -> Result<SynthWorld> {
    if spec.classes < 2 || spec.input_dim == 0 || spec.train_per_class == 0 {
        return Err(Error::InvalidArgument(
            "synthetic world needs >= 2 classes, positive input dim and training data".into(),
        ));
    }
    let mut r = rng(derive_seed(spec.seed, 0));
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            random_unit(spec.input_dim, &mut r)
                .into_iter()
                .map(|v| v * spec.class_radius)
                .collect()
        })
        .collect();
    let sample_class = |k: usize, r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        means[k]
            .iter()
            .map(|m| m + spec.class_std * r.sample::<f64, _>(StandardNormal))
            .collect()
    };

    let mut train = Vec::with_capacity(spec.classes * spec.train_per_class);
    for k in 0..spec.classes {
        for _ in 0..spec.train_per_class {
            train.push((sample_class(k, &mut r), k));
        }
    }
    let mut pool_inputs = Vec::with_capacity(spec.classes * spec.pool_per_class);
    for k in 0..spec.classes {
        for _ in 0..spec.pool_per_class {
            pool_inputs.push(sample_class(k, &mut r));
        }
    }

    let mut dims = vec![spec.input_dim];
    dims.extend(&spec.hidden);
    dims.push(spec.classes);
    let mut model = Mlp::new(&dims, derive_seed(spec.seed, 1))?;
    let train_cfg = TrainConfig {
        seed: derive_seed(spec.seed, 2),
        ..spec.train
    };
    model.train(&train, &train_cfg)?;
    let correct = train
        .iter()
        .map(|(x, y)| model.predict(x).map(|p| p == *y))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|&ok| ok)
        .count();

    let in_pool = annotate(&model, pool_inputs, Origin::In, SYNTH_IN_TAG)?;
    let mut ood_pools = Vec::with_capacity(spec.ood.len());
    for (i, src) in spec.ood.iter().enumerate() {
        let seed = derive_seed(spec.seed, 100 + i as u64);
        let inputs: Vec<Vec<f64>> = match &src.kind {
            OodKind::Cluster { radius, std } => {
                let mut r = rng(seed);
                let centre: Vec<f64> = random_unit(spec.input_dim, &mut r)
                    .into_iter()
                    .map(|v| v * radius)
                    .collect();
                (0..src.count)
                    .map(|_| {
                        centre
                            .iter()
                            .map(|c| c + std * r.sample::<f64, _>(StandardNormal))
                            .collect()
                    })
                    .collect()
            }
            OodKind::Noise(kind) => gen_noise_ood(*kind, spec.input_dim, src.count, seed)?
                .into_iter()
                .map(|r| r.feature)
                .collect(),
        };
        ood_pools.push(OodPool {
            tag: src.tag.clone(),
            records: annotate(&model, inputs, Origin::Out, &src.tag)?,
        });
    }

    Ok(SynthWorld {
        model,
        in_pool,
        ood_pools,
        train_accuracy: correct as f64 / train.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_is_deterministic_and_balanced() {
        let fam = LinearScoreFamily {
            n: 200,
            ..Default::default()
        };
        let a = fam.generate().unwrap();
        let b = fam.generate().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.origins.iter().filter(|o| **o == Origin::In).count(), 100);
        assert!((norm2(&a.beta) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }

    #[test]
    fn small_world_builds() {
        let spec = SynthSpec {
            train_per_class: 40,
            pool_per_class: 20,
            ood: vec![OodSourceSpec {
                tag: "noise".into(),
                kind: OodKind::Noise(NoiseKind::Uniform01),
                count: 30,
            }],
            train: TrainConfig {
                epochs: 20,
                ..Default::default()
            },
            ..Default::default()
        };
        let w = build_world(&spec).unwrap();
        assert_eq!(w.in_pool.len(), 80);
        assert_eq!(w.ood_pools[0].records.len(), 30);
        assert_eq!(w.in_pool[0].feature.len(), 16);
        assert_eq!(w.in_pool[0].logits.as_ref().unwrap().len(), 4);
        assert!(w.train_accuracy > 0.9, "accuracy {}", w.train_accuracy);
    }
}
