//! Records, synthetic generators, in/out mixing and stream batching.
//!
//! Every generator is a pure function of its spec and seed. Randomness comes
//! from ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`), a portable
//! generator whose output stream does not depend on the platform.

pub mod synthetic;

use std::fmt;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SymmetricEigen};

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Ground-truth origin of a sample. In-distribution is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    In,
    Out,
}

impl Origin {
    /// Container label code: in = 0, out = 1.
    pub fn code(self) -> u8 {
        match self {
            Origin::In => 0,
            Origin::Out => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Origin::In),
            1 => Ok(Origin::Out),
            other => Err(Error::invalid(format!(
                "label code {other} is neither 0 (in) nor 1 (out)"
            ))),
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::In => "in",
            Origin::Out => "out",
        })
    }
}

/// One sample: penultimate feature `z`, optional logits `f`, origin label
/// and the name of the dataset it was drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub feature: Vec<f64>,
    pub logits: Option<Vec<f64>>,
    pub origin: Origin,
    pub source_tag: String,
    /// Raw model input, when the record was produced by an in-repo model.
    pub input: Option<Vec<f64>>,
    /// Logits of an input perturbed upstream (ODIN exports).
    pub logits_perturbed: Option<Vec<f64>>,
}

impl FeatureRecord {
    pub fn new(
        feature: Vec<f64>,
        logits: Option<Vec<f64>>,
        origin: Origin,
        source_tag: impl Into<String>,
    ) -> Self {
        Self {
            feature,
            logits,
            origin,
            source_tag: source_tag.into(),
            input: None,
            logits_perturbed: None,
        }
    }
}

/// Feature rows stacked into a matrix.
pub fn feature_matrix(records: &[FeatureRecord]) -> Result<Matrix> {
    if records.is_empty() {
        return Ok(Matrix::zeros(0, 0));
    }
    let rows: Vec<&[f64]> = records.iter().map(|r| r.feature.as_slice()).collect();
    Matrix::from_rows(&rows)
}

pub fn origins(records: &[FeatureRecord]) -> Vec<Origin> {
    records.iter().map(|r| r.origin).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianCluster {
    pub mean: Vec<f64>,
    /// Symmetric positive semidefinite.
    pub covariance: Matrix,
    pub count: usize,
    pub origin: Origin,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub clusters: Vec<GaussianCluster>,
    pub seed: u64,
}

/// Square root factor `L` with `L Lᵀ = Σ` for a PSD covariance.
fn psd_factor(cov: &Matrix, dim: usize) -> Result<Matrix> {
    if cov.shape() != (dim, dim) {
        return Err(Error::shape(format!(
            "covariance is {}x{}, mean has length {dim}",
            cov.rows(),
            cov.cols()
        )));
    }
    let asym = cov.sub(&cov.transpose())?.max_abs();
    let scale = cov.max_abs().max(1.0);
    if asym > 1e-12 * scale {
        return Err(Error::invalid("covariance is not symmetric"));
    }
    let eig = SymmetricEigen::new(cov)?;
    let floor = -1e-12 * scale;
    if eig.values.iter().any(|&v| v < floor) {
        return Err(Error::invalid("covariance is not positive semidefinite"));
    }
    let roots: Vec<f64> = eig.values.iter().map(|v| v.max(0.0).sqrt()).collect();
    Ok(Matrix::from_fn(dim, dim, |i, j| {
        eig.vectors[(i, j)] * roots[j]
    }))
}

/// Seeded draws from each cluster, in cluster order.
pub fn gen_gaussian_clusters(spec: &ClusterSpec) -> Result<Vec<FeatureRecord>> {
    let mut rng = rng(spec.seed);
    let mut out = Vec::with_capacity(spec.clusters.iter().map(|c| c.count).sum());
    for cluster in &spec.clusters {
        let d = cluster.mean.len();
        let factor = psd_factor(&cluster.covariance, d)?;
        for _ in 0..cluster.count {
            let noise: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let mut x = cluster.mean.clone();
            for (i, xi) in x.iter_mut().enumerate() {
                *xi += crate::linalg::dot(factor.row(i), &noise);
            }
            out.push(FeatureRecord::new(
                x,
                None,
                cluster.origin,
                cluster.tag.clone(),
            ));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseKind {
    /// Uniform on `[0, 1]^dim`.
    Uniform01,
    /// `N(0.5, σ²)` per coordinate, clipped to `[0, 1]`.
    GaussianHalf { sigma: f64 },
}

impl NoiseKind {
    pub fn tag(&self) -> &'static str {
        match self {
            NoiseKind::Uniform01 => "uniform_noise",
            NoiseKind::GaussianHalf { .. } => "gaussian_noise",
        }
    }
}

/// Noise inputs labelled out-of-distribution.
pub fn gen_noise_ood(
    kind: NoiseKind,
    dim: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<FeatureRecord>> {
    if count == 0 || dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "noise generator needs positive count and dim, got count={count} dim={dim}"
        )));
    }
    if let NoiseKind::GaussianHalf { sigma } = kind {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise sigma must be nonnegative, got {sigma}"
            )));
        }
    }
    let mut rng = rng(seed);
    Ok((0..count)
        .map(|_| {
            let x: Vec<f64> = (0..dim)
                .map(|_| match kind {
                    NoiseKind::Uniform01 => rng.random::<f64>(),
                    NoiseKind::GaussianHalf { sigma } => {
                        let z: f64 = rng.sample(StandardNormal);
                        (0.5 + sigma * z).clamp(0.0, 1.0)
                    }
                })
                .collect();
            FeatureRecord::new(x, None, Origin::Out, kind.tag())
        })
        .collect())
}

/// A named pool of out-of-distribution records.
#[derive(Debug, Clone, PartialEq)]
pub struct OodPool {
    pub tag: String,
    pub records: Vec<FeatureRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    /// Fraction of in-distribution samples, strictly between 0 and 1.
    pub in_rate: f64,
    pub total: usize,
    pub seed: u64,
    /// `(source tag, weight)`; weights sum to 1.
    pub ood_sources: Vec<(String, f64)>,
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.in_rate > 0.0 && self.in_rate < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "in_rate must lie strictly between 0 and 1, got {}",
                self.in_rate
            )));
        }
        if self.total < 2 {
            return Err(Error::InvalidArgument(format!(
                "mix total must be at least 2, got {}",
                self.total
            )));
        }
        if self.ood_sources.is_empty() {
            return Err(Error::InvalidArgument(
                "mix needs at least one OOD source".into(),
            ));
        }
        if self
            .ood_sources
            .iter()
            .any(|(_, w)| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::InvalidArgument(
                "OOD weights must be nonnegative".into(),
            ));
        }
        let sum: f64 = self.ood_sources.iter().map(|(_, w)| w).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "OOD weights sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    /// `round(in_rate · total)` with halves rounded up.
    pub fn in_count(&self) -> usize {
        round_half_up(self.in_rate * self.total as f64).min(self.total)
    }

    /// Per-source OOD counts (largest-remainder split of the complement).
    pub fn out_counts(&self) -> Vec<usize> {
        let n_out = self.total - self.in_count();
        let exact: Vec<f64> = self
            .ood_sources
            .iter()
            .map(|(_, w)| w * n_out as f64)
            .collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut left = n_out - counts.iter().sum::<usize>().min(n_out);
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &k in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[k] += 1;
            left -= 1;
        }
        counts
    }

    /// Equal weights over the given tags.
    pub fn uniform_sources<S: AsRef<str>>(tags: &[S]) -> Vec<(String, f64)> {
        let w = 1.0 / tags.len() as f64;
        tags.iter().map(|t| (t.as_ref().to_string(), w)).collect()
    }
}

pub(crate) fn round_half_up(x: f64) -> usize {
    // Nudge values like 2.4999999999999996 produced by p·n/100 arithmetic.
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

fn draw(
    pool: &[FeatureRecord],
    tag: &str,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<FeatureRecord>> {
    if k > pool.len() {
        return Err(Error::InsufficientData {
            pool: tag.to_string(),
            requested: k,
            available: pool.len(),
        });
    }
    let mut picked = index::sample(rng, pool.len(), k).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| pool[i].clone()).collect())
}

/// Samples `round(in_rate · total)` in-records and the remainder from the
/// OOD pools by weight, without replacement, then shuffles the result.
pub fn mix(
    in_set: &[FeatureRecord],
    out_sets: &[OodPool],
    spec: &MixSpec,
) -> Result<Vec<FeatureRecord>> {
    spec.validate()?;
    let mut rng = rng(spec.seed);
    let mut out = draw(in_set, "in", spec.in_count(), &mut rng)?;
    for ((tag, _), k) in spec.ood_sources.iter().zip(spec.out_counts()) {
        let pool = out_sets
            .iter()
            .find(|p| &p.tag == tag)
            .ok_or_else(|| Error::Config(format!("no OOD pool named `{tag}`")))?;
        out.extend(draw(&pool.records, tag, k, &mut rng)?);
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSpec {
    /// `None` means one batch holding everything.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl StreamSpec {
    pub fn new(batch_size: usize, seed: u64) -> Self {
        Self {
            batch_size: Some(batch_size),
            seed,
        }
    }

    pub fn full(seed: u64) -> Self {
        Self {
            batch_size: None,
            seed,
        }
    }
}

/// Seeded permutation of `0..n` cut into contiguous batches; the final
/// batch may be short.
pub fn stream_indices(n: usize, spec: &StreamSpec) -> Result<Vec<Vec<usize>>> {
    let size = match spec.batch_size {
        Some(0) => {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".into(),
            ))
        }
        Some(b) => b,
        None => n.max(1),
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(spec.seed));
    Ok(order.chunks(size).map(<[usize]>::to_vec).collect())
}

pub fn stream(records: &[FeatureRecord], spec: &StreamSpec) -> Result<Vec<Vec<FeatureRecord>>> {
    Ok(stream_indices(records.len(), spec)?
        .into_iter()
        .map(|b| b.into_iter().map(|i| records[i].clone()).collect())
        .collect())
}
