//! Base out-of-distribution scores computed from classifier logits.
//!
//! Every score is oriented so that a larger value means "more
//! in-distribution".

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::FeatureRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Msp,
    Energy,
    Kl,
    Odin,
}

impl ScorerKind {
    pub const ALL: [ScorerKind; 4] = [
        ScorerKind::Msp,
        ScorerKind::Energy,
        ScorerKind::Kl,
        ScorerKind::Odin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScorerKind::Msp => "msp",
            ScorerKind::Energy => "energy",
            ScorerKind::Kl => "kl",
            ScorerKind::Odin => "odin",
        }
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "msp" => Ok(ScorerKind::Msp),
            "energy" => Ok(ScorerKind::Energy),
            "kl" => Ok(ScorerKind::Kl),
            "odin" => Ok(ScorerKind::Odin),
            other => Err(Error::InvalidArgument(format!("unknown scorer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    pub temperature: f64,
    /// Perturbation magnitude, ODIN only.
    pub epsilon: f64,
}

impl ScorerConfig {
    /// Defaults: `T = 1` for MSP, energy and KL; `T = 1000, ε = 0` for ODIN.
    pub fn new(kind: ScorerKind) -> Self {
        let temperature = if kind == ScorerKind::Odin {
            1000.0
        } else {
            1.0
        };
        Self {
            kind,
            temperature,
            epsilon: 0.0,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_epsilon(mut self, eps: f64) -> Self {
        self.epsilon = eps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be nonnegative, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Short label used in result tables, e.g. `odin(T=1000,eps=0.0024)`.
    pub fn label(&self) -> String {
        let default = ScorerConfig::new(self.kind);
        let mut parts = Vec::new();
        if self.temperature != default.temperature {
            parts.push(format!("T={}", self.temperature));
        }
        if self.kind == ScorerKind::Odin && self.epsilon != 0.0 {
            parts.push(format!("eps={}", self.epsilon));
        }
        if parts.is_empty() {
            self.kind.to_string()
        } else {
            format!("{}({})", self.kind, parts.join(","))
        }
    }
}

/// A classifier whose logits can be differentiated with respect to its input.
pub trait DifferentiableClassifier {
    fn input_dim(&self) -> usize;

    fn num_classes(&self) -> usize;

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Gradient of `−log S_MSP(x)` at temperature `T`, with the predicted
    /// class held fixed.
    fn neg_log_msp_gradient(&self, _x: &[f64], _temperature: f64) -> Result<Vec<f64>> {
        Err(Error::Unsupported(
            "classifier does not provide input gradients".into(),
        ))
    }
}

fn check_logits(logits: &[f64], temperature: f64) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 logits, got {}",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite logit"));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

/// `(max_j f_j/T, log Σ exp(f_j/T))`.
fn scaled_max_and_logsumexp(logits: &[f64], temperature: f64) -> (f64, f64) {
    let m = logits
        .iter()
        .map(|f| f / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|f| (f / temperature - m).exp()).sum();
    (m, m + sum.ln())
}

/// Softmax of `logits / T`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let (_, lse) = scaled_max_and_logsumexp(logits, temperature);
    logits
        .iter()
        .map(|f| (f / temperature - lse).exp())
        .collect()
}

/// Maximum softmax probability at temperature `T`.
pub fn score_msp(logits: &[f64], temperature: f64) -> Result<f64> {
    check_logits(logits, temperature)?;
    let (m, _) = scaled_max_and_logsumexp(logits, temperature);
    let sum: f64 = logits.iter().map(|f| (f / temperature - m).exp()).sum();
    Ok(1.0 / sum)
}

/// Negative free energy `T · log Σ exp(f_i / T)`.
pub fn score_energy(logits: &[f64], temperature: f64) -> Result<f64> {
    check_logits(logits, temperature)?;
    let (_, lse) = scaled_max_and_logsumexp(logits, temperature);
    Ok(temperature * lse)
}

/// KL divergence of the uniform distribution from `softmax(f / T)`,
/// `logsumexp(f/T) − mean(f)/T − log C`.
pub fn score_kl(logits: &[f64], temperature: f64) -> Result<f64> {
    check_logits(logits, temperature)?;
    let c = logits.len() as f64;
    let mean = logits.iter().sum::<f64>() / c;
    // Centred first so that uniform logits give exactly zero.
    let centred: Vec<f64> = logits.iter().map(|f| f - mean).collect();
    let (_, lse) = scaled_max_and_logsumexp(&centred, temperature);
    Ok((lse - c.ln()).max(0.0))
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Input perturbed against the gradient of `−log S_MSP`:
/// `x̃ = x − ε · sign(∇ₓ(−log S_MSP(x)))`.
pub fn odin_perturb(
    x: &[f64],
    model: &dyn DifferentiableClassifier,
    temperature: f64,
    epsilon: f64,
) -> Result<Vec<f64>> {
    if epsilon == 0.0 {
        return Ok(x.to_vec());
    }
    let grad = model.neg_log_msp_gradient(x, temperature)?;
    Ok(x.iter()
        .zip(&grad)
        .map(|(xi, gi)| xi - epsilon * sign(*gi))
        .collect())
}

/// MSP of the perturbed input. No clipping is applied to `x̃`.
pub fn score_odin(
    x: &[f64],
    model: &dyn DifferentiableClassifier,
    temperature: f64,
    epsilon: f64,
) -> Result<f64> {
    if x.len() != model.input_dim() {
        return Err(Error::shape(format!(
            "model expects input of length {}, got {}",
            model.input_dim(),
            x.len()
        )));
    }
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be nonnegative, got {epsilon}"
        )));
    }
    let perturbed = odin_perturb(x, model, temperature, epsilon)?;
    score_msp(&model.logits(&perturbed)?, temperature)
}

/// Scores from logits alone. ODIN is only expressible here with `ε = 0`.
pub fn score_logits(logits: &[f64], cfg: &ScorerConfig) -> Result<f64> {
    match cfg.kind {
        ScorerKind::Msp => score_msp(logits, cfg.temperature),
        ScorerKind::Energy => score_energy(logits, cfg.temperature),
        ScorerKind::Kl => score_kl(logits, cfg.temperature),
        ScorerKind::Odin if cfg.epsilon == 0.0 => score_msp(logits, cfg.temperature),
        ScorerKind::Odin => Err(Error::Config(
            "ODIN with epsilon > 0 needs a differentiable model".into(),
        )),
    }
}

/// Applies the configured scorer to every record, preserving order.
///
/// ODIN with `ε > 0` perturbs the record's `input` (falling back to its
/// `feature`) through `model`; if no model is given but the record carries
/// `logits_perturbed`, MSP of those logits is used instead.
pub fn score_batch(
    records: &[FeatureRecord],
    cfg: &ScorerConfig,
    model: Option<&dyn DifferentiableClassifier>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if let Some(c) = records
        .first()
        .and_then(|r| r.logits.as_ref())
        .map(Vec::len)
    {
        if let Some(i) = records
            .iter()
            .position(|r| r.logits.as_ref().is_some_and(|l| l.len() != c))
        {
            return Err(Error::shape(format!(
                "record {i} has a different class count than record 0 ({c})"
            )));
        }
    }

    let needs_model = cfg.kind == ScorerKind::Odin && cfg.epsilon > 0.0;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if needs_model {
                match (model, &r.logits_perturbed) {
                    (Some(m), _) => {
                        let x = r.input.as_deref().unwrap_or(&r.feature);
                        score_odin(x, m, cfg.temperature, cfg.epsilon)
                    }
                    (None, Some(lp)) => score_msp(lp, cfg.temperature),
                    (None, None) => Err(Error::Config(format!(
                        "record {i}: ODIN with epsilon {} needs a model or perturbed logits",
                        cfg.epsilon
                    ))),
                }
            } else {
                let logits = match (&r.logits, model) {
                    (Some(l), _) => l.clone(),
                    (None, Some(m)) => m.logits(r.input.as_deref().unwrap_or(&r.feature))?,
                    (None, None) => {
                        return Err(Error::Config(format!(
                            "record {i}: scorer `{}` needs logits",
                            cfg.kind
                        )))
                    }
                };
                score_logits(&logits, cfg)
            }
        })
        .collect()
}
