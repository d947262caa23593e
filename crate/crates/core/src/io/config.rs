//! Flat `key = value` config files and experiment plans built from them.
//!
//! ```text
//! # comment
//! dataset = synthetic
//! scorers = msp, energy:T=2, odin:T=1000:eps=0.001
//! methods = none, dlr, rlr, online:32:256:all
//! ```
//!
//! Blank lines and `#` comments are ignored. Duplicate or unknown keys are
//! errors, so a typo never silently falls back to a default.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::calibrate::{PreprocessSpec, RlrConfig};
use crate::datasets::synthetic::{OodKind, OodSourceSpec, SynthSpec};
use crate::datasets::NoiseKind;
use crate::error::{Error, Result};
use crate::pipeline::{DatasetSpec, ExperimentPlan, Method, RepeatRule};
use crate::scorers::{ScorerConfig, ScorerKind};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                ))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries
                .insert(k.to_string(), v.trim().to_string())
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{k}`",
                    lineno + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Override (or add) a key, as a command-line flag does.
    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
            })
            .transpose()
    }

    pub fn flag(&self, key: &str) -> Result<Option<bool>> {
        self.get(key)
            .map(|v| match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                _ => Err(Error::Config(format!(
                    "`{key}`: expected a boolean, got `{v}`"
                ))),
            })
            .transpose()
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        self.get(key)
            .map(|v| {
                split_list(v)
                    .map(|item| {
                        item.parse::<T>().map_err(|e| {
                            Error::Config(format!("`{key}`: cannot parse `{item}`: {e}"))
                        })
                    })
                    .collect()
            })
            .transpose()
    }

    /// Rejects any key outside `allowed`.
    pub fn check_known(&self, allowed: &[&str]) -> Result<()> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(Error::Config(format!(
                "unknown key `{k}`; expected one of: {}",
                allowed.join(", ")
            ))),
            None => Ok(()),
        }
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// `msp`, `energy:T=2`, `odin:T=1000:eps=0.001`.
pub fn parse_scorer(s: &str) -> Result<ScorerConfig> {
    let mut parts = s.split(':').map(str::trim);
    let kind: ScorerKind = parts.next().unwrap_or_default().parse()?;
    let mut cfg = ScorerConfig::new(kind);
    for p in parts {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("scorer option `{p}` is not key=value")))?;
        let x: f64 = v
            .parse()
            .map_err(|_| Error::Config(format!("scorer option `{p}`: `{v}` is not a number")))?;
        match k {
            "T" | "t" | "temperature" => cfg.temperature = x,
            "eps" | "epsilon" if kind == ScorerKind::Odin => cfg.epsilon = x,
            _ => {
                return Err(Error::Config(format!(
                    "unknown option `{k}` for scorer `{kind}`"
                )))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `none`, `dlr`, `rlr`, `online:32:256:all` (one method per batch size).
/// RLR takes its settings from `rlr`.
pub fn parse_methods(s: &str, rlr: RlrConfig) -> Result<Vec<Method>> {
    let mut out = Vec::new();
    for item in split_list(s) {
        let mut parts = item.split(':').map(str::trim);
        match parts.next().unwrap_or_default() {
            "none" => out.push(Method::None),
            "dlr" => out.push(Method::Dlr),
            "rlr" => out.push(Method::Rlr(rlr)),
            "online" => {
                let sizes: Vec<&str> = parts.by_ref().collect();
                if sizes.is_empty() {
                    out.push(Method::Online(None));
                }
                for b in sizes {
                    out.push(Method::Online(parse_batch(b)?));
                }
            }
            other => return Err(Error::Config(format!("unknown method `{other}`"))),
        }
        if parts.next().is_some() {
            return Err(Error::Config(format!("method `{item}` takes no options")));
        }
    }
    Ok(out)
}

/// A batch size, or `all` for a single batch.
pub fn parse_batch(b: &str) -> Result<Option<usize>> {
    if b == "all" {
        return Ok(None);
    }
    match b.parse::<usize>() {
        Ok(n) if n > 0 => Ok(Some(n)),
        _ => Err(Error::Config(format!(
            "batch size must be a positive integer or `all`, got `{b}`"
        ))),
    }
}

/// `far_cluster`, `uniform_noise`, `gaussian_noise`.
fn synth_source(tag: &str, count: usize, sigma: f64) -> Result<OodSourceSpec> {
    let kind = match tag {
        "far_cluster" => OodKind::Cluster {
            radius: 5.0,
            std: 1.5,
        },
        "uniform_noise" => OodKind::Noise(NoiseKind::Uniform01),
        "gaussian_noise" => OodKind::Noise(NoiseKind::GaussianHalf { sigma }),
        other => {
            return Err(Error::Config(format!(
                "unknown synthetic OOD source `{other}`"
            )))
        }
    };
    Ok(OodSourceSpec {
        tag: tag.to_string(),
        kind,
        count,
    })
}

pub const PLAN_KEYS: &[&str] = &[
    "dataset",
    "synth.input_dim",
    "synth.classes",
    "synth.hidden",
    "synth.class_radius",
    "synth.class_std",
    "synth.train_per_class",
    "synth.pool_per_class",
    "synth.ood",
    "synth.ood_count",
    "synth.noise_sigma",
    "synth.epochs",
    "synth.seed",
    "in",
    "ood",
    "prepared",
    "model",
    "in_rate",
    "total",
    "ood_groups",
    "scorers",
    "methods",
    "rlr.lambda",
    "rlr.percentile",
    "prep.unit_norm",
    "prep.pca_dim",
    "prep.bias",
    "repeats",
    "seed",
    "sweep.in_rates",
    "sweep.counts",
    "sweep.budget",
    "sweep.cap",
];

#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    InRate(Vec<f64>),
    SampleCount(Vec<usize>, RepeatRule),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanConfig {
    pub plan: ExperimentPlan,
    pub sweep: Option<Sweep>,
}

pub fn synth_from_config(kv: &KeyValues) -> Result<SynthSpec> {
    let mut s = SynthSpec::default();
    let d = s.clone();
    s.input_dim = kv.parsed("synth.input_dim")?.unwrap_or(d.input_dim);
    s.classes = kv.parsed("synth.classes")?.unwrap_or(d.classes);
    s.hidden = kv.list("synth.hidden")?.unwrap_or(d.hidden);
    s.class_radius = kv.parsed("synth.class_radius")?.unwrap_or(d.class_radius);
    s.class_std = kv.parsed("synth.class_std")?.unwrap_or(d.class_std);
    s.train_per_class = kv
        .parsed("synth.train_per_class")?
        .unwrap_or(d.train_per_class);
    s.pool_per_class = kv
        .parsed("synth.pool_per_class")?
        .unwrap_or(d.pool_per_class);
    s.train.epochs = kv.parsed("synth.epochs")?.unwrap_or(d.train.epochs);
    s.seed = kv.parsed("synth.seed")?.unwrap_or(d.seed);
    let count = kv.parsed("synth.ood_count")?.unwrap_or(d.ood[0].count);
    let sigma = kv.parsed("synth.noise_sigma")?.unwrap_or(1.0);
    let tags: Vec<String> = kv
        .list("synth.ood")?
        .unwrap_or_else(|| d.ood.iter().map(|o| o.tag.clone()).collect());
    s.ood = tags
        .iter()
        .map(|t| synth_source(t, count, sigma))
        .collect::<Result<_>>()?;
    Ok(s)
}

pub fn prep_from_config(kv: &KeyValues) -> Result<PreprocessSpec> {
    let d = PreprocessSpec::default();
    Ok(PreprocessSpec {
        unit_normalize: kv.flag("prep.unit_norm")?.unwrap_or(d.unit_normalize),
        pca_dim: kv.parsed("prep.pca_dim")?.or(d.pca_dim),
        add_bias: kv.flag("prep.bias")?.unwrap_or(d.add_bias),
    })
}

pub fn rlr_from_config(kv: &KeyValues) -> Result<RlrConfig> {
    let d = RlrConfig::default();
    let cfg = RlrConfig {
        lambda: kv.parsed("rlr.lambda")?.unwrap_or(d.lambda),
        percentile: kv.parsed("rlr.percentile")?.unwrap_or(d.percentile),
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Builds a plan; relative paths resolve against `base_dir`.
pub fn plan_from_config(kv: &KeyValues, base_dir: &Path) -> Result<PlanConfig> {
    kv.check_known(PLAN_KEYS)?;
    let path = |key: &str| -> Result<PathBuf> {
        kv.get(key)
            .map(|p| base_dir.join(p))
            .ok_or_else(|| Error::Config(format!("missing `{key}`")))
    };
    let dataset = match kv.get("dataset").unwrap_or("synthetic") {
        "synthetic" => DatasetSpec::Synthetic(synth_from_config(kv)?),
        "imported" => DatasetSpec::Imported {
            in_path: path("in")?,
            ood_paths: split_list(kv.get("ood").unwrap_or_default())
                .map(|p| base_dir.join(p))
                .collect(),
        },
        "prepared" => DatasetSpec::Prepared(path("prepared")?),
        other => return Err(Error::Config(format!("unknown dataset kind `{other}`"))),
    };
    let mut plan = ExperimentPlan::new(dataset);
    plan.in_rate = kv.parsed("in_rate")?.unwrap_or(plan.in_rate);
    plan.total = kv.parsed("total")?.unwrap_or(plan.total);
    plan.repeats = kv.parsed("repeats")?.unwrap_or(plan.repeats);
    plan.seed = kv.parsed("seed")?.unwrap_or(plan.seed);
    plan.prep = prep_from_config(kv)?;
    plan.model = kv.get("model").map(|p| base_dir.join(p));
    if let Some(groups) = kv.get("ood_groups") {
        plan.ood_groups = groups
            .split(';')
            .map(str::trim)
            .filter(|g| !g.is_empty())
            .map(|g| g.split('+').map(|t| t.trim().to_string()).collect())
            .collect();
    }
    if let Some(s) = kv.get("scorers") {
        plan.scorers = split_list(s).map(parse_scorer).collect::<Result<_>>()?;
    }
    let rlr = rlr_from_config(kv)?;
    if let Some(m) = kv.get("methods") {
        plan.methods = parse_methods(m, rlr)?;
    }
    plan.validate()?;

    let rates: Option<Vec<f64>> = kv.list("sweep.in_rates")?;
    let counts: Option<Vec<usize>> = kv.list("sweep.counts")?;
    let d = RepeatRule::default();
    let rule = RepeatRule {
        budget: kv.parsed("sweep.budget")?.unwrap_or(d.budget),
        cap: kv.parsed("sweep.cap")?.unwrap_or(d.cap),
    };
    let sweep = match (rates, counts) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "set at most one of `sweep.in_rates` and `sweep.counts`".into(),
            ))
        }
        (Some(r), None) => Some(Sweep::InRate(r)),
        (None, Some(c)) => Some(Sweep::SampleCount(c, rule)),
        (None, None) => None,
    };
    Ok(PlanConfig { plan, sweep })
}
