//! End-to-end experiments: mix, score, calibrate, evaluate.
//!
//! An [`ExperimentPlan`] is a grid over OOD groups, scorers and methods,
//! repeated with reseeded mixes. Within a repeat every method sees exactly
//! the same mixed sample, so methods differ only in calibration.

mod diagnose;
mod sweep;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use diagnose::{diagnose_linearity, LinearityDiagnostics};
pub use sweep::{rate_grid, sweep_csv, sweep_in_rate, sweep_sample_count, RepeatRule, SweepPoint};

use crate::calibrate::{
    fit_dlr, fit_rlr, preprocess_fit, OnlineCalibrator, PreprocessSpec, RlrConfig,
};
use crate::datasets::synthetic::{build_world, SynthSpec, SYNTH_IN_TAG};
use crate::datasets::{
    feature_matrix, mix, origins, stream_indices, FeatureRecord, MixSpec, OodPool, StreamSpec,
};
use crate::error::{Error, Result};
use crate::io::{load_feature_set, ResultsRow, ResultsTable};
use crate::linalg::Matrix;
use crate::metrics::{evaluate, EvalReport, LabeledScores};
use crate::scorers::{score_batch, DifferentiableClassifier, ScorerConfig};
use crate::tinynet::Mlp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSpec {
    /// Gaussian clusters through a freshly trained network.
    Synthetic(SynthSpec),
    /// In-distribution container plus one container per OOD source, mixed
    /// per repeat.
    Imported {
        in_path: PathBuf,
        ood_paths: Vec<PathBuf>,
    },
    /// A single labelled container used as-is in every repeat.
    Prepared(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Method {
    /// Raw base scores.
    None,
    Dlr,
    Rlr(RlrConfig),
    /// Online regression over a seeded stream; `None` streams everything
    /// as one batch.
    Online(Option<usize>),
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::None => "none".into(),
            Method::Dlr => "dlr".into(),
            Method::Rlr(cfg) => {
                let d = RlrConfig::default();
                if cfg.lambda == d.lambda && cfg.percentile == d.percentile {
                    "rlr".into()
                } else {
                    format!("rlr(lambda={},p={})", cfg.lambda, cfg.percentile)
                }
            }
            Method::Online(Some(b)) => format!("online(b={b})"),
            Method::Online(None) => "online(b=all)".into(),
        }
    }

    pub fn calibrates(&self) -> bool {
        !matches!(self, Method::None)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub dataset: DatasetSpec,
    pub in_rate: f64,
    pub total: usize,
    /// Each group is one OOD condition, its sources mixed with equal weight.
    /// Empty means every source on its own.
    pub ood_groups: Vec<Vec<String>>,
    pub scorers: Vec<ScorerConfig>,
    pub methods: Vec<Method>,
    pub prep: PreprocessSpec,
    pub repeats: usize,
    /// Repeat `r` mixes and streams with seed `seed + r`.
    pub seed: u64,
    /// Classifier checkpoint for ODIN on imported or prepared data.
    pub model: Option<PathBuf>,
}

impl ExperimentPlan {
    pub fn new(dataset: DatasetSpec) -> Self {
        Self {
            dataset,
            in_rate: 0.5,
            total: 2000,
            ood_groups: Vec::new(),
            scorers: vec![ScorerConfig::new(crate::scorers::ScorerKind::Msp)],
            methods: vec![Method::None, Method::Dlr],
            prep: PreprocessSpec::default(),
            repeats: 1,
            seed: 0,
            model: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scorers.is_empty() || self.methods.is_empty() {
            return Err(Error::Config(
                "plan needs at least one scorer and one method".into(),
            ));
        }
        if self.repeats == 0 {
            return Err(Error::Config("plan repeats must be at least 1".into()));
        }
        if self.ood_groups.iter().any(Vec::is_empty) {
            return Err(Error::Config("empty OOD group in plan".into()));
        }
        for s in &self.scorers {
            s.validate()?;
        }
        for m in &self.methods {
            match m {
                Method::Rlr(cfg) => cfg.validate()?,
                Method::Online(Some(0)) => {
                    return Err(Error::Config("online batch size must be at least 1".into()))
                }
                _ => {}
            }
        }
        if !matches!(self.dataset, DatasetSpec::Prepared(_)) {
            MixSpec {
                in_rate: self.in_rate,
                total: self.total,
                seed: 0,
                ood_sources: vec![("_".into(), 1.0)],
            }
            .validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub in_dataset: String,
    pub ood_dataset: String,
    pub scorer: String,
    pub method: String,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.in_dataset, self.ood_dataset, self.scorer, self.method
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub key: CellKey,
    pub repeat: usize,
    pub n_samples: usize,
    /// Calibrating method with no more samples than regression dimensions.
    pub exact_fit: bool,
    pub report: EvalReport,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (`n − 1` denominator); 0 for one repeat.
    pub stdev: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stdev = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, stdev }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub key: CellKey,
    pub repeats: usize,
    pub exact_fit: bool,
    pub fpr95: Stat,
    pub auroc: Stat,
    pub aupr: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub cells: Vec<Cell>,
    /// One per distinct key, sorted by key.
    pub aggregates: Vec<Aggregate>,
    pub wall_seconds: f64,
}

impl RunResult {
    fn from_cells(cells: Vec<Cell>, wall_seconds: f64) -> Self {
        let mut groups: BTreeMap<&CellKey, Vec<&Cell>> = BTreeMap::new();
        for c in &cells {
            groups.entry(&c.key).or_default().push(c);
        }
        let aggregates = groups
            .into_iter()
            .map(|(key, cs)| {
                let pick = |f: fn(&EvalReport) -> f64| {
                    Stat::of(&cs.iter().map(|c| f(&c.report)).collect::<Vec<_>>())
                };
                Aggregate {
                    key: key.clone(),
                    repeats: cs.len(),
                    exact_fit: cs.iter().any(|c| c.exact_fit),
                    fpr95: pick(|r| r.fpr95),
                    auroc: pick(|r| r.auroc),
                    aupr: pick(|r| r.aupr),
                }
            })
            .collect();
        Self {
            cells,
            aggregates,
            wall_seconds,
        }
    }

    /// The timing-free summary table.
    pub fn table(&self) -> ResultsTable {
        ResultsTable::new(
            self.aggregates
                .iter()
                .map(|a| ResultsRow {
                    in_dataset: a.key.in_dataset.clone(),
                    ood_dataset: a.key.ood_dataset.clone(),
                    scorer: a.key.scorer.clone(),
                    method: a.key.method.clone(),
                    repeats: a.repeats,
                    fpr95: a.fpr95,
                    auroc: a.auroc,
                    aupr: a.aupr,
                })
                .collect(),
        )
    }
}

/// Everything a plan needs, loaded once.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub in_name: String,
    pub in_pool: Vec<FeatureRecord>,
    pub ood_pools: Vec<OodPool>,
    pub model: Option<Mlp>,
    /// Set for prepared data: the fixed mixture and its OOD label.
    pub prepared: Option<(Vec<FeatureRecord>, String)>,
}

pub fn load(dataset: &DatasetSpec) -> Result<LoadedData> {
    match dataset {
        DatasetSpec::Synthetic(spec) => {
            let world = build_world(spec)?;
            Ok(LoadedData {
                in_name: SYNTH_IN_TAG.into(),
                in_pool: world.in_pool,
                ood_pools: world.ood_pools,
                model: Some(world.model),
                prepared: None,
            })
        }
        DatasetSpec::Imported { in_path, ood_paths } => {
            let in_set = load_feature_set(in_path)?;
            let mut ood_pools = Vec::with_capacity(ood_paths.len());
            for p in ood_paths {
                let set = load_feature_set(p)?;
                let tag = set.name.clone();
                let mut records = set.into_records(crate::datasets::Origin::Out)?;
                records.iter_mut().for_each(|r| r.source_tag = tag.clone());
                ood_pools.push(OodPool { tag, records });
            }
            let in_name = in_set.name.clone();
            let mut in_pool = in_set.into_records(crate::datasets::Origin::In)?;
            in_pool
                .iter_mut()
                .for_each(|r| r.source_tag = in_name.clone());
            Ok(LoadedData {
                in_name,
                in_pool,
                ood_pools,
                model: None,
                prepared: None,
            })
        }
        DatasetSpec::Prepared(path) => {
            let set = load_feature_set(path)?;
            let in_name = set.name.clone();
            let ood_name = set.ood_name.clone().unwrap_or_else(|| "mixed".into());
            let records = set.into_labelled_records()?;
            Ok(LoadedData {
                in_name,
                in_pool: Vec::new(),
                ood_pools: Vec::new(),
                model: None,
                prepared: Some((records, ood_name)),
            })
        }
    }
}

/// Calibrated (or raw, for [`Method::None`]) scores for one cell.
pub fn calibrated_scores(
    features: &Matrix,
    scores: &[f64],
    method: &Method,
    prep: &PreprocessSpec,
    seed: u64,
) -> Result<Vec<f64>> {
    match method {
        Method::None => Ok(scores.to_vec()),
        Method::Dlr => fit_dlr(features, scores, prep)?.predict(features),
        Method::Rlr(cfg) => fit_rlr(features, scores, prep, cfg)?.0.predict(features),
        Method::Online(batch) => Ok(stream_calibrate(features, scores, prep, *batch, seed)?.0),
    }
}

/// Streams the samples in seeded batches of `batch` (all at once for
/// `None`), recording each sample's score as calibrated by the state after
/// its own batch. Returns those scores and the final calibrator.
pub fn stream_calibrate(
    features: &Matrix,
    scores: &[f64],
    prep: &PreprocessSpec,
    batch: Option<usize>,
    seed: u64,
) -> Result<(Vec<f64>, OnlineCalibrator)> {
    // The preprocessor is fitted on the whole set; without PCA it is
    // stateless and this is exactly the streaming computation.
    let mut calibrator = OnlineCalibrator::new(preprocess_fit(features, prep)?)?;
    let out = stream_into(&mut calibrator, features, scores, batch, seed)?;
    Ok((out, calibrator))
}

/// Continues streaming into an existing calibrator.
pub fn stream_into(
    calibrator: &mut OnlineCalibrator,
    features: &Matrix,
    scores: &[f64],
    batch: Option<usize>,
    seed: u64,
) -> Result<Vec<f64>> {
    if features.rows() != scores.len() {
        return Err(Error::shape(format!(
            "{} feature rows, {} scores",
            features.rows(),
            scores.len()
        )));
    }
    let spec = StreamSpec {
        batch_size: batch,
        seed,
    };
    let mut out = vec![0.0; scores.len()];
    for idx in stream_indices(scores.len(), &spec)? {
        let batch_scores: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let calibrated = calibrator.update(&features.select_rows(&idx), &batch_scores)?;
        for (i, s) in idx.into_iter().zip(calibrated) {
            out[i] = s;
        }
    }
    Ok(out)
}

fn processed_dim(features: &Matrix, prep: &PreprocessSpec) -> usize {
    prep.pca_dim.unwrap_or(features.cols()) + prep.add_bias as usize
}

struct Condition {
    ood_name: String,
    records: Vec<FeatureRecord>,
}

fn conditions(plan: &ExperimentPlan, data: &LoadedData, seed: u64) -> Result<Vec<Condition>> {
    if let Some((records, ood_name)) = &data.prepared {
        return Ok(vec![Condition {
            ood_name: ood_name.clone(),
            records: records.clone(),
        }]);
    }
    let groups: Vec<Vec<String>> = if plan.ood_groups.is_empty() {
        data.ood_pools.iter().map(|p| vec![p.tag.clone()]).collect()
    } else {
        plan.ood_groups.clone()
    };
    if groups.is_empty() {
        return Err(Error::Config("no OOD sources available".into()));
    }
    groups
        .into_iter()
        .map(|g| {
            let spec = MixSpec {
                in_rate: plan.in_rate,
                total: plan.total,
                seed,
                ood_sources: MixSpec::uniform_sources(&g),
            };
            Ok(Condition {
                ood_name: g.join("+"),
                records: mix(&data.in_pool, &data.ood_pools, &spec)?,
            })
        })
        .collect()
}

/// [`load`] plus the plan's model checkpoint, if any.
pub fn load_plan_data(plan: &ExperimentPlan) -> Result<LoadedData> {
    let mut data = load(&plan.dataset)?;
    if let Some(path) = &plan.model {
        data.model = Some(crate::io::load_mlp(path)?);
    }
    Ok(data)
}

pub fn run(plan: &ExperimentPlan) -> Result<RunResult> {
    plan.validate()?;
    let data = load_plan_data(plan)?;
    run_loaded(plan, &data)
}

/// [`run`] on data that has already been loaded, e.g. across a sweep.
pub fn run_loaded(plan: &ExperimentPlan, data: &LoadedData) -> Result<RunResult> {
    plan.validate()?;
    let start = Instant::now();
    let model = data
        .model
        .as_ref()
        .map(|m| m as &dyn DifferentiableClassifier);
    let mut cells = Vec::new();
    for repeat in 0..plan.repeats {
        let seed = plan.seed.wrapping_add(repeat as u64);
        for cond in conditions(plan, data, seed)? {
            let features = feature_matrix(&cond.records)?;
            let labels = origins(&cond.records);
            let exact_fit = cond.records.len() <= processed_dim(&features, &plan.prep);
            for scorer in &plan.scorers {
                let scores = score_batch(&cond.records, scorer, model).map_err(|e| {
                    Error::Config(format!(
                        "cell {}/{}/{}: {e}",
                        data.in_name,
                        cond.ood_name,
                        scorer.label()
                    ))
                })?;
                for method in &plan.methods {
                    let key = CellKey {
                        in_dataset: data.in_name.clone(),
                        ood_dataset: cond.ood_name.clone(),
                        scorer: scorer.label(),
                        method: method.label(),
                    };
                    let t0 = Instant::now();
                    let calibrated =
                        calibrated_scores(&features, &scores, method, &plan.prep, seed)?;
                    let report = evaluate(&LabeledScores::new(calibrated, labels.clone())?)?;
                    cells.push(Cell {
                        key,
                        repeat,
                        n_samples: cond.records.len(),
                        exact_fit: method.calibrates() && exact_fit,
                        report,
                        wall_seconds: t0.elapsed().as_secs_f64(),
                    });
                }
            }
        }
    }
    Ok(RunResult::from_cells(cells, start.elapsed().as_secs_f64()))
}
