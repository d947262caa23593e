//! The `etlt` command line.
//!
//! Every subcommand reads optional defaults from `--config FILE` (flat
//! `key = value`); explicit flags win. Exit codes: 0 success, 1 usage or
//! configuration error, 2 data error.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser, Subcommand};

use crate::calibrate::{fit_dlr, fit_rlr, RegressionModel};
use crate::datasets::synthetic::{build_world, SYNTH_IN_TAG};
use crate::datasets::{mix, MixSpec, Origin};
use crate::error::{Error, Result};
use crate::io::config::{
    parse_batch, plan_from_config, prep_from_config, rlr_from_config, synth_from_config, Sweep,
};
use crate::io::dataset::{meta_section, parse_meta};
use crate::io::{
    load_mlp, load_model, load_online, parse_scorer, read_container, save_feature_set, save_mlp,
    save_online, write_atomic, write_container, Container, FeatureSet, KeyValues, ResultsRow,
    ResultsTable, Section,
};
use crate::metrics::{evaluate, LabeledScores};
use crate::pipeline::{
    diagnose_linearity, run, stream_calibrate, stream_into, sweep_csv, sweep_in_rate,
    sweep_sample_count, Method, Stat,
};
use crate::scorers::score_batch;

#[derive(Debug, Parser)]
#[command(
    name = "etlt",
    version,
    about = "Test-time linear rectification of OOD scores"
)]
pub struct Cli {
    /// Flat key = value file supplying defaults for any flag.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (mixing, streaming, synthesis).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a small classifier on Gaussian clusters and write its feature
    /// containers: in.etlt, ood_<tag>.etlt, mixed.etlt and model.etlt.
    Synth {
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// In-distribution fraction of mixed.etlt.
        #[arg(long)]
        in_rate: Option<f64>,
        /// Sample count of mixed.etlt.
        #[arg(long)]
        total: Option<usize>,
    },
    /// Compute base OOD scores into a copy of a container.
    Score {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// msp, energy, kl or odin.
        #[arg(long)]
        scorer: Option<String>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Classifier checkpoint, needed by odin unless `logits_perturbed` is present.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Fit a linear score regression and write rectified scores.
    Calibrate {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// dlr or rlr.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        percentile: Option<f64>,
        #[arg(long)]
        pca_dim: Option<usize>,
        #[arg(long)]
        unit_norm: Option<bool>,
        #[arg(long)]
        bias: Option<bool>,
        /// Save the fitted model here.
        #[arg(long)]
        save_model: Option<PathBuf>,
        /// Apply a saved model instead of fitting.
        #[arg(long, conflicts_with_all = ["method", "lambda", "percentile", "pca_dim", "unit_norm", "bias"])]
        load_model: Option<PathBuf>,
    },
    /// Stream samples through the online regression in seeded batches.
    Stream {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Positive integer or `all`.
        #[arg(long)]
        batch_size: Option<String>,
        #[arg(long)]
        pca_dim: Option<usize>,
        #[arg(long)]
        unit_norm: Option<bool>,
        #[arg(long)]
        bias: Option<bool>,
        /// Write the final online state here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from a saved online state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate scores against labels; writes <prefix>.csv and <prefix>.json.
    Eval {
        inputs: Vec<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run an experiment plan; writes <prefix>.csv, <prefix>.json and
    /// <prefix>.cells.json (plus <prefix>.sweep.csv for sweeps).
    Run {
        plan: PathBuf,
        /// Output prefix; defaults to the plan path without its extension.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Linearity plot data: principal coordinates, scores and fitted scores.
    Diagnose {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
}

/// Keys any subcommand may read from `--config`.
const CLI_KEYS: &[&str] = &[
    "scorer",
    "temperature",
    "epsilon",
    "model",
    "method",
    "rlr.lambda",
    "rlr.percentile",
    "prep.pca_dim",
    "prep.unit_norm",
    "prep.bias",
    "batch_size",
    "in_rate",
    "total",
    "seed",
];

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    let _ = e.print();
                    eprintln!("\n{}", Cli::command().render_help());
                    1
                }
            };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}

fn config(cli: &Cli) -> Result<KeyValues> {
    let mut kv = match &cli.config {
        Some(path) => {
            let kv = KeyValues::load(path)?;
            if let Some(k) = kv
                .keys()
                .find(|k| !CLI_KEYS.contains(k) && !k.starts_with("synth."))
            {
                return Err(Error::Config(format!(
                    "unknown key `{k}` in {}",
                    path.display()
                )));
            }
            kv
        }
        None => KeyValues::default(),
    };
    if let Some(seed) = cli.seed {
        kv.set("seed", seed.to_string());
    }
    Ok(kv)
}

fn set_opt<T: ToString>(kv: &mut KeyValues, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        kv.set(key, v.to_string());
    }
}

fn seed_of(kv: &KeyValues) -> Result<u64> {
    Ok(kv.parsed("seed")?.unwrap_or(0))
}

fn set_meta(c: &mut Container, key: &str, value: &str) -> Result<()> {
    let mut meta = c
        .get("meta")
        .map(parse_meta)
        .transpose()?
        .unwrap_or_default();
    meta.insert(key.to_string(), value.to_string());
    c.upsert(meta_section(&meta)?);
    Ok(())
}

fn load_with_container(path: &Path) -> Result<(Container, FeatureSet)> {
    let c = read_container(path)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    let set = FeatureSet::from_container(&c, stem)?;
    Ok((c, set))
}

fn require_scores(set: &FeatureSet, path: &Path) -> Result<Vec<f64>> {
    set.scores.clone().ok_or_else(|| {
        Error::invalid(format!(
            "{} has no `scores` section; run `etlt score` first",
            path.display()
        ))
    })
}

/// Scores to rectify: `base_scores` if the file was already rectified.
fn base_scores(c: &Container, set: &FeatureSet, path: &Path) -> Result<Vec<f64>> {
    match c.get("base_scores") {
        Some(s) => {
            let v = s.to_f64()?;
            if v.len() != set.len() {
                return Err(Error::shape(format!(
                    "{} base scores for {} rows",
                    v.len(),
                    set.len()
                )));
            }
            Ok(v)
        }
        None => require_scores(set, path),
    }
}

fn require_labels(set: &FeatureSet, path: &Path) -> Result<Vec<Origin>> {
    set.labels
        .clone()
        .ok_or_else(|| Error::invalid(format!("{} has no `labels` section", path.display())))
}

/// Writes `scores` into a copy of `c`, keeping the previous scores as
/// `base_scores` the first time.
fn write_rectified(mut c: Container, scores: &[f64], method: &str, output: &Path) -> Result<()> {
    if c.get("base_scores").is_none() {
        if let Some(old) = c.remove("scores") {
            c.push(Section::new("base_scores", old.dims.clone(), old.payload)?)?;
        }
    }
    c.upsert(Section::vector("scores", scores)?);
    set_meta(&mut c, "method", method)?;
    write_container(output, &c)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn execute(cli: &Cli) -> Result<()> {
    let mut kv = config(cli)?;
    match &cli.command {
        Command::Synth {
            out,
            in_rate,
            total,
        } => {
            set_opt(&mut kv, "in_rate", in_rate);
            set_opt(&mut kv, "total", total);
            let seed = seed_of(&kv)?;
            if kv.get("synth.seed").is_none() {
                kv.set("synth.seed", seed.to_string());
            }
            let spec = synth_from_config(&kv)?;
            let world = build_world(&spec)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            save_feature_set(
                out.join("in.etlt"),
                &FeatureSet::from_records(SYNTH_IN_TAG, &world.in_pool)?,
            )?;
            for pool in &world.ood_pools {
                save_feature_set(
                    out.join(format!("ood_{}.etlt", pool.tag)),
                    &FeatureSet::from_records(pool.tag.clone(), &pool.records)?,
                )?;
            }
            let tags: Vec<&str> = world.ood_pools.iter().map(|p| p.tag.as_str()).collect();
            let spec = MixSpec {
                in_rate: kv.parsed("in_rate")?.unwrap_or(0.5),
                total: kv.parsed("total")?.unwrap_or(1000),
                seed,
                ood_sources: MixSpec::uniform_sources(&tags),
            };
            let mut mixed = FeatureSet::from_records(
                SYNTH_IN_TAG,
                &mix(&world.in_pool, &world.ood_pools, &spec)?,
            )?;
            mixed.ood_name = Some(tags.join("+"));
            save_feature_set(out.join("mixed.etlt"), &mixed)?;
            save_mlp(out.join("model.etlt"), &world.model)?;
            println!(
                "wrote {} (train accuracy {:.4})",
                out.display(),
                world.train_accuracy
            );
        }
        Command::Score {
            input,
            output,
            scorer,
            temperature,
            epsilon,
            model,
        } => {
            set_opt(&mut kv, "scorer", scorer);
            set_opt(&mut kv, "temperature", temperature);
            set_opt(&mut kv, "epsilon", epsilon);
            if let Some(m) = model {
                kv.set("model", m.display().to_string());
            }
            let mut spec = kv.get("scorer").unwrap_or("msp").to_string();
            if let Some(t) = kv.get("temperature") {
                spec.push_str(&format!(":T={t}"));
            }
            if let Some(e) = kv.get("epsilon") {
                spec.push_str(&format!(":eps={e}"));
            }
            let cfg = parse_scorer(&spec).map_err(|e| match e {
                Error::Config(m) => Error::InvalidArgument(m),
                other => other,
            })?;
            let mlp = kv.get("model").map(load_mlp).transpose()?;
            let (mut c, set) = load_with_container(input)?;
            let set_name = set.name.clone();
            let records = set.into_records(Origin::In)?;
            let scores = score_batch(
                &records,
                &cfg,
                mlp.as_ref()
                    .map(|m| m as &dyn crate::scorers::DifferentiableClassifier),
            )?;
            c.upsert(Section::vector("scores", &scores)?);
            c.remove("base_scores");
            set_meta(&mut c, "name", &set_name)?;
            set_meta(&mut c, "scorer", &cfg.label())?;
            set_meta(&mut c, "method", "none")?;
            write_container(output, &c)?;
        }
        Command::Calibrate {
            input,
            output,
            method,
            lambda,
            percentile,
            pca_dim,
            unit_norm,
            bias,
            save_model: save_to,
            load_model: load_from,
        } => {
            set_opt(&mut kv, "method", method);
            set_opt(&mut kv, "rlr.lambda", lambda);
            set_opt(&mut kv, "rlr.percentile", percentile);
            set_opt(&mut kv, "prep.pca_dim", pca_dim);
            set_opt(&mut kv, "prep.unit_norm", unit_norm);
            set_opt(&mut kv, "prep.bias", bias);
            let (c, set) = load_with_container(input)?;
            let scores = base_scores(&c, &set, input)?;
            let (model, label): (RegressionModel, String) = if let Some(path) = load_from {
                let meta = read_container(path)?
                    .get("meta")
                    .map(parse_meta)
                    .transpose()?
                    .unwrap_or_default();
                let label = meta.get("method").cloned().unwrap_or_else(|| "dlr".into());
                (load_model(path)?, label)
            } else {
                let prep = prep_from_config(&kv)?;
                match kv.get("method").unwrap_or("dlr") {
                    "dlr" => (fit_dlr(&set.features, &scores, &prep)?, Method::Dlr.label()),
                    "rlr" => {
                        let cfg = rlr_from_config(&kv)?;
                        (
                            fit_rlr(&set.features, &scores, &prep, &cfg)?.0,
                            Method::Rlr(cfg).label(),
                        )
                    }
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "unknown method `{other}`; use dlr or rlr (or `etlt stream` for online)"
                        )))
                    }
                }
            };
            let calibrated = model.predict(&set.features)?;
            if let Some(path) = save_to {
                let mut mc = crate::io::checkpoint::model_to_container(&model)?;
                set_meta(&mut mc, "method", &label)?;
                write_container(path, &mc)?;
            }
            write_rectified(c, &calibrated, &label, output)?;
        }
        Command::Stream {
            input,
            output,
            batch_size,
            pca_dim,
            unit_norm,
            bias,
            checkpoint,
            resume,
        } => {
            set_opt(&mut kv, "batch_size", batch_size);
            set_opt(&mut kv, "prep.pca_dim", pca_dim);
            set_opt(&mut kv, "prep.unit_norm", unit_norm);
            set_opt(&mut kv, "prep.bias", bias);
            let batch = parse_batch(kv.get("batch_size").unwrap_or("all"))?;
            let seed = seed_of(&kv)?;
            let (c, set) = load_with_container(input)?;
            let scores = base_scores(&c, &set, input)?;
            let (calibrated, calibrator) = match resume {
                Some(path) => {
                    let mut calibrator = load_online(path)?;
                    let out = stream_into(&mut calibrator, &set.features, &scores, batch, seed)?;
                    (out, calibrator)
                }
                None => {
                    stream_calibrate(&set.features, &scores, &prep_from_config(&kv)?, batch, seed)?
                }
            };
            if let Some(path) = checkpoint {
                save_online(path, &calibrator)?;
            }
            write_rectified(c, &calibrated, &Method::Online(batch).label(), output)?;
        }
        Command::Eval { inputs, output } => {
            if inputs.is_empty() {
                return Err(Error::InvalidArgument(
                    "eval needs at least one input".into(),
                ));
            }
            let mut rows = Vec::new();
            for path in inputs {
                let (c, set) = load_with_container(path)?;
                let meta = c
                    .get("meta")
                    .map(parse_meta)
                    .transpose()?
                    .unwrap_or_default();
                let scores = require_scores(&set, path)?;
                let labels = require_labels(&set, path)?;
                let r = evaluate(&LabeledScores::new(scores, labels)?)?;
                let stat = |x: f64| Stat::of(&[x]);
                rows.push(ResultsRow {
                    in_dataset: set.name.clone(),
                    ood_dataset: set.ood_name.clone().unwrap_or_else(|| "mixed".into()),
                    scorer: meta
                        .get("scorer")
                        .cloned()
                        .unwrap_or_else(|| "unknown".into()),
                    method: meta.get("method").cloned().unwrap_or_else(|| "none".into()),
                    repeats: 1,
                    fpr95: stat(r.fpr95),
                    auroc: stat(r.auroc),
                    aupr: stat(r.aupr),
                });
            }
            let table = ResultsTable::new(rows);
            if let Some(prefix) = output {
                table.write(prefix)?;
            }
            let _ = std::io::stdout().write_all(table.to_csv().as_bytes());
        }
        Command::Run {
            plan,
            output,
            repeats,
        } => {
            let mut pkv = KeyValues::load(plan)?;
            if let Some(seed) = cli.seed {
                pkv.set("seed", seed.to_string());
            }
            set_opt(&mut pkv, "repeats", repeats);
            let base = plan.parent().unwrap_or(Path::new("."));
            let cfg = plan_from_config(&pkv, base)?;
            let prefix = output.clone().unwrap_or_else(|| plan.with_extension(""));
            match &cfg.sweep {
                None => {
                    let result = run(&cfg.plan)?;
                    result.table().write(&prefix)?;
                    let cells =
                        serde_json::to_string_pretty(&result).expect("run result serializes");
                    write_atomic(&with_suffix(&prefix, ".cells.json"), cells.as_bytes())?;
                    let _ = std::io::stdout().write_all(result.table().to_csv().as_bytes());
                }
                Some(sweep) => {
                    let (param, points) = match sweep {
                        Sweep::InRate(rates) => ("in_rate", sweep_in_rate(&cfg.plan, rates)?),
                        Sweep::SampleCount(counts, rule) => {
                            ("total", sweep_sample_count(&cfg.plan, counts, rule)?)
                        }
                    };
                    write_atomic(
                        &with_suffix(&prefix, ".sweep.csv"),
                        sweep_csv(param, &points).as_bytes(),
                    )?;
                    println!(
                        "wrote {} sweep points to {}",
                        points.len(),
                        with_suffix(&prefix, ".sweep.csv").display()
                    );
                }
            }
        }
        Command::Diagnose { input, output } => {
            let set = crate::io::load_feature_set(input)?;
            let scores = require_scores(&set, input)?;
            let labels = require_labels(&set, input)?;
            let d = diagnose_linearity(&set.features, &scores, &labels)?;
            write_atomic(output, d.plot_csv().as_bytes())?;
            let summary = serde_json::json!({
                "r_squared": d.r_squared,
                "separability": d.separability,
                "plane": d.plane,
                "warnings": d.warnings,
            });
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(main_with_args(["etlt", "score", "--bogus"]), 1);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(main_with_args(["etlt", "--help"]), 0);
    }

    #[test]
    fn missing_file_is_data_error() {
        assert_eq!(
            main_with_args([
                "etlt",
                "diagnose",
                "/nonexistent/x.etlt",
                "-o",
                "/tmp/x.csv"
            ]),
            2
        );
    }
}
