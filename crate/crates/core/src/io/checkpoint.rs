//! Model and streaming-state checkpoints in the container format.

use std::path::Path;

use super::container::{read_container, write_container, Container, Section};
use super::dataset::{meta_section, parse_meta, Meta};
use crate::calibrate::{
    FitDiagnostics, OnlineCalibrator, OnlineState, Preprocessor, RegressionModel,
};
use crate::error::{Error, Result};
use crate::linalg::PcaBasis;
use crate::tinynet::{Layer, Mlp};

fn tagged(kind: &str) -> Result<Container> {
    let mut c = Container::new();
    let meta = Meta::from([("kind".to_string(), kind.to_string())]);
    c.push(meta_section(&meta)?)?;
    Ok(c)
}

fn expect_kind(c: &Container, kind: &str) -> Result<()> {
    let meta = parse_meta(c.require("meta")?)?;
    match meta.get("kind") {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::Config(format!(
            "expected a `{kind}` checkpoint, found {}",
            other.map_or("no kind".to_string(), |k| format!("`{k}`"))
        ))),
    }
}

fn scalar(c: &Container, name: &str) -> Result<f64> {
    let v = c.require(name)?.to_f64()?;
    match v.as_slice() {
        [x] => Ok(*x),
        _ => Err(Error::shape(format!(
            "`{name}` should hold one value, has {}",
            v.len()
        ))),
    }
}

fn count(c: &Container, name: &str) -> Result<usize> {
    let x = scalar(c, name)?;
    if x < 0.0 || x.fract() != 0.0 || x > 2f64.powi(53) {
        return Err(Error::invalid(format!("`{name}` is not a count: {x}")));
    }
    Ok(x as usize)
}

pub fn mlp_to_container(mlp: &Mlp) -> Result<Container> {
    let mut c = tagged("mlp")?;
    c.push(Section::vector(
        "mlp.dims",
        &mlp.dims().iter().map(|&d| d as f64).collect::<Vec<_>>(),
    )?)?;
    for (k, layer) in mlp.layers().iter().enumerate() {
        c.push(Section::matrix(format!("layer{k}.weight"), &layer.weight)?)?;
        c.push(Section::vector(format!("layer{k}.bias"), &layer.bias)?)?;
    }
    Ok(c)
}

pub fn mlp_from_container(c: &Container) -> Result<Mlp> {
    expect_kind(c, "mlp")?;
    let n_layers = c.require("mlp.dims")?.to_f64()?.len().saturating_sub(1);
    let layers = (0..n_layers)
        .map(|k| {
            Ok(Layer {
                weight: c.require(&format!("layer{k}.weight"))?.to_matrix()?,
                bias: c.require(&format!("layer{k}.bias"))?.to_f64()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Mlp::from_layers(layers)
}

fn push_preprocessor(c: &mut Container, p: &Preprocessor) -> Result<()> {
    c.push(Section::bytes(
        "prep.flags",
        &[
            p.unit_normalize as u8,
            p.add_bias as u8,
            p.pca.is_some() as u8,
        ],
    )?)?;
    c.push(Section::vector("prep.input_dim", &[p.input_dim() as f64])?)?;
    if let Some(pca) = &p.pca {
        c.push(Section::vector("pca.mean", &pca.mean)?)?;
        c.push(Section::matrix("pca.components", &pca.components)?)?;
        c.push(Section::vector(
            "pca.explained_variance",
            &pca.explained_variance,
        )?)?;
        c.push(Section::vector(
            "pca.total_variance",
            &[pca.total_variance],
        )?)?;
    }
    Ok(())
}

fn read_preprocessor(c: &Container) -> Result<Preprocessor> {
    let flags = c.require("prep.flags")?.as_u8()?;
    let [unit, bias, has_pca] = flags else {
        return Err(Error::shape(format!(
            "`prep.flags` should hold 3 bytes, has {}",
            flags.len()
        )));
    };
    let pca = if *has_pca != 0 {
        Some(PcaBasis {
            mean: c.require("pca.mean")?.to_f64()?,
            components: c.require("pca.components")?.to_matrix()?,
            explained_variance: c.require("pca.explained_variance")?.to_f64()?,
            total_variance: scalar(c, "pca.total_variance")?,
        })
    } else {
        None
    };
    Preprocessor::from_parts(*unit != 0, pca, *bias != 0, count(c, "prep.input_dim")?)
}

pub fn model_to_container(m: &RegressionModel) -> Result<Container> {
    let mut c = tagged("regression")?;
    c.push(Section::vector("beta", &m.beta)?)?;
    push_preprocessor(&mut c, &m.preprocessor)?;
    let d = &m.diagnostics;
    c.push(Section::vector(
        "diag",
        &[
            d.n_samples as f64,
            d.residual_norm.unwrap_or(f64::NAN),
            d.gram_rank as f64,
            d.identical_rows as u8 as f64,
        ],
    )?)?;
    c.push(Section::vector(
        "diag.zero_norm_rows",
        &d.zero_norm_rows
            .iter()
            .map(|&i| i as f64)
            .collect::<Vec<_>>(),
    )?)?;
    Ok(c)
}

pub fn model_from_container(c: &Container) -> Result<RegressionModel> {
    expect_kind(c, "regression")?;
    let preprocessor = read_preprocessor(c)?;
    let beta = c.require("beta")?.to_f64()?;
    if beta.len() != preprocessor.output_dim() {
        return Err(Error::shape(format!(
            "beta has {} entries, preprocessor produces {}",
            beta.len(),
            preprocessor.output_dim()
        )));
    }
    let diag = c.require("diag")?.to_f64()?;
    let [n, resid, rank, identical] = diag.as_slice() else {
        return Err(Error::shape("`diag` should hold 4 values"));
    };
    Ok(RegressionModel {
        beta,
        preprocessor,
        diagnostics: FitDiagnostics {
            n_samples: *n as usize,
            residual_norm: (!resid.is_nan()).then_some(*resid),
            gram_rank: *rank as usize,
            identical_rows: *identical != 0.0,
            zero_norm_rows: c
                .require("diag.zero_norm_rows")?
                .to_f64()?
                .into_iter()
                .map(|v| v as usize)
                .collect(),
        },
    })
}

pub fn online_to_container(o: &OnlineCalibrator) -> Result<Container> {
    let mut c = tagged("online")?;
    push_preprocessor(&mut c, &o.preprocessor)?;
    c.push(Section::matrix("online.a", &o.state.a)?)?;
    c.push(Section::vector("online.b", &o.state.b)?)?;
    c.push(Section::vector(
        "online.samples_seen",
        &[o.state.samples_seen as f64],
    )?)?;
    Ok(c)
}

pub fn online_from_container(c: &Container) -> Result<OnlineCalibrator> {
    expect_kind(c, "online")?;
    let preprocessor = read_preprocessor(c)?;
    let state = OnlineState::from_parts(
        c.require("online.a")?.to_matrix()?,
        c.require("online.b")?.to_f64()?,
        count(c, "online.samples_seen")?,
    )?;
    if state.dim() != preprocessor.output_dim() {
        return Err(Error::shape(format!(
            "online state has dimension {}, preprocessor produces {}",
            state.dim(),
            preprocessor.output_dim()
        )));
    }
    Ok(OnlineCalibrator {
        preprocessor,
        state,
    })
}

pub fn save_mlp(path: impl AsRef<Path>, mlp: &Mlp) -> Result<()> {
    write_container(path, &mlp_to_container(mlp)?)
}

pub fn load_mlp(path: impl AsRef<Path>) -> Result<Mlp> {
    mlp_from_container(&read_container(path)?)
}

pub fn save_model(path: impl AsRef<Path>, m: &RegressionModel) -> Result<()> {
    write_container(path, &model_to_container(m)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<RegressionModel> {
    model_from_container(&read_container(path)?)
}

pub fn save_online(path: impl AsRef<Path>, o: &OnlineCalibrator) -> Result<()> {
    write_container(path, &online_to_container(o)?)
}

pub fn load_online(path: impl AsRef<Path>) -> Result<OnlineCalibrator> {
    online_from_container(&read_container(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::{fit_dlr, PreprocessSpec};
    use crate::linalg::Matrix;

    #[test]
    fn mlp_round_trip() {
        let m = Mlp::new(&[3, 5, 2], 4).unwrap();
        let back = mlp_from_container(&mlp_to_container(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn model_round_trip_with_pca() {
        let x = Matrix::from_fn(12, 4, |i, j| {
            ((i * 3 + j * 7) % 5) as f64 + 0.2 * (i * j) as f64
        });
        let s: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let spec = PreprocessSpec {
            unit_normalize: true,
            pca_dim: Some(2),
            add_bias: true,
        };
        let m = fit_dlr(&x, &s, &spec).unwrap();
        let back = model_from_container(&model_to_container(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn online_round_trip() {
        let mut o = OnlineCalibrator::new(Preprocessor::identity(2, true)).unwrap();
        o.update(
            &Matrix::from_rows(&[[1.0, 2.0], [0.5, -1.0]]).unwrap(),
            &[1.0, 0.0],
        )
        .unwrap();
        let back = online_from_container(&online_to_container(&o).unwrap()).unwrap();
        assert_eq!(back, o);
    }

    #[test]
    fn wrong_kind_rejected() {
        let m = Mlp::new(&[2, 2], 0).unwrap();
        let c = mlp_to_container(&m).unwrap();
        assert!(matches!(model_from_container(&c), Err(Error::Config(_))));
    }
}
