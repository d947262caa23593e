//! Feature/logit/label sets stored as containers.
//!
//! Canonical sections: `features` (n x d), optional `logits` (n x C),
//! `logits_perturbed` (n x C), `inputs` (n x k), `labels` (n, u8, 0 = in,
//! 1 = out), `source_tags` (n strings), `scores` (n), and a `meta` string
//! table of `key=value` entries.

use std::collections::BTreeMap;
use std::path::Path;

use super::container::{read_container, write_container, Container, Section};
use crate::datasets::{FeatureRecord, Origin};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub type Meta = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    /// Dataset name: `meta.name`, else the file stem.
    pub name: String,
    /// OOD label for prepared mixtures (`meta.ood_name`).
    pub ood_name: Option<String>,
    pub features: Matrix,
    pub logits: Option<Matrix>,
    pub logits_perturbed: Option<Matrix>,
    pub inputs: Option<Matrix>,
    pub labels: Option<Vec<Origin>>,
    pub source_tags: Option<Vec<String>>,
    pub scores: Option<Vec<f64>>,
    /// Remaining metadata, passed through untouched.
    pub meta: Meta,
}

pub fn parse_meta(section: &Section) -> Result<Meta> {
    let mut meta = Meta::new();
    for entry in section.as_strings()? {
        let (k, v) = entry
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("meta entry `{entry}` is not key=value")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    Ok(meta)
}

pub fn meta_section(meta: &Meta) -> Result<Section> {
    Section::strings(
        "meta",
        meta.iter().map(|(k, v)| format!("{k}={v}")).collect(),
    )
}

fn rows_match(name: &str, m: &Matrix, n: usize) -> Result<()> {
    if m.rows() != n {
        return Err(Error::shape(format!(
            "`{name}` has {} rows, features have {n}",
            m.rows()
        )));
    }
    Ok(())
}

impl FeatureSet {
    pub fn new(name: impl Into<String>, features: Matrix) -> Self {
        Self {
            name: name.into(),
            ood_name: None,
            features,
            logits: None,
            logits_perturbed: None,
            inputs: None,
            labels: None,
            source_tags: None,
            scores: None,
            meta: Meta::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_records(name: impl Into<String>, records: &[FeatureRecord]) -> Result<Self> {
        let d = records.first().map_or(0, |r| r.feature.len());
        let gather = |f: &dyn Fn(&FeatureRecord) -> Option<&Vec<f64>>,
                      what: &str|
         -> Result<Option<Matrix>> {
            if records.is_empty() || records.iter().any(|r| f(r).is_none()) {
                return Ok(None);
            }
            Matrix::from_rows(
                &records
                    .iter()
                    .map(|r| f(r).unwrap().as_slice())
                    .collect::<Vec<_>>(),
            )
            .map(Some)
            .map_err(|e| Error::shape(format!("{what}: {e}")))
        };
        let features = if records.is_empty() {
            Matrix::zeros(0, d)
        } else {
            gather(&|r| Some(&r.feature), "features")?.expect("features present")
        };
        Ok(Self {
            logits: gather(&|r| r.logits.as_ref(), "logits")?,
            logits_perturbed: gather(&|r| r.logits_perturbed.as_ref(), "logits_perturbed")?,
            inputs: gather(&|r| r.input.as_ref(), "inputs")?,
            labels: Some(records.iter().map(|r| r.origin).collect()),
            source_tags: Some(records.iter().map(|r| r.source_tag.clone()).collect()),
            ..Self::new(name, features)
        })
    }

    pub fn from_container(c: &Container, default_name: &str) -> Result<Self> {
        let features = c.require("features")?.to_matrix()?;
        let n = features.rows();
        let optional_matrix = |name: &str| -> Result<Option<Matrix>> {
            c.get(name)
                .map(|s| {
                    let m = s.to_matrix()?;
                    rows_match(name, &m, n)?;
                    Ok(m)
                })
                .transpose()
        };
        let labels = c
            .get("labels")
            .map(|s| {
                let codes = s.as_u8()?;
                if codes.len() != n {
                    return Err(Error::shape(format!("{} labels for {n} rows", codes.len())));
                }
                codes
                    .iter()
                    .map(|&b| Origin::from_code(b))
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        let source_tags = c
            .get("source_tags")
            .map(|s| {
                let tags = s.as_strings()?.to_vec();
                if tags.len() != n {
                    return Err(Error::shape(format!(
                        "{} source tags for {n} rows",
                        tags.len()
                    )));
                }
                Ok(tags)
            })
            .transpose()?;
        let scores = c
            .get("scores")
            .map(|s| {
                let v = s.to_f64()?;
                if v.len() != n {
                    return Err(Error::shape(format!("{} scores for {n} rows", v.len())));
                }
                Ok(v)
            })
            .transpose()?;
        let mut meta = c
            .get("meta")
            .map(parse_meta)
            .transpose()?
            .unwrap_or_default();
        let name = meta
            .remove("name")
            .unwrap_or_else(|| default_name.to_string());
        let ood_name = meta.remove("ood_name");
        Ok(Self {
            name,
            ood_name,
            logits: optional_matrix("logits")?,
            logits_perturbed: optional_matrix("logits_perturbed")?,
            inputs: optional_matrix("inputs")?,
            labels,
            source_tags,
            scores,
            meta,
            features,
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let n = self.len();
        let mut c = Container::new();
        c.push(Section::matrix("features", &self.features)?)?;
        for (name, m) in [
            ("logits", &self.logits),
            ("logits_perturbed", &self.logits_perturbed),
            ("inputs", &self.inputs),
        ] {
            if let Some(m) = m {
                rows_match(name, m, n)?;
                c.push(Section::matrix(name, m)?)?;
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(Error::shape(format!("{} labels for {n} rows", l.len())));
            }
            c.push(Section::bytes(
                "labels",
                &l.iter().map(|o| o.code()).collect::<Vec<_>>(),
            )?)?;
        }
        if let Some(t) = &self.source_tags {
            if t.len() != n {
                return Err(Error::shape(format!(
                    "{} source tags for {n} rows",
                    t.len()
                )));
            }
            c.push(Section::strings("source_tags", t.clone())?)?;
        }
        if let Some(s) = &self.scores {
            if s.len() != n {
                return Err(Error::shape(format!("{} scores for {n} rows", s.len())));
            }
            c.push(Section::vector("scores", s)?)?;
        }
        let mut meta = self.meta.clone();
        meta.insert("name".into(), self.name.clone());
        if let Some(o) = &self.ood_name {
            meta.insert("ood_name".into(), o.clone());
        }
        c.push(meta_section(&meta)?)?;
        Ok(c)
    }

    /// Records with every row's origin set to `origin`.
    pub fn into_records(self, origin: Origin) -> Result<Vec<FeatureRecord>> {
        let n = self.len();
        self.build_records(vec![origin; n])
    }

    /// Records labelled from the `labels` section, which must be present.
    pub fn into_labelled_records(mut self) -> Result<Vec<FeatureRecord>> {
        let labels = self
            .labels
            .take()
            .ok_or_else(|| Error::Config(format!("`{}` has no labels section", self.name)))?;
        self.build_records(labels)
    }

    fn build_records(self, labels: Vec<Origin>) -> Result<Vec<FeatureRecord>> {
        let row = |m: &Option<Matrix>, i: usize| m.as_ref().map(|m| m.row(i).to_vec());
        Ok((0..self.len())
            .map(|i| {
                let tag = self
                    .source_tags
                    .as_ref()
                    .map_or(self.name.as_str(), |t| t[i].as_str());
                let mut r = FeatureRecord::new(
                    self.features.row(i).to_vec(),
                    row(&self.logits, i),
                    labels[i],
                    tag,
                );
                r.logits_perturbed = row(&self.logits_perturbed, i);
                r.input = row(&self.inputs, i);
                r
            })
            .collect())
    }
}

pub fn load_feature_set(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    FeatureSet::from_container(&read_container(path)?, stem)
}

pub fn save_feature_set(path: impl AsRef<Path>, set: &FeatureSet) -> Result<()> {
    write_container(path, &set.to_container()?)
}
