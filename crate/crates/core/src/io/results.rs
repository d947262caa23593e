//! Results tables: CSV for people and plotting, JSON for machines.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::container::write_atomic;
use crate::error::{Error, Result};
use crate::pipeline::Stat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub in_dataset: String,
    pub ood_dataset: String,
    pub scorer: String,
    pub method: String,
    pub repeats: usize,
    pub fpr95: Stat,
    pub auroc: Stat,
    pub aupr: Stat,
}

impl ResultsRow {
    fn key(&self) -> (&str, &str, &str, &str) {
        (
            &self.in_dataset,
            &self.ood_dataset,
            &self.scorer,
            &self.method,
        )
    }
}

/// Rows sorted lexicographically by (in, ood, scorer, method).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultsRow>,
}

pub const RESULTS_HEADER: [&str; 11] = [
    "in_dataset",
    "ood_dataset",
    "scorer",
    "method",
    "repeats",
    "fpr95_mean",
    "fpr95_std",
    "auroc_mean",
    "auroc_std",
    "aupr_mean",
    "aupr_std",
];

fn csv_error(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

impl ResultsTable {
    pub fn new(mut rows: Vec<ResultsRow>) -> Self {
        rows.sort_by(|a, b| a.key().cmp(&b.key()));
        Self { rows }
    }

    pub fn find(
        &self,
        in_dataset: &str,
        ood_dataset: &str,
        scorer: &str,
        method: &str,
    ) -> Option<&ResultsRow> {
        self.rows
            .iter()
            .find(|r| r.key() == (in_dataset, ood_dataset, scorer, method))
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let write = |w: &mut csv::Writer<Vec<u8>>| -> csv::Result<()> {
            w.write_record(RESULTS_HEADER)?;
            for r in &self.rows {
                w.write_record([
                    r.in_dataset.clone(),
                    r.ood_dataset.clone(),
                    r.scorer.clone(),
                    r.method.clone(),
                    r.repeats.to_string(),
                    r.fpr95.mean.to_string(),
                    r.fpr95.stdev.to_string(),
                    r.auroc.mean.to_string(),
                    r.auroc.stdev.to_string(),
                    r.aupr.mean.to_string(),
                    r.aupr.stdev.to_string(),
                ])?;
            }
            Ok(())
        };
        write(&mut w).expect("writing to memory");
        String::from_utf8(w.into_inner().expect("flushing to memory")).expect("csv output is UTF-8")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_error)?.clone();
        if header.iter().ne(RESULTS_HEADER) {
            return Err(Error::invalid("results csv header does not match"));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::invalid(format!("bad number `{s}` in results csv")))
        };
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_error)?;
            let stat = |i: usize| -> Result<Stat> {
                Ok(Stat {
                    mean: num(&rec[i])?,
                    stdev: num(&rec[i + 1])?,
                })
            };
            rows.push(ResultsRow {
                in_dataset: rec[0].to_string(),
                ood_dataset: rec[1].to_string(),
                scorer: rec[2].to_string(),
                method: rec[3].to_string(),
                repeats: rec[4]
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad repeat count `{}`", &rec[4])))?,
                fpr95: stat(5)?,
                auroc: stat(7)?,
                aupr: stat(9)?,
            });
        }
        Ok(Self::new(rows))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results serialize")
    }

    /// Writes `<prefix>.csv` and `<prefix>.json`.
    pub fn write(&self, prefix: &Path) -> Result<()> {
        let with = |ext: &str| {
            let mut p = prefix.as_os_str().to_owned();
            p.push(ext);
            PathBuf::from(p)
        };
        write_atomic(&with(".csv"), self.to_csv().as_bytes())?;
        write_atomic(&with(".json"), self.to_json().as_bytes())
    }
}
