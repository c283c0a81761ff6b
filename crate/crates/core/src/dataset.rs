//! Right-censored survival data with time-fixed covariates.
//!
//! A [`SurvivalDataset`] is validated on construction and kept sorted by
//! observed time (stable, so tied times keep their input order). It is
//! immutable afterwards.
//!
//! Only time-fixed covariates are supported.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observation: follow-up time, event indicator and covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub time: f64,
    /// `true` for an observed failure, `false` for a censored time.
    pub event: bool,
    pub covariates: Vec<f64>,
}

impl Subject {
    pub fn new(time: f64, event: bool, covariates: Vec<f64>) -> Self {
        Subject {
            time,
            event,
            covariates,
        }
    }

    pub fn status(&self) -> u8 {
        self.event as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    subjects: Vec<Subject>,
    names: Vec<String>,
    dim: usize,
    // row-major copy of the covariates, in sorted order
    z: Vec<f64>,
}

fn check_subject(s: &Subject, dim: usize) -> std::result::Result<(), String> {
    if s.covariates.len() != dim {
        return Err(format!(
            "expected {} covariates, found {}",
            dim,
            s.covariates.len()
        ));
    }
    if !s.time.is_finite() {
        return Err("non-finite time".into());
    }
    if s.time < 0.0 {
        return Err("negative time".into());
    }
    if s.time == 0.0 && s.event {
        return Err("event at time zero".into());
    }
    if s.covariates.iter().any(|z| !z.is_finite()) {
        return Err("non-finite covariate".into());
    }
    Ok(())
}

impl SurvivalDataset {
    /// Validates and sorts `subjects`. Covariates are named `z1..zd`.
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        let dim = subjects
            .first()
            .map(|s| s.covariates.len())
            .ok_or_else(|| Error::data("dataset has no subjects"))?;
        let names = (1..=dim).map(|k| format!("z{k}")).collect();
        Self::with_names(subjects, names)
    }

    pub fn with_names(mut subjects: Vec<Subject>, names: Vec<String>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::data("dataset has no subjects"));
        }
        let dim = names.len();
        if dim == 0 {
            return Err(Error::data("at least one covariate is required"));
        }
        for (i, s) in subjects.iter().enumerate() {
            check_subject(s, dim).map_err(|m| Error::data(format!("subject {i}: {m}")))?;
        }
        subjects.sort_by(|a, b| a.time.total_cmp(&b.time));
        let z = subjects
            .iter()
            .flat_map(|s| s.covariates.iter().copied())
            .collect();
        Ok(SurvivalDataset {
            subjects,
            names,
            dim,
            z,
        })
    }

    /// Reads a `time,status,z1,...,zd` CSV file.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);

        let header = rdr
            .headers()
            .map_err(|e| Error::Parse {
                line: 1,
                msg: e.to_string(),
            })?
            .clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.len() < 3 || cols[0] != "time" || cols[1] != "status" {
            return Err(Error::Parse {
                line: 1,
                msg: "header must be `time,status,z1,...,zd`".into(),
            });
        }
        let names: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
        let width = cols.len();

        let mut subjects = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            if rec.len() == 1 && rec[0].is_empty() {
                continue;
            }
            if rec.len() != width {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {width} columns, found {}", rec.len()),
                });
            }
            let num = |k: usize| -> Result<f64> {
                rec[k].parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    msg: format!("malformed value `{}` in column `{}`", &rec[k], cols[k]),
                })
            };
            let time = num(0)?;
            let event = match &rec[1] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("status `{other}` outside {{0,1}}"),
                    })
                }
            };
            let covariates = (2..width).map(num).collect::<Result<Vec<_>>>()?;
            let s = Subject::new(time, event, covariates);
            check_subject(&s, width - 2).map_err(|msg| Error::Parse { line, msg })?;
            subjects.push(s);
        }
        if subjects.is_empty() {
            return Err(Error::data("CSV contains no rows"));
        }
        Self::with_names(subjects, names)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let to_err = |e: csv::Error| Error::data(e.to_string());
        let mut header = vec!["time".to_string(), "status".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).map_err(to_err)?;
        for s in &self.subjects {
            let mut row = vec![s.time.to_string(), s.status().to_string()];
            row.extend(s.covariates.iter().map(|z| z.to_string()));
            w.write_record(&row).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::data(e.to_string()))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.names
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn time(&self, i: usize) -> f64 {
        self.subjects[i].time
    }

    pub fn event(&self, i: usize) -> bool {
        self.subjects[i].event
    }

    pub fn covariates(&self, i: usize) -> &[f64] {
        &self.z[i * self.dim..(i + 1) * self.dim]
    }

    pub fn event_count(&self) -> usize {
        self.subjects.iter().filter(|s| s.event).count()
    }

    pub fn max_time(&self) -> f64 {
        self.subjects.last().map_or(0.0, |s| s.time)
    }

    /// Number of subjects with `time >= t`.
    pub fn at_risk(&self, t: f64) -> usize {
        let first = self.subjects.partition_point(|s| s.time < t);
        self.len() - first
    }

    /// Index of the first subject with `time >= t`.
    pub(crate) fn risk_start(&self, t: f64) -> usize {
        self.subjects.partition_point(|s| s.time < t)
    }

    /// Total follow-up time.
    pub fn exposure(&self) -> f64 {
        self.subjects.iter().map(|s| s.time).sum()
    }

    pub(crate) fn check_beta(&self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: beta.len(),
            });
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::arg("beta must be finite"));
        }
        Ok(())
    }
}

/// Exponentially weighted moments of the covariates over the risk set
/// `{j : X_j >= t}`, normalized by the full sample size.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskSetStats {
    pub s0: f64,
    pub s1: DVector<f64>,
    pub s2: DMatrix<f64>,
    /// `s1 / s0`
    pub e: DVector<f64>,
    /// `s2 / s0 - e e'`
    pub v: DMatrix<f64>,
    pub at_risk: usize,
}

/// Risk-set statistics at `(beta, t)`.
pub fn risk_set_stats(data: &SurvivalDataset, beta: &[f64], t: f64) -> Result<RiskSetStats> {
    data.check_beta(beta)?;
    if !(t >= 0.0) {
        return Err(Error::arg("t must be nonnegative"));
    }
    let d = data.dim();
    let start = data.risk_start(t);
    if start == data.len() {
        return Err(Error::EmptyRiskSet(t));
    }
    let n = data.len() as f64;
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(d);
    let mut s2 = DMatrix::zeros(d, d);
    for j in start..data.len() {
        let z = data.covariates(j);
        let w = beta.iter().zip(z).map(|(b, z)| b * z).sum::<f64>().exp();
        s0 += w;
        for a in 0..d {
            s1[a] += w * z[a];
            for b in 0..=a {
                s2[(a, b)] += w * z[a] * z[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            s2[(b, a)] = s2[(a, b)];
        }
    }
    let e = &s1 / s0;
    let v = &s2 / s0 - &e * e.transpose();
    Ok(RiskSetStats {
        s0: s0 / n,
        s1: s1 / n,
        s2: s2 / n,
        e,
        v,
        at_risk: data.len() - start,
    })
}
