//! File formats shared by the experiment stages.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::projection::{FeatureVector, ProjectionMatrix};

pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn num(v: f64) -> String {
    format!("{v}")
}

pub(crate) fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub(crate) fn write_csv<S: AsRef<str>>(path: &Path, header: &[S], rows: &[Vec<String>]) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path.display().to_string(), e))?;
    let wrap = |e: csv::Error| Error::format(path.display().to_string(), e);
    w.write_record(header.iter().map(AsRef::as_ref)).map_err(wrap)?;
    for row in rows {
        w.write_record(row).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format("csv header", format!("missing column {name}")))
    }
}

pub(crate) fn read_csv(path: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path.display().to_string(), e))?;
    let wrap = |e: csv::Error| Error::format(path.display().to_string(), e);
    let header = r.headers().map_err(wrap)?.iter().map(str::to_owned).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(wrap)?.iter().map(str::to_owned).collect());
    }
    Ok(Table { header, rows })
}

pub(crate) fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::format(what, format!("not a number: {s:?}")))
}

pub(crate) fn parse_opt_f64(s: &str, what: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_f64(s, what).map(Some)
    }
}

/// Header `f0,...,f{d-1},label`; the label is empty for unlabeled rows.
pub fn write_features(path: &Path, samples: &[FeatureVector], d: usize) -> Result<()> {
    let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    let rows: Vec<Vec<String>> = samples
        .iter()
        .map(|s| {
            let mut row: Vec<String> = s.values.iter().map(|v| num(*v)).collect();
            row.push(s.label.clone().unwrap_or_default());
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureVector>> {
    let table = read_csv(path)?;
    let what = path.display().to_string();
    let d = table.header.len().saturating_sub(1);
    let well_formed = table.header.last().map(String::as_str) == Some("label")
        && table.header[..d].iter().enumerate().all(|(i, h)| *h == format!("f{i}"));
    if !well_formed {
        return Err(Error::format(what, "header must be f0,...,f{d-1},label"));
    }
    table
        .rows
        .iter()
        .map(|row| {
            let values = row[..d].iter().map(|v| parse_f64(v, &what)).collect::<Result<_>>()?;
            let label = Some(row[d].clone()).filter(|l| !l.is_empty());
            FeatureVector::new(values, label)
        })
        .collect()
}

pub fn write_matrix(path: &Path, w: &ProjectionMatrix) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, w.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<ProjectionMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ProjectionMatrix::from_bytes(&bytes)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
