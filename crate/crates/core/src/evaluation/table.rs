//! Prediction tables, metric reports and their CSV forms.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::metrics::{auc, brier, c_index, calibration_errors, threshold_metrics, youden_threshold};
use crate::config::{EvaluationSettings, LabelKind, Threshold};

#[derive(Debug, Error)]
pub enum TableError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("cannot ensemble tables: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EndpointColumn {
    pub name: String,
    pub kind: LabelKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub patient_id: String,
    /// Probability for binary endpoints, risk score for event endpoints.
    pub preds: Vec<f64>,
    /// Class or event indicator.
    pub labels: Vec<f64>,
    pub times: Vec<f64>,
    pub observed: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTable {
    pub endpoints: Vec<EndpointColumn>,
    pub rows: Vec<PredictionRow>,
}

/// Observed entries of one endpoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Observed {
    pub preds: Vec<f64>,
    pub labels: Vec<f64>,
    pub times: Vec<f64>,
}

impl PredictionTable {
    pub fn observed(&self, e: usize) -> Observed {
        let mut o = Observed::default();
        for r in self.rows.iter().filter(|r| r.observed[e]) {
            o.preds.push(r.preds[e]);
            o.labels.push(r.labels[e]);
            o.times.push(r.times[e]);
        }
        o
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TableError> {
        let csv_err = |source| TableError::Csv { path: path.display().to_string(), source };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["PatientID".to_string()];
        for ep in &self.endpoints {
            header.push(format!("{}_prediction", ep.name));
            header.push(format!("{}_label", ep.name));
            if ep.kind == LabelKind::Event {
                header.push(format!("{}_time", ep.name));
            }
            header.push(format!("{}_observed", ep.name));
        }
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.patient_id.clone()];
            for (e, ep) in self.endpoints.iter().enumerate() {
                rec.push(r.preds[e].to_string());
                rec.push(if r.observed[e] { r.labels[e].to_string() } else { String::new() });
                if ep.kind == LabelKind::Event {
                    rec.push(if r.observed[e] { r.times[e].to_string() } else { String::new() });
                }
                rec.push(u8::from(r.observed[e]).to_string());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|source| TableError::Io { path: path.display().to_string(), source })
    }

    pub fn read_csv(path: &Path) -> Result<Self, TableError> {
        let p = path.display().to_string();
        let bad = |message: String| TableError::Format { path: p.clone(), message };
        let mut r = csv::Reader::from_path(path).map_err(|source| TableError::Csv { path: p.clone(), source })?;
        let header: Vec<String> = r.headers().map_err(|source| TableError::Csv { path: p.clone(), source })?.iter().map(str::to_string).collect();
        if header.first().map(String::as_str) != Some("PatientID") {
            return Err(bad("first column must be PatientID".into()));
        }
        let mut endpoints = Vec::new();
        let mut i = 1;
        while i < header.len() {
            let name = header[i].strip_suffix("_prediction").ok_or_else(|| bad(format!("unexpected column '{}'", header[i])))?.to_string();
            let kind = if header.get(i + 2).is_some_and(|h| *h == format!("{name}_time")) { LabelKind::Event } else { LabelKind::Binary };
            i += if kind == LabelKind::Event { 4 } else { 3 };
            endpoints.push(EndpointColumn { name, kind });
        }
        let num = |s: &str| -> Result<f64, TableError> {
            if s.is_empty() {
                Ok(f64::NAN)
            } else {
                s.parse().map_err(|_| bad(format!("non-numeric cell '{s}'")))
            }
        };
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|source| TableError::Csv { path: p.clone(), source })?;
            let mut row = PredictionRow { patient_id: rec[0].to_string(), preds: vec![], labels: vec![], times: vec![], observed: vec![] };
            let mut c = 1;
            for ep in &endpoints {
                row.preds.push(num(&rec[c])?);
                row.labels.push(num(&rec[c + 1])?);
                if ep.kind == LabelKind::Event {
                    row.times.push(num(&rec[c + 2])?);
                    c += 1;
                } else {
                    row.times.push(0.0);
                }
                row.observed.push(&rec[c + 2] == "1");
                c += 3;
            }
            rows.push(row);
        }
        Ok(Self { endpoints, rows })
    }

    /// Per-patient mean prediction over tables covering the same patients and endpoints.
    pub fn ensemble(tables: &[PredictionTable]) -> Result<Self, TableError> {
        let first = tables.first().ok_or_else(|| TableError::Mismatch("no tables".into()))?;
        for t in &tables[1..] {
            if t.endpoints != first.endpoints || t.rows.len() != first.rows.len() {
                return Err(TableError::Mismatch("endpoints or row counts differ".into()));
            }
            if let Some((a, b)) = first.rows.iter().zip(&t.rows).find(|(a, b)| a.patient_id != b.patient_id) {
                return Err(TableError::Mismatch(format!("patient '{}' vs '{}'", a.patient_id, b.patient_id)));
            }
        }
        let mut out = first.clone();
        for (i, row) in out.rows.iter_mut().enumerate() {
            for (e, p) in row.preds.iter_mut().enumerate() {
                let vals: Vec<f64> = tables.iter().map(|t| t.rows[i].preds[e]).collect();
                // Agreeing folds keep their exact value.
                if vals.iter().any(|&v| v != vals[0]) {
                    *p = vals.iter().sum::<f64>() / vals.len() as f64;
                }
            }
        }
        Ok(out)
    }
}

/// Metric values for one endpoint; `None` marks an undefined metric.
#[derive(Clone, Debug, PartialEq)]
pub struct EndpointReport {
    pub endpoint: String,
    pub n_observed: usize,
    /// Decision threshold used for the threshold metrics.
    pub threshold: Option<f64>,
    pub values: BTreeMap<String, Option<f64>>,
}

/// Threshold for one endpoint's observed predictions under the configured rule.
pub fn decision_threshold(rule: Threshold, o: &Observed) -> Option<f64> {
    match rule {
        Threshold::Fixed(t) => Some(t),
        Threshold::Youden => youden_threshold(&o.preds, &o.labels),
    }
}

/// Computes the configured metrics per endpoint. `thresholds[e]` overrides the
/// configured rule for binary endpoint `e`, e.g. with one derived on validation data.
pub fn compute_report(table: &PredictionTable, s: &EvaluationSettings, thresholds: Option<&[Option<f64>]>) -> Vec<EndpointReport> {
    table
        .endpoints
        .iter()
        .enumerate()
        .map(|(e, ep)| {
            let o = table.observed(e);
            let mut values: BTreeMap<String, Option<f64>> = s.metrics.iter().map(|m| (m.clone(), None)).collect();
            let mut threshold = None;
            match ep.kind {
                LabelKind::Binary if !o.preds.is_empty() => {
                    threshold = match thresholds {
                        Some(t) => t[e],
                        None => decision_threshold(s.threshold, &o),
                    };
                    let tm = threshold.map(|t| threshold_metrics(&o.preds, &o.labels, t));
                    let cal = calibration_errors(&o.preds, &o.labels, s.n_bins);
                    for (name, v) in values.iter_mut() {
                        *v = match name.as_str() {
                            "auc" => auc(&o.preds, &o.labels),
                            "accuracy" => tm.and_then(|m| m.accuracy),
                            "precision" => tm.and_then(|m| m.precision),
                            "recall" => tm.and_then(|m| m.recall),
                            "f1" => tm.and_then(|m| m.f1),
                            "ece" => cal.ece,
                            "mce" => cal.mce,
                            "ace" => cal.ace,
                            "brier" => brier(&o.preds, &o.labels),
                            _ => None,
                        };
                    }
                }
                LabelKind::Event => {
                    if let Some(v) = values.get_mut("c_index") {
                        *v = c_index(&o.preds, &o.times, &o.labels);
                    }
                }
                LabelKind::Binary => {}
            }
            EndpointReport { endpoint: ep.name.clone(), n_observed: o.preds.len(), threshold, values }
        })
        .collect()
}

/// Mean of a metric over the endpoints where it is defined.
pub fn summary_metric(reports: &[EndpointReport], name: &str) -> Option<f64> {
    let vals: Vec<f64> = reports.iter().filter_map(|r| r.values.get(name).copied().flatten()).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per endpoint; undefined metrics are empty cells.
pub fn write_metrics_csv(reports: &[EndpointReport], metrics: &[String], path: &Path) -> Result<(), TableError> {
    let csv_err = |source| TableError::Csv { path: path.display().to_string(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["endpoint".to_string(), "n_observed".into(), "threshold".into()];
    header.extend(metrics.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for r in reports {
        let mut rec = vec![r.endpoint.clone(), r.n_observed.to_string(), cell(r.threshold)];
        rec.extend(metrics.iter().map(|m| cell(r.values.get(m).copied().flatten())));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|source| TableError::Io { path: path.display().to_string(), source })
}

/// Reads a metrics CSV back into `endpoint -> metric -> value`.
pub fn read_metrics_csv(path: &Path) -> Result<BTreeMap<String, BTreeMap<String, Option<f64>>>, TableError> {
    let text = fs::read_to_string(path).map_err(|source| TableError::Io { path: path.display().to_string(), source })?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(|source| TableError::Csv { path: path.display().to_string(), source })?.iter().map(str::to_string).collect();
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|source| TableError::Csv { path: path.display().to_string(), source })?;
        let values = header.iter().zip(rec.iter()).skip(1).map(|(h, v)| (h.clone(), v.parse().ok())).collect();
        out.insert(rec[0].to_string(), values);
    }
    Ok(out)
}
