//! SVG plots, each with a CSV sidecar holding the plotted values.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::metrics::{equal_frequency_bins, fixed_width_bins, kaplan_meier, risk_groups, roc_curve, Confusion, KmCurve};
use super::table::{PredictionTable, TableError};
use crate::config::{EvaluationSettings, LabelKind};

const W: f64 = 360.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

struct Canvas {
    body: String,
    x_max: f64,
}

impl Canvas {
    fn new(title: &str, x_label: &str, y_label: &str, x_max: f64) -> Self {
        let mut body = String::new();
        let _ = write!(
            body,
            r##"<rect x="{PAD}" y="{PAD}" width="{w}" height="{h}" fill="none" stroke="#444"/><text x="{cx}" y="24" text-anchor="middle" font-size="14">{title}</text><text x="{cx}" y="{xl}" text-anchor="middle" font-size="12">{x_label}</text><text x="14" y="{cy}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {cy})">{y_label}</text>"##,
            w = W - 2.0 * PAD,
            h = H - 2.0 * PAD,
            cx = W / 2.0,
            cy = H / 2.0,
            xl = H - 12.0,
        );
        Self { body, x_max: if x_max > 0.0 { x_max } else { 1.0 } }
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        (PAD + x / self.x_max * (W - 2.0 * PAD), H - PAD - y.clamp(0.0, 1.0) * (H - 2.0 * PAD))
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: &str, dashed: bool) {
        let coords: Vec<String> = pts.iter().map(|&(x, y)| self.px(x, y)).map(|(a, b)| format!("{a:.2},{b:.2}")).collect();
        let dash = if dashed { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = write!(self.body, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#, coords.join(" "));
    }

    fn dots(&mut self, pts: &[(f64, f64)], color: &str) {
        for &(x, y) in pts {
            let (a, b) = self.px(x, y);
            let _ = write!(self.body, r#"<circle cx="{a:.2}" cy="{b:.2}" r="3" fill="{color}"/>"#);
        }
    }

    fn text(&mut self, x: f64, y: f64, s: &str) {
        let _ = write!(self.body, r#"<text x="{x:.1}" y="{y:.1}" text-anchor="middle" font-size="13">{s}</text>"#);
    }

    fn finish(self) -> String {
        format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif">{}</svg>"#, self.body)
    }
}

fn write_pair(dir: &Path, stem: &str, svg: String, sidecar: &[Vec<String>]) -> Result<PathBuf, TableError> {
    let svg_path = dir.join(format!("{stem}.svg"));
    fs::write(&svg_path, svg).map_err(|source| TableError::Io { path: svg_path.display().to_string(), source })?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let csv_err = |source| TableError::Csv { path: csv_path.display().to_string(), source };
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    for row in sidecar {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| TableError::Io { path: csv_path.display().to_string(), source })?;
    Ok(svg_path)
}

fn row(cells: impl IntoIterator<Item = impl ToString>) -> Vec<String> {
    cells.into_iter().map(|c| c.to_string()).collect()
}

pub fn roc_plot(dir: &Path, stem: &str, preds: &[f64], labels: &[f64]) -> Result<PathBuf, TableError> {
    let pts = roc_curve(preds, labels);
    let mut c = Canvas::new("ROC", "false positive rate", "true positive rate", 1.0);
    c.polyline(&[(0.0, 0.0), (1.0, 1.0)], "#999", true);
    c.polyline(&pts, COLORS[0], false);
    let mut side = vec![row(["fpr", "tpr"])];
    side.extend(pts.iter().map(|&(x, y)| row([x, y])));
    write_pair(dir, stem, c.finish(), &side)
}

pub fn confusion_plot(dir: &Path, stem: &str, preds: &[f64], labels: &[f64], threshold: f64) -> Result<PathBuf, TableError> {
    let m = Confusion::at(preds, labels, threshold);
    let mut c = Canvas::new(&format!("Confusion (t = {threshold:.3})"), "predicted (0 | 1)", "observed (1 | 0)", 1.0);
    let cells = [(0.25, 0.75, "TN", m.tn), (0.75, 0.75, "FP", m.fp), (0.25, 0.25, "FN", m.fn_), (0.75, 0.25, "TP", m.tp)];
    for (x, y, name, n) in cells {
        let (a, b) = c.px(x, y);
        c.text(a, b, &format!("{name} {n}"));
    }
    c.polyline(&[(0.5, 0.0), (0.5, 1.0)], "#444", false);
    c.polyline(&[(0.0, 0.5), (1.0, 0.5)], "#444", false);
    let side = vec![row(["threshold", "tp", "fp", "tn", "fn"]), row([threshold.to_string(), m.tp.to_string(), m.fp.to_string(), m.tn.to_string(), m.fn_.to_string()])];
    write_pair(dir, stem, c.finish(), &side)
}

/// Calibration plot on equal-frequency bins; `None` when there are fewer samples than bins.
pub fn calibration_plot(dir: &Path, stem: &str, preds: &[f64], labels: &[f64], n_bins: usize) -> Result<Option<PathBuf>, TableError> {
    let Ok(bins) = equal_frequency_bins(preds, labels, n_bins) else { return Ok(None) };
    let pts: Vec<(f64, f64)> = bins.iter().map(|b| (b.mean_pred, b.mean_label)).collect();
    let mut c = Canvas::new("Calibration (equal-frequency bins)", "mean predicted probability", "observed frequency", 1.0);
    c.polyline(&[(0.0, 0.0), (1.0, 1.0)], "#999", true);
    c.polyline(&pts, COLORS[0], false);
    c.dots(&pts, COLORS[0]);
    let mut side = vec![row(["bin", "count", "mean_pred", "mean_label"])];
    side.extend(bins.iter().enumerate().map(|(i, b)| row([i.to_string(), b.count.to_string(), b.mean_pred.to_string(), b.mean_label.to_string()])));
    write_pair(dir, stem, c.finish(), &side).map(Some)
}

pub fn reliability_plot(dir: &Path, stem: &str, preds: &[f64], labels: &[f64], n_bins: usize) -> Result<PathBuf, TableError> {
    let bins = fixed_width_bins(preds, labels, n_bins);
    let mut c = Canvas::new("Reliability (fixed-width bins)", "mean predicted probability", "observed frequency", 1.0);
    c.polyline(&[(0.0, 0.0), (1.0, 1.0)], "#999", true);
    let width = 1.0 / n_bins as f64;
    for b in &bins {
        let lo = (b.mean_pred / width).floor().min(n_bins as f64 - 1.0) * width;
        c.polyline(&[(lo, 0.0), (lo, b.mean_label), (lo + width, b.mean_label), (lo + width, 0.0)], COLORS[0], false);
    }
    let mut side = vec![row(["count", "mean_pred", "mean_label"])];
    side.extend(bins.iter().map(|b| row([b.count.to_string(), b.mean_pred.to_string(), b.mean_label.to_string()])));
    write_pair(dir, stem, c.finish(), &side)
}

/// Kaplan-Meier curves per risk group (0 = lowest predicted risk).
pub fn kaplan_meier_plot(dir: &Path, stem: &str, risks: &[f64], times: &[f64], events: &[f64], n_groups: usize) -> Result<Option<PathBuf>, TableError> {
    let Ok(groups) = risk_groups(risks, n_groups) else { return Ok(None) };
    let t_max = times.iter().copied().fold(0.0, f64::max);
    let mut c = Canvas::new("Kaplan-Meier by risk group", "time", "survival probability", t_max);
    let mut side = vec![row(["group", "time", "survival", "at_risk", "events"])];
    for g in 0..n_groups.max(1) {
        let idx: Vec<usize> = (0..risks.len()).filter(|&i| groups[i] == g).collect();
        let km: KmCurve = kaplan_meier(&idx.iter().map(|&i| times[i]).collect::<Vec<_>>(), &idx.iter().map(|&i| events[i]).collect::<Vec<_>>());
        let mut pts = vec![(0.0, 1.0)];
        let mut s = 1.0;
        for (k, &t) in km.times.iter().enumerate() {
            pts.push((t, s));
            s = km.survival[k];
            pts.push((t, s));
            side.push(row([g.to_string(), t.to_string(), s.to_string(), km.at_risk[k].to_string(), km.events[k].to_string()]));
        }
        c.polyline(&pts, COLORS[g % COLORS.len()], false);
    }
    write_pair(dir, stem, c.finish(), &side).map(Some)
}

/// Renders the configured plots for every endpoint of `table` into `dir`,
/// prefixing file stems with `prefix`. Returns the image paths.
pub fn render_plots(table: &PredictionTable, s: &EvaluationSettings, thresholds: &[Option<f64>], dir: &Path, prefix: &str) -> Result<Vec<PathBuf>, TableError> {
    fs::create_dir_all(dir).map_err(|source| TableError::Io { path: dir.display().to_string(), source })?;
    let wants = |v: &str| s.visualisations.iter().any(|x| x == v);
    let mut out = Vec::new();
    for (e, ep) in table.endpoints.iter().enumerate() {
        let o = table.observed(e);
        if o.preds.is_empty() {
            continue;
        }
        let stem = |kind: &str| format!("{prefix}{kind}_{}", ep.name);
        match ep.kind {
            LabelKind::Binary => {
                let both = o.labels.iter().any(|&y| y >= 0.5) && o.labels.iter().any(|&y| y < 0.5);
                if wants("roc") && both {
                    out.push(roc_plot(dir, &stem("roc"), &o.preds, &o.labels)?);
                }
                if let (true, Some(t)) = (wants("confusion"), thresholds.get(e).copied().flatten()) {
                    out.push(confusion_plot(dir, &stem("confusion"), &o.preds, &o.labels, t)?);
                }
                if wants("calibration") {
                    out.extend(calibration_plot(dir, &stem("calibration"), &o.preds, &o.labels, s.n_bins)?);
                }
                if wants("reliability") {
                    out.push(reliability_plot(dir, &stem("reliability"), &o.preds, &o.labels, s.n_bins)?);
                }
            }
            LabelKind::Event => {
                if wants("kaplan_meier") {
                    out.extend(kaplan_meier_plot(dir, &stem("kaplan_meier"), &o.preds, &o.times, &o.labels, s.km_groups)?);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::metrics::trapezoid;

    fn sidecar(path: &Path) -> Vec<Vec<f64>> {
        let mut r = csv::Reader::from_path(path.with_extension("csv")).unwrap();
        r.records().map(|rec| rec.unwrap().iter().map(|c| c.parse().unwrap()).collect()).collect()
    }

    #[test]
    fn roc_sidecar_area_is_the_auc() {
        let dir = tempfile::tempdir().unwrap();
        let p = roc_plot(dir.path(), "roc", &[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]).unwrap();
        let pts: Vec<(f64, f64)> = sidecar(&p).iter().map(|r| (r[0], r[1])).collect();
        assert!((trapezoid(&pts) - 0.75).abs() < 1e-15);
        assert!(fs::read_to_string(&p).unwrap().starts_with("<svg"));
    }

    #[test]
    fn confusion_counts_sum_to_observed() {
        let dir = tempfile::tempdir().unwrap();
        let p = confusion_plot(dir.path(), "c", &[0.1, 0.6, 0.7, 0.2, 0.9], &[0.0, 1.0, 0.0, 1.0, 1.0], 0.5).unwrap();
        let r = &sidecar(&p)[0];
        assert_eq!(r[1] + r[2] + r[3] + r[4], 5.0);
    }

    #[test]
    fn calibration_bins_are_balanced() {
        let dir = tempfile::tempdir().unwrap();
        let preds: Vec<f64> = (0..37).map(|i| ((i * 7) % 37) as f64 / 37.0).collect();
        let labels: Vec<f64> = (0..37).map(|i| (i % 2) as f64).collect();
        let p = calibration_plot(dir.path(), "cal", &preds, &labels, 10).unwrap().unwrap();
        let counts: Vec<f64> = sidecar(&p).iter().map(|r| r[1]).collect();
        let (lo, hi) = counts.iter().fold((f64::MAX, 0.0f64), |(a, b), &c| (a.min(c), b.max(c)));
        assert!(hi - lo <= 1.0);
        assert!(calibration_plot(dir.path(), "few", &preds[..3], &labels[..3], 10).unwrap().is_none());
    }

    #[test]
    fn kaplan_meier_sidecar_has_one_curve_per_group() {
        let dir = tempfile::tempdir().unwrap();
        let p = kaplan_meier_plot(dir.path(), "km", &[0.1, 0.9, 0.2, 0.8], &[5.0, 1.0, 6.0, 2.0], &[1.0, 1.0, 0.0, 1.0], 2).unwrap().unwrap();
        let rows = sidecar(&p);
        assert!(rows.iter().any(|r| r[0] == 0.0) && rows.iter().any(|r| r[0] == 1.0));
        let high_risk_end = rows.iter().rev().find(|r| r[0] == 1.0).unwrap()[2];
        assert_eq!(high_risk_end, 0.0);
    }
}
