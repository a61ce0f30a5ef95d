//! Discrimination, threshold, calibration and survival metrics.
//!
//! All functions take only observed entries; callers filter masks first.
//! Undefined results are `None`.

use std::cmp::Ordering;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("need at least {needed} samples for equal-frequency binning, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("risk group {0} is empty")]
    EmptyGroup(usize),
}

fn total(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// Mann-Whitney AUC: P(score+ > score-) + P(tie)/2. `None` without both classes.
pub fn auc(preds: &[f64], labels: &[f64]) -> Option<f64> {
    let mut pairs: Vec<(f64, bool)> = preds.iter().zip(labels).map(|(&p, &y)| (p, y >= 0.5)).collect();
    let n_pos = pairs.iter().filter(|(_, y)| *y).count() as u64;
    let n_neg = pairs.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    pairs.sort_by(|a, b| total(a.0, b.0));
    // Twice the concordant count, so ties stay integral.
    let mut twice = 0u64;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let pos = pairs[i..j].iter().filter(|(_, y)| *y).count() as u64;
        let neg = (j - i) as u64 - pos;
        twice += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Some(twice as f64 * 0.5 / (n_pos * n_neg) as f64)
}

/// Harrell's C over pairs with `t_i < t_j` and an event at `i`; tied risks earn half credit.
pub fn c_index(risks: &[f64], times: &[f64], events: &[f64]) -> Option<f64> {
    let n = risks.len();
    let (mut twice, mut comparable) = (0u64, 0u64);
    for i in 0..n {
        if events[i] < 0.5 {
            continue;
        }
        for j in 0..n {
            if times[i] < times[j] {
                comparable += 1;
                twice += match total(risks[i], risks[j]) {
                    Ordering::Greater => 2,
                    Ordering::Equal => 1,
                    Ordering::Less => 0,
                };
            }
        }
    }
    (comparable > 0).then(|| twice as f64 * 0.5 / comparable as f64)
}

/// Threshold maximizing sensitivity + specificity - 1 under the rule `pred >= t`.
/// Candidates are the observed predictions plus infinity; ties go to the smallest.
pub fn youden_threshold(preds: &[f64], labels: &[f64]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y >= 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| total(preds[b], preds[a]));
    // Sweep from +inf downwards; J at the lowest threshold reached wins ties.
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = (0.0f64, f64::INFINITY);
    let mut k = 0;
    while k < order.len() {
        let t = preds[order[k]];
        while k < order.len() && preds[order[k]] == t {
            if labels[order[k]] >= 0.5 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let j = tp as f64 / n_pos as f64 - fp as f64 / n_neg as f64;
        if j >= best.0 {
            best = (j, t);
        }
    }
    Some(best.1)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at(preds: &[f64], labels: &[f64], threshold: f64) -> Self {
        let mut c = Self::default();
        for (&p, &y) in preds.iter().zip(labels) {
            match (p >= threshold, y >= 0.5) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdMetrics {
    pub threshold: f64,
    pub confusion: Confusion,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn threshold_metrics(preds: &[f64], labels: &[f64], threshold: f64) -> ThresholdMetrics {
    let c = Confusion::at(preds, labels, threshold);
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    ThresholdMetrics {
        threshold,
        confusion: c,
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        recall,
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

/// One calibration bin: population, mean prediction and observed frequency.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bin {
    pub count: usize,
    pub mean_pred: f64,
    pub mean_label: f64,
}

impl Bin {
    pub fn gap(&self) -> f64 {
        (self.mean_label - self.mean_pred).abs()
    }
}

fn summarize(preds: &[f64], labels: &[f64], members: &[usize]) -> Bin {
    let n = members.len() as f64;
    Bin {
        count: members.len(),
        mean_pred: members.iter().map(|&i| preds[i]).sum::<f64>() / n,
        mean_label: members.iter().map(|&i| labels[i]).sum::<f64>() / n,
    }
}

/// Occupied fixed-width bins on [0, 1]; 1.0 falls into the last bin.
pub fn fixed_width_bins(preds: &[f64], labels: &[f64], n_bins: usize) -> Vec<Bin> {
    let mut members = vec![Vec::new(); n_bins];
    for (i, &p) in preds.iter().enumerate() {
        let b = ((p * n_bins as f64).floor().max(0.0) as usize).min(n_bins - 1);
        members[b].push(i);
    }
    members.iter().filter(|m| !m.is_empty()).map(|m| summarize(preds, labels, m)).collect()
}

/// Equal-frequency bins over predictions sorted ascending; sizes differ by at most one.
pub fn equal_frequency_bins(preds: &[f64], labels: &[f64], n_bins: usize) -> Result<Vec<Bin>, MetricError> {
    let n = preds.len();
    if n < n_bins || n_bins == 0 {
        return Err(MetricError::TooFewSamples { needed: n_bins.max(1), got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| total(preds[a], preds[b]));
    let (base, extra) = (n / n_bins, n % n_bins);
    let mut bins = Vec::with_capacity(n_bins);
    let mut start = 0;
    for b in 0..n_bins {
        let size = base + usize::from(b < extra);
        bins.push(summarize(preds, labels, &order[start..start + size]));
        start += size;
    }
    Ok(bins)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub ece: Option<f64>,
    pub mce: Option<f64>,
    pub ace: Option<f64>,
}

pub fn calibration_errors(preds: &[f64], labels: &[f64], n_bins: usize) -> Calibration {
    let n = preds.len();
    if n == 0 {
        return Calibration { ece: None, mce: None, ace: None };
    }
    let fixed = fixed_width_bins(preds, labels, n_bins);
    let ece = fixed.iter().map(|b| b.count as f64 / n as f64 * b.gap()).sum();
    let mce = fixed.iter().map(Bin::gap).fold(0.0, f64::max);
    let ace = equal_frequency_bins(preds, labels, n_bins).ok().map(|bins| bins.iter().map(Bin::gap).sum::<f64>() / bins.len() as f64);
    Calibration { ece: Some(ece), mce: Some(mce), ace }
}

pub fn brier(preds: &[f64], labels: &[f64]) -> Option<f64> {
    (!preds.is_empty()).then(|| preds.iter().zip(labels).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / preds.len() as f64)
}

/// Kaplan-Meier step function evaluated at each distinct time.
#[derive(Clone, Debug, PartialEq)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    /// S(t): 1 before the first time, otherwise the value at the last time <= t.
    pub fn at(&self, t: f64) -> f64 {
        match self.times.iter().rposition(|&x| x <= t) {
            Some(k) => self.survival[k],
            None => 1.0,
        }
    }
}

pub fn kaplan_meier(times: &[f64], events: &[f64]) -> KmCurve {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| total(times[a], times[b]));
    let mut curve = KmCurve { times: Vec::new(), survival: Vec::new(), at_risk: Vec::new(), events: Vec::new() };
    let (mut s, mut remaining) = (1.0, times.len());
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let (mut d, mut leaving) = (0, 0);
        while k < order.len() && times[order[k]] == t {
            d += usize::from(events[order[k]] >= 0.5);
            leaving += 1;
            k += 1;
        }
        s *= 1.0 - d as f64 / remaining as f64;
        curve.times.push(t);
        curve.survival.push(s);
        curve.at_risk.push(remaining);
        curve.events.push(d);
        remaining -= leaving;
    }
    curve
}

/// Assigns each subject to one of `n_groups` equal-frequency risk groups, 0 being lowest risk.
pub fn risk_groups(risks: &[f64], n_groups: usize) -> Result<Vec<usize>, MetricError> {
    let n = risks.len();
    let n_groups = n_groups.max(1);
    if n < n_groups {
        return Err(MetricError::EmptyGroup(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| total(risks[a], risks[b]));
    let mut groups = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        groups[i] = rank * n_groups / n;
    }
    Ok(groups)
}

/// ROC points (FPR, TPR) from (0,0) to (1,1), one per distinct threshold.
pub fn roc_curve(preds: &[f64], labels: &[f64]) -> Vec<(f64, f64)> {
    let n_pos = labels.iter().filter(|&&y| y >= 0.5).count().max(1) as f64;
    let n_neg = (labels.iter().filter(|&&y| y < 0.5).count()).max(1) as f64;
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| total(preds[b], preds[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let t = preds[order[k]];
        while k < order.len() && preds[order[k]] == t {
            if labels[order[k]] >= 0.5 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        pts.push((fp as f64 / n_neg, tp as f64 / n_pos));
    }
    pts
}

/// Trapezoidal area under a polyline.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5).sum()
}
