//! Masked multi-endpoint losses with analytic gradients.
//!
//! Binary endpoints take logits `z`; with `p = sigmoid(z)` and a (possibly
//! soft) label `y`:
//!
//! * bce:   `softplus(z) - y z`
//! * focal: `-y (1-p)^g log p - (1-y) p^g log(1-p)`
//! * asl:   positive term as focal with `g+`; negative term
//!   `-q^g- log(1-q)` with `q = max(p - clip, 0)`
//! * hill:  positive term is focal on `sigmoid(z - margin)`; negative term
//!   `(lambda - p) p^2`
//!
//! Event endpoints use the Cox negative partial log-likelihood with Breslow
//! risk sets over the observed entries of the batch, averaged over events.
//!
//! Each endpoint's loss is the mean over its observed entries; the total is
//! the mean over endpoints with at least one observed entry.

use thiserror::Error;
use voxtrain_tensor::{Element, Tensor, Var};

use crate::config::{BinaryLoss, ClassWeighting, LabelKind, LossSettings};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LossError {
    #[error("no observed label in the batch")]
    AllMasked,
    #[error("loss inputs disagree in shape: {0}")]
    Shape(String),
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `g * x^(g-1)`, taken as 0 when `g == 0`.
fn dpow(x: f64, g: f64) -> f64 {
    if g == 0.0 {
        0.0
    } else {
        g * x.powf(g - 1.0)
    }
}

/// Focal positive term `-(1-p)^g log p` and its derivative in `z`.
fn focal_pos(z: f64, g: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let log_p = -softplus(-z);
    ((1.0 - p).powf(g) * -log_p, (1.0 - p).powf(g) * (g * p * log_p - (1.0 - p)))
}

/// Focal negative term `-p^g log(1-p)` and its derivative in `z`.
fn focal_neg(z: f64, g: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let log_q = -softplus(z);
    (p.powf(g) * -log_q, p.powf(g) * (p - g * (1.0 - p) * log_q))
}

#[derive(Clone, Debug, PartialEq)]
pub enum BinaryObjective {
    Bce,
    Focal { gamma: f64 },
    Asl { gamma_pos: f64, gamma_neg: f64, clip: f64 },
    Hill { lambda: f64, margin: f64, gamma: f64 },
}

impl BinaryObjective {
    pub fn from_settings(s: &LossSettings) -> Self {
        match s.binary {
            BinaryLoss::Bce => Self::Bce,
            BinaryLoss::Focal => Self::Focal { gamma: s.focal_gamma },
            BinaryLoss::Asl => Self::Asl { gamma_pos: s.asl_gamma_pos, gamma_neg: s.asl_gamma_neg, clip: s.asl_clip },
            BinaryLoss::Hill => Self::Hill { lambda: s.hill_lambda, margin: s.hill_margin, gamma: s.hill_gamma },
        }
    }

    /// Per-sample loss and derivative for the positive (`y = 1`) and negative (`y = 0`) targets.
    fn terms(&self, z: f64) -> ((f64, f64), (f64, f64)) {
        match *self {
            Self::Bce => {
                let p = sigmoid(z);
                ((softplus(-z), p - 1.0), (softplus(z), p))
            }
            Self::Focal { gamma } => (focal_pos(z, gamma), focal_neg(z, gamma)),
            Self::Asl { gamma_pos, gamma_neg, clip } => {
                let p = sigmoid(z);
                let q = p - clip;
                let neg = if q <= 0.0 {
                    (0.0, 0.0)
                } else {
                    let log_1q = (1.0 - q).ln();
                    let value = -q.powf(gamma_neg) * log_1q;
                    let dq = -dpow(q, gamma_neg) * log_1q + q.powf(gamma_neg) / (1.0 - q);
                    (value, dq * p * (1.0 - p))
                };
                (focal_pos(z, gamma_pos), neg)
            }
            Self::Hill { lambda, margin, gamma } => {
                let p = sigmoid(z);
                let neg = ((lambda - p) * p * p, (2.0 * lambda * p - 3.0 * p * p) * p * (1.0 - p));
                (focal_pos(z - margin, gamma), neg)
            }
        }
    }

    /// Loss and `d loss / d z` for a soft label `y` in `[0, 1]`.
    pub fn eval(&self, z: f64, y: f64) -> (f64, f64) {
        let ((lp, gp), (ln, gn)) = self.terms(z);
        (y * lp + (1.0 - y) * ln, y * gp + (1.0 - y) * gn)
    }
}

/// Cox negative partial log-likelihood (Breslow ties) and its gradient in the risks.
/// Returns `None` when there are no events.
pub fn cox_nll(risks: &[f64], times: &[f64], events: &[f64]) -> Option<(f64, Vec<f64>)> {
    let n = risks.len();
    let d: f64 = events.iter().sum();
    if d <= 0.0 {
        return None;
    }
    let shift = risks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = risks.iter().map(|r| (r - shift).exp()).collect();
    // Risk-set sum S_i = sum over t_j >= t_i.
    let s: Vec<f64> = (0..n).map(|i| (0..n).filter(|&j| times[j] >= times[i]).map(|j| w[j]).sum()).collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for i in 0..n {
        if events[i] > 0.0 {
            loss -= events[i] * (risks[i] - shift - s[i].ln());
            grad[i] -= events[i];
            for k in 0..n {
                if times[k] >= times[i] {
                    grad[k] += events[i] * w[k] / s[i];
                }
            }
        }
    }
    Some((loss / d, grad.into_iter().map(|g| g / d).collect()))
}

/// Per-endpoint `(positive, negative)` weights for inverse-frequency weighting.
pub type ClassWeights = Vec<(f64, f64)>;

/// Inverse-frequency weights `n / (2 n_c)` from observed binary labels in `(N, E)` row-major layout.
pub fn inverse_frequency_weights(labels: &[f64], masks: &[bool], kinds: &[LabelKind]) -> ClassWeights {
    let e = kinds.len();
    (0..e)
        .map(|j| {
            if kinds[j] != LabelKind::Binary {
                return (1.0, 1.0);
            }
            let obs: Vec<f64> = (j..labels.len()).step_by(e).filter(|&k| masks[k]).map(|k| labels[k]).collect();
            let pos = obs.iter().filter(|&&y| y >= 0.5).count() as f64;
            let neg = obs.len() as f64 - pos;
            if pos == 0.0 || neg == 0.0 {
                (1.0, 1.0)
            } else {
                (obs.len() as f64 / (2.0 * pos), obs.len() as f64 / (2.0 * neg))
            }
        })
        .collect()
}

/// Complete loss over `(B, E)` outputs.
#[derive(Clone, Debug)]
pub struct MaskedLoss {
    pub binary: BinaryObjective,
    pub kinds: Vec<LabelKind>,
    pub class_weights: Option<ClassWeights>,
}

/// Loss value and its gradient in the outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Endpoints that contributed to the mean.
    pub active: Vec<bool>,
}

impl MaskedLoss {
    pub fn new(binary: BinaryObjective, kinds: Vec<LabelKind>) -> Self {
        Self { binary, kinds, class_weights: None }
    }

    pub fn from_settings(s: &LossSettings, kinds: Vec<LabelKind>, train_labels: &[f64], train_masks: &[bool]) -> Self {
        let mut loss = Self::new(BinaryObjective::from_settings(s), kinds);
        if s.class_weighting == ClassWeighting::InverseFrequency {
            loss.class_weights = Some(inverse_frequency_weights(train_labels, train_masks, &loss.kinds));
        }
        loss
    }

    /// Evaluates on row-major `(B, E)` buffers. Masked entries are never read
    /// and receive exactly zero gradient.
    pub fn evaluate(&self, outputs: &[f64], labels: &[f64], times: &[f64], masks: &[bool]) -> Result<LossValue, LossError> {
        let e = self.kinds.len();
        if e == 0 || !outputs.len().is_multiple_of(e) || [labels.len(), times.len(), masks.len()].iter().any(|&n| n != outputs.len()) {
            return Err(LossError::Shape(format!("{} outputs, {} labels, {} times, {} masks for {e} endpoints", outputs.len(), labels.len(), times.len(), masks.len())));
        }
        let b = outputs.len() / e;
        let mut grad = vec![0.0; outputs.len()];
        let mut per_endpoint = Vec::new();
        let mut active = vec![false; e];
        for j in 0..e {
            let obs: Vec<usize> = (0..b).map(|i| i * e + j).filter(|&k| masks[k]).collect();
            if obs.is_empty() {
                continue;
            }
            active[j] = true;
            let n = obs.len() as f64;
            match self.kinds[j] {
                LabelKind::Binary => {
                    let (wp, wn) = self.class_weights.as_ref().map_or((1.0, 1.0), |w| w[j]);
                    let mut total = 0.0;
                    for &k in &obs {
                        let y = labels[k];
                        let (l, g) = self.binary.eval(outputs[k], y);
                        let w = y * wp + (1.0 - y) * wn;
                        total += w * l;
                        grad[k] = w * g / n;
                    }
                    per_endpoint.push((j, total / n));
                }
                LabelKind::Event => {
                    let r: Vec<f64> = obs.iter().map(|&k| outputs[k]).collect();
                    let t: Vec<f64> = obs.iter().map(|&k| times[k]).collect();
                    let d: Vec<f64> = obs.iter().map(|&k| labels[k]).collect();
                    match cox_nll(&r, &t, &d) {
                        Some((l, g)) => {
                            for (&k, gk) in obs.iter().zip(g) {
                                grad[k] = gk;
                            }
                            per_endpoint.push((j, l));
                        }
                        None => {
                            log::warn!("no events for endpoint {j} in this batch; its loss is zero");
                            per_endpoint.push((j, 0.0));
                        }
                    }
                }
            }
        }
        if per_endpoint.is_empty() {
            return Err(LossError::AllMasked);
        }
        let m = per_endpoint.len() as f64;
        for g in &mut grad {
            *g /= m;
        }
        Ok(LossValue { value: per_endpoint.iter().map(|(_, l)| l).sum::<f64>() / m, grad, active })
    }

    /// Differentiable scalar loss over model outputs `(B, E)`.
    pub fn forward<T: Element>(&self, outputs: &Var<T>, labels: &Tensor<f32>, times: &Tensor<f32>, masks: &Tensor<f32>) -> Result<Var<T>, LossError> {
        if outputs.shape() != labels.shape() {
            return Err(LossError::Shape(format!("outputs {:?} vs labels {:?}", outputs.shape(), labels.shape())));
        }
        let to64 = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let mask: Vec<bool> = masks.data().iter().map(|&m| m > 0.5).collect();
        let out = outputs.value().to_f64_vec();
        let lv = self.evaluate(&out, &to64(labels), &to64(times), &mask)?;
        let shape = outputs.shape().to_vec();
        let grad = Tensor::from_vec(lv.grad.iter().map(|&g| T::of(g)).collect(), &shape);
        Ok(Var::from_op(
            Tensor::scalar(T::of(lv.value)),
            vec![outputs.clone()],
            Box::new(move |g: &Tensor<T>, _| {
                let s = g.item();
                vec![Some(grad.map(|v| v * s))]
            }),
        ))
    }
}
