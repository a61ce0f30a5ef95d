//! Optimizers, learning-rate schedules and early stopping.

use voxtrain_tensor::{Element, Param};

use crate::config::{OptimizerName, OptimizerSettings, SchedulerName, SchedulerSettings};

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64, weight_decay: f64 },
    /// Adam with L2 regularization folded into the gradient.
    Adam { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
    /// Adam with decoupled weight decay.
    AdamW { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
    /// Adam whose per-element step is clamped into bounds that tighten
    /// towards `final_lr` at rate `gamma`.
    AdaBound { beta1: f64, beta2: f64, eps: f64, weight_decay: f64, final_lr: f64, gamma: f64 },
}

impl OptimizerKind {
    pub fn from_settings(s: &OptimizerSettings) -> Self {
        let (beta1, beta2, eps, weight_decay) = (s.betas[0], s.betas[1], s.eps, s.weight_decay);
        match s.name {
            OptimizerName::Sgd => Self::Sgd { momentum: s.momentum, weight_decay },
            OptimizerName::Adam => Self::Adam { beta1, beta2, eps, weight_decay },
            OptimizerName::Adamw => Self::AdamW { beta1, beta2, eps, weight_decay },
            OptimizerName::Adabound => Self::AdaBound { beta1, beta2, eps, weight_decay, final_lr: s.final_lr, gamma: s.gamma },
        }
    }
}

pub struct Optimizer<T: Element> {
    kind: OptimizerKind,
    params: Vec<Param<T>>,
    base_lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl<T: Element> Optimizer<T> {
    pub fn new(kind: OptimizerKind, params: Vec<Param<T>>, base_lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self { kind, params, base_lr, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Number of steps taken.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update with learning rate `lr` using the accumulated gradients.
    pub fn step(&mut self, lr: f64) {
        self.t += 1;
        let t = self.t as f64;
        for (i, p) in self.params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grad.data();
            match self.kind {
                OptimizerKind::Sgd { momentum, weight_decay } => p.update(|w| {
                    for k in 0..w.len() {
                        let gk = g[k].f64() + weight_decay * w[k].f64();
                        m[k] = momentum * m[k] + gk;
                        w[k] = T::of(w[k].f64() - lr * m[k]);
                    }
                }),
                OptimizerKind::Adam { beta1, beta2, eps, weight_decay } | OptimizerKind::AdamW { beta1, beta2, eps, weight_decay } => {
                    let decoupled = matches!(self.kind, OptimizerKind::AdamW { .. });
                    let (bc1, bc2) = (1.0 - beta1.powf(t), 1.0 - beta2.powf(t));
                    p.update(|w| {
                        for k in 0..w.len() {
                            let mut wk = w[k].f64();
                            let mut gk = g[k].f64();
                            if decoupled {
                                wk -= lr * weight_decay * wk;
                            } else {
                                gk += weight_decay * wk;
                            }
                            m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                            v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                            wk -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
                            w[k] = T::of(wk);
                        }
                    })
                }
                OptimizerKind::AdaBound { beta1, beta2, eps, weight_decay, final_lr, gamma } => {
                    let final_lr = final_lr * lr / self.base_lr;
                    let lower = final_lr * (1.0 - 1.0 / (gamma * t + 1.0));
                    let upper = final_lr * (1.0 + 1.0 / (gamma * t));
                    let step_size = lr * (1.0 - beta2.powf(t)).sqrt() / (1.0 - beta1.powf(t));
                    p.update(|w| {
                        for k in 0..w.len() {
                            let wk = w[k].f64();
                            let gk = g[k].f64() + weight_decay * wk;
                            m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                            v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                            let rate = (step_size / (v[k].sqrt() + eps)).clamp(lower, upper);
                            w[k] = T::of(wk - rate * m[k]);
                        }
                    })
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scheduler {
    name: SchedulerName,
    base_lr: f64,
    lr: f64,
    total_epochs: usize,
    step_size: usize,
    factor: f64,
    patience: usize,
    min_lr: f64,
    higher_is_better: bool,
    best: Option<f64>,
    bad_epochs: usize,
}

impl Scheduler {
    pub fn new(s: &SchedulerSettings, base_lr: f64, total_epochs: usize, higher_is_better: bool) -> Self {
        Self {
            name: s.name,
            base_lr,
            lr: base_lr,
            total_epochs: total_epochs.max(1),
            step_size: s.step_size.max(1),
            factor: s.factor,
            patience: s.patience,
            min_lr: s.min_lr,
            higher_is_better,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Advances after `completed` epochs; `monitored` feeds the plateau rule.
    pub fn step(&mut self, completed: usize, monitored: Option<f64>) {
        match self.name {
            SchedulerName::None => {}
            SchedulerName::Step => self.lr = self.base_lr * self.factor.powi((completed / self.step_size) as i32),
            SchedulerName::Cosine => {
                let frac = (completed.min(self.total_epochs) as f64) / self.total_epochs as f64;
                self.lr = self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
            }
            SchedulerName::Plateau => {
                let Some(v) = monitored.filter(|v| v.is_finite()) else {
                    self.bad_epochs += 1;
                    return self.maybe_reduce();
                };
                let improved = self.best.is_none_or(|b| if self.higher_is_better { v > b } else { v < b });
                if improved {
                    self.best = Some(v);
                    self.bad_epochs = 0;
                } else {
                    self.bad_epochs += 1;
                    self.maybe_reduce();
                }
            }
        }
    }

    fn maybe_reduce(&mut self) {
        if self.bad_epochs > self.patience {
            self.lr = (self.lr * self.factor).max(self.min_lr);
            self.bad_epochs = 0;
        }
    }
}

/// Tracks the best monitored value; training stops once `patience`
/// consecutive epochs fail to improve on it.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub higher_is_better: bool,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub counter: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, higher_is_better: bool) -> Self {
        Self { patience, higher_is_better, best: None, best_epoch: 0, counter: 0 }
    }

    /// Records `value` for `epoch` (1-based). Returns whether it is a new best.
    pub fn update(&mut self, epoch: usize, value: f64) -> bool {
        let better = value.is_finite() && self.best.is_none_or(|b| if self.higher_is_better { value > b } else { value < b });
        if better {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.counter = 0;
        } else {
            self.counter += 1;
        }
        better
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.counter >= self.patience
    }
}
