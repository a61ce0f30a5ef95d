//! Stateful layers holding [`Param`]s, plus the [`Module`] trait for
//! enumerating named parameters and buffers.

use std::cell::RefCell;
use std::rc::Rc;

use rand::RngCore;

use crate::element::Element;
use crate::ops::Conv3dGeometry;
use crate::tensor::Tensor;
use crate::var::{Param, Var};

/// Non-trainable persistent state (e.g. running statistics).
#[derive(Clone, Debug)]
pub struct Buffer<T: Element>(Rc<RefCell<Tensor<T>>>);

impl<T: Element> Buffer<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self(Rc::new(RefCell::new(value)))
    }

    pub fn get(&self) -> Tensor<T> {
        self.0.borrow().clone()
    }

    pub fn set(&self, value: Tensor<T>) {
        assert_eq!(value.shape(), self.0.borrow().shape(), "buffer shape is fixed");
        *self.0.borrow_mut() = value;
    }
}

#[derive(Clone, Debug)]
pub enum Slot<T: Element> {
    Param(Param<T>),
    Buffer(Buffer<T>),
}

impl<T: Element> Slot<T> {
    pub fn value(&self) -> Tensor<T> {
        match self {
            Slot::Param(p) => p.value(),
            Slot::Buffer(b) => b.get(),
        }
    }

    pub fn set(&self, value: Tensor<T>) {
        match self {
            Slot::Param(p) => p.set_value(value),
            Slot::Buffer(b) => b.set(value),
        }
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub trait Module<T: Element> {
    /// Appends every parameter and buffer under `prefix`.
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>);

    fn named_slots(&self) -> Vec<(String, Slot<T>)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn parameters(&self) -> Vec<Param<T>> {
        self.named_slots()
            .into_iter()
            .filter_map(|(_, s)| match s {
                Slot::Param(p) => Some(p),
                Slot::Buffer(_) => None,
            })
            .collect()
    }

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }
}

impl<T: Element, M: Module<T>> Module<T> for Vec<M> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        for (i, m) in self.iter().enumerate() {
            m.collect(&join(prefix, &i.to_string()), out);
        }
    }
}

impl<T: Element, M: Module<T>> Module<T> for Option<M> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        if let Some(m) = self {
            m.collect(prefix, out);
        }
    }
}

/// Forward-pass mode: training enables dropout and batch statistics.
pub struct Ctx<'a> {
    train: bool,
    rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Ctx<'static> {
        Ctx { train: false, rng: None }
    }

    pub fn train(rng: &'a mut dyn RngCore) -> Self {
        Ctx { train: true, rng: Some(rng) }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn rng(&mut self) -> Option<&mut dyn RngCore> {
        match &mut self.rng {
            Some(r) => Some(&mut **r),
            None => None,
        }
    }
}

/// Inverted dropout; identity outside training or when `p == 0`.
pub fn dropout<T: Element>(x: &Var<T>, p: f64, ctx: &mut Ctx<'_>) -> Var<T> {
    if !ctx.is_train() || p <= 0.0 {
        return x.clone();
    }
    let rng = ctx.rng().expect("training context carries an rng");
    let scale = T::of(1.0 / (1.0 - p));
    let threshold = (p * u32::MAX as f64) as u32;
    let mask: Vec<T> = (0..x.value().numel()).map(|_| if rng.next_u32() < threshold { T::zero() } else { scale }).collect();
    x.mul_const(&Tensor::from_vec(mask, x.shape()))
}

/// Kaiming-normal weights `N(0, 2 / fan_in)`.
pub fn kaiming_normal<T: Element>(shape: &[usize], fan_in: usize, rng: &mut dyn RngCore) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

#[derive(Debug)]
pub struct Linear<T: Element> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Element> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, bias: bool, rng: &mut dyn RngCore) -> Self {
        Self {
            weight: Param::new(kaiming_normal(&[out_features, in_features], in_features, rng)),
            bias: bias.then(|| Param::new(Tensor::zeros(&[out_features]))),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let b = self.bias.as_ref().map(|b| b.var());
        x.linear(&self.weight.var(), b.as_ref())
    }
}

impl<T: Element> Module<T> for Linear<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        out.push((join(prefix, "weight"), Slot::Param(self.weight.clone())));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), Slot::Param(b.clone())));
        }
    }
}

#[derive(Debug)]
pub struct Conv3d<T: Element> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub geometry: Conv3dGeometry,
}

impl<T: Element> Conv3d<T> {
    pub fn new(c_in: usize, c_out: usize, geometry: Conv3dGeometry, bias: bool, rng: &mut dyn RngCore) -> Self {
        let cin_g = c_in / geometry.groups;
        let [k0, k1, k2] = geometry.kernel;
        let fan_in = cin_g * k0 * k1 * k2;
        Self {
            weight: Param::new(kaiming_normal(&[c_out, cin_g, k0, k1, k2], fan_in, rng)),
            bias: bias.then(|| Param::new(Tensor::zeros(&[c_out]))),
            geometry,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let b = self.bias.as_ref().map(|b| b.var());
        x.conv3d(&self.weight.var(), b.as_ref(), self.geometry)
    }
}

impl<T: Element> Module<T> for Conv3d<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        out.push((join(prefix, "weight"), Slot::Param(self.weight.clone())));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), Slot::Param(b.clone())));
        }
    }
}

#[derive(Debug)]
pub struct BatchNorm<T: Element> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::ones(&[channels])),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Buffer::new(Tensor::zeros(&[channels])),
            running_var: Buffer::new(Tensor::ones(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Var<T>, ctx: &Ctx<'_>) -> Var<T> {
        if ctx.is_train() {
            let (y, stats) = x.batch_norm(&self.gamma.var(), &self.beta.var(), None, self.eps);
            let stats = stats.expect("training batch norm returns statistics");
            let mom = T::of(self.momentum);
            let blend = |old: Tensor<T>, new: &[T]| {
                let data = old.data().iter().zip(new).map(|(&o, &n)| o * (T::one() - mom) + n * mom).collect();
                Tensor::from_vec(data, old.shape())
            };
            self.running_mean.set(blend(self.running_mean.get(), &stats.mean));
            self.running_var.set(blend(self.running_var.get(), &stats.var));
            y
        } else {
            let (m, v) = (self.running_mean.get(), self.running_var.get());
            x.batch_norm(&self.gamma.var(), &self.beta.var(), Some((m.data(), v.data())), self.eps).0
        }
    }
}

impl<T: Element> Module<T> for BatchNorm<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        out.push((join(prefix, "weight"), Slot::Param(self.gamma.clone())));
        out.push((join(prefix, "bias"), Slot::Param(self.beta.clone())));
        out.push((join(prefix, "running_mean"), Slot::Buffer(self.running_mean.clone())));
        out.push((join(prefix, "running_var"), Slot::Buffer(self.running_var.clone())));
    }
}

#[derive(Debug)]
pub struct LayerNorm<T: Element> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
}

impl<T: Element> LayerNorm<T> {
    pub fn new(dim: usize, eps: f64) -> Self {
        Self { gamma: Param::new(Tensor::ones(&[dim])), beta: Param::new(Tensor::zeros(&[dim])), eps }
    }

    /// Normalizes the last axis.
    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        x.layer_norm(&self.gamma.var(), &self.beta.var(), self.eps)
    }

    /// Normalizes axis 1 of a `(B, C, ...)` tensor.
    pub fn forward_channels_first(&self, x: &Var<T>) -> Var<T> {
        let nd = x.shape().len();
        let mut to_last: Vec<usize> = vec![0];
        to_last.extend(2..nd);
        to_last.push(1);
        let mut back = vec![0, nd - 1];
        back.extend(1..nd - 1);
        self.forward(&x.permute(&to_last)).permute(&back)
    }
}

impl<T: Element> Module<T> for LayerNorm<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        out.push((join(prefix, "weight"), Slot::Param(self.gamma.clone())));
        out.push((join(prefix, "bias"), Slot::Param(self.beta.clone())));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn dropout_is_identity_in_eval() {
        let x = Var::constant(Tensor::<f32>::ones(&[4, 4]));
        let y = dropout(&x, 0.5, &mut Ctx::eval());
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = Var::constant(Tensor::<f64>::ones(&[100_000]));
        let y = dropout(&x, 0.3, &mut Ctx::train(&mut rng));
        let mean = y.value().sum() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn batch_norm_updates_running_stats_only_in_training() {
        let bn = BatchNorm::<f64>::new(1);
        let x = Var::constant(Tensor::from_vec(vec![1.0, 3.0], &[2, 1]));
        bn.forward(&x, &Ctx::eval());
        assert_eq!(bn.running_mean.get().data(), &[0.0]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        bn.forward(&x, &Ctx::train(&mut rng));
        assert!((bn.running_mean.get().data()[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var.get().data()[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn channels_first_layer_norm_round_trips_layout() {
        let ln = LayerNorm::<f64>::new(3, 1e-6);
        let x = Var::constant(Tensor::from_vec((0..24).map(f64::from).collect(), &[2, 3, 2, 2]));
        let y = ln.forward_channels_first(&x);
        assert_eq!(y.shape(), &[2, 3, 2, 2]);
        // each spatial position normalized across channels
        let v = y.value();
        let s: f64 = (0..3).map(|c| v.data()[c * 4]).sum();
        assert!(s.abs() < 1e-9);
    }
}
