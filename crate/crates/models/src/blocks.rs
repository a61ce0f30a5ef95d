//! Layers shared by several encoders.

use rand::RngCore;
use voxtrain_tensor::nn::{join, BatchNorm, Conv3d, Ctx, LayerNorm, Linear, Module, Slot};
use voxtrain_tensor::{Conv3dGeometry, Element, Param, PoolGeometry, Tensor, Var};

/// A spatial size change (kernel, stride, padding per axis).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Resize {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Resize {
    pub fn apply(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }
}

impl From<Conv3dGeometry> for Resize {
    fn from(g: Conv3dGeometry) -> Self {
        Self { kernel: g.kernel, stride: g.stride, padding: g.padding }
    }
}

impl From<PoolGeometry> for Resize {
    fn from(g: PoolGeometry) -> Self {
        Self { kernel: [g.kernel; 3], stride: [g.stride; 3], padding: [g.padding; 3] }
    }
}

pub fn chain(steps: &[Resize], input: [usize; 3]) -> Option<[usize; 3]> {
    steps.iter().try_fold(input, |s, r| r.apply(s))
}

/// Convolutional feature extractor producing a `(B, C, g0, g1, g2)` map.
pub trait Trunk<T: Element>: Module<T> {
    fn forward_map(&self, x: &Var<T>, ctx: &mut Ctx<'_>) -> Var<T>;
    fn out_channels(&self) -> usize;
    /// Every size-changing operation, in order.
    fn steps(&self) -> Vec<Resize>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Relu,
    Silu,
    Identity,
}

impl Act {
    pub fn apply<T: Element>(self, x: &Var<T>) -> Var<T> {
        match self {
            Act::Relu => x.relu(),
            Act::Silu => x.silu(),
            Act::Identity => x.clone(),
        }
    }
}

/// Bias-free convolution followed by batch norm and an activation.
pub struct ConvBn<T: Element> {
    pub conv: Conv3d<T>,
    pub bn: BatchNorm<T>,
    pub act: Act,
}

impl<T: Element> ConvBn<T> {
    pub fn new(c_in: usize, c_out: usize, geo: Conv3dGeometry, act: Act, rng: &mut dyn RngCore) -> Self {
        Self { conv: Conv3d::new(c_in, c_out, geo, false, rng), bn: BatchNorm::new(c_out), act }
    }

    pub fn forward(&self, x: &Var<T>, ctx: &mut Ctx<'_>) -> Var<T> {
        self.act.apply(&self.bn.forward(&self.conv.forward(x), ctx))
    }

    pub fn resize(&self) -> Resize {
        self.conv.geometry.into()
    }
}

impl<T: Element> Module<T> for ConvBn<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        self.conv.collect(&join(prefix, "conv"), out);
        self.bn.collect(&join(prefix, "bn"), out);
    }
}

/// Multi-head self-attention over `(B, N, D)` tokens.
pub struct Attention<T: Element> {
    qkv: Linear<T>,
    proj: Linear<T>,
    heads: usize,
}

impl<T: Element> Attention<T> {
    pub fn new(dim: usize, heads: usize, rng: &mut dyn RngCore) -> Self {
        Self { qkv: Linear::new(dim, 3 * dim, true, rng), proj: Linear::new(dim, dim, true, rng), heads }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (h, dh) = (self.heads, d / self.heads);
        // (B, N, 3, H, dh) -> (3, B, H, N, dh)
        let qkv = self.qkv.forward(x).reshape(&[b, n, 3, h, dh]).permute(&[2, 0, 3, 1, 4]);
        let part = |i: usize| qkv.narrow(0, i, 1).reshape(&[b * h, n, dh]);
        let (q, k, v) = (part(0), part(1), part(2));
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let attn = q.matmul_t(&k).mul_scalar(scale).softmax();
        let ctx = attn.matmul(&v).reshape(&[b, h, n, dh]).permute(&[0, 2, 1, 3]).reshape(&[b, n, d]);
        self.proj.forward(&ctx)
    }
}

impl<T: Element> Module<T> for Attention<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        self.qkv.collect(&join(prefix, "qkv"), out);
        self.proj.collect(&join(prefix, "proj"), out);
    }
}

/// Pre-norm transformer block.
pub struct TransformerBlock<T: Element> {
    norm1: LayerNorm<T>,
    attn: Attention<T>,
    norm2: LayerNorm<T>,
    fc1: Linear<T>,
    fc2: Linear<T>,
}

impl<T: Element> TransformerBlock<T> {
    pub fn new(dim: usize, heads: usize, mlp_dim: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            norm1: LayerNorm::new(dim, 1e-6),
            attn: Attention::new(dim, heads, rng),
            norm2: LayerNorm::new(dim, 1e-6),
            fc1: Linear::new(dim, mlp_dim, true, rng),
            fc2: Linear::new(mlp_dim, dim, true, rng),
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let x = x.add(&self.attn.forward(&self.norm1.forward(x)));
        let m = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)).gelu());
        x.add(&m)
    }
}

impl<T: Element> Module<T> for TransformerBlock<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        self.norm1.collect(&join(prefix, "norm1"), out);
        self.attn.collect(&join(prefix, "attn"), out);
        self.norm2.collect(&join(prefix, "norm2"), out);
        self.fc1.collect(&join(prefix, "fc1"), out);
        self.fc2.collect(&join(prefix, "fc2"), out);
    }
}

/// Fixed 3D sine-cosine position table of shape `(g0 * g1 * g2, dim)`.
///
/// Each axis gets `2 * (dim / 6)` channels; leftover channels stay zero.
pub fn sincos_3d<T: Element>(grid: [usize; 3], dim: usize) -> Tensor<T> {
    let per_axis = dim / 6;
    let n: usize = grid.iter().product();
    let mut out = vec![T::zero(); n * dim];
    let mut token = 0;
    for i0 in 0..grid[0] {
        for i1 in 0..grid[1] {
            for i2 in 0..grid[2] {
                let row = &mut out[token * dim..(token + 1) * dim];
                for (axis, &pos) in [i0, i1, i2].iter().enumerate() {
                    for k in 0..per_axis {
                        let freq = 1.0 / 10000f64.powf(k as f64 / per_axis as f64);
                        let angle = pos as f64 * freq;
                        row[axis * 2 * per_axis + k] = T::of(angle.sin());
                        row[axis * 2 * per_axis + per_axis + k] = T::of(angle.cos());
                    }
                }
                token += 1;
            }
        }
    }
    Tensor::from_vec(out, &[n, dim])
}

/// Transformer over a token grid, aggregated through a class token.
pub struct TokenEncoder<T: Element> {
    cls: Param<T>,
    blocks: Vec<TransformerBlock<T>>,
    norm: LayerNorm<T>,
    dim: usize,
}

impl<T: Element> TokenEncoder<T> {
    pub fn new(dim: usize, depth: usize, heads: usize, mlp_dim: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            cls: Param::new(Tensor::randn(&[1, 1, dim], 0.02, rng)),
            blocks: (0..depth).map(|_| TransformerBlock::new(dim, heads, mlp_dim, rng)).collect(),
            norm: LayerNorm::new(dim, 1e-6),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `map` is `(B, dim, g0, g1, g2)`; returns the normalized class token `(B, dim)`.
    pub fn forward(&self, map: &Var<T>) -> Var<T> {
        let s = map.shape();
        let (b, grid) = (s[0], [s[2], s[3], s[4]]);
        let n: usize = grid.iter().product();
        let tokens = map.reshape(&[b, self.dim, n]).permute(&[0, 2, 1]);
        let tokens = tokens.add(&Var::constant(sincos_3d(grid, self.dim).reshape(&[1, n, self.dim])));
        let cls = Var::concat(&vec![self.cls.var(); b], 0);
        let mut x = Var::concat(&[cls, tokens], 1);
        for block in &self.blocks {
            x = block.forward(&x);
        }
        self.norm.forward(&x.narrow(1, 0, 1).reshape(&[b, self.dim]))
    }
}

impl<T: Element> Module<T> for TokenEncoder<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        out.push((join(prefix, "cls_token"), Slot::Param(self.cls.clone())));
        self.blocks.collect(&join(prefix, "blocks"), out);
        self.norm.collect(&join(prefix, "norm"), out);
    }
}
