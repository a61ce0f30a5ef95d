//! 3D EfficientNetV2: fused-MBConv early stages, MBConv with squeeze-excitation later.

use rand::RngCore;
use voxtrain_tensor::nn::{join, Conv3d, Ctx, Module, Slot};
use voxtrain_tensor::{Conv3dGeometry, Element, Var};

use crate::blocks::{Act, ConvBn, Resize, Trunk};

const HEAD_CHANNELS: usize = 1280;

#[derive(Clone, Copy)]
struct StageDef {
    fused: bool,
    expand: usize,
    stride: usize,
    out: usize,
    layers: usize,
}

const fn f(expand: usize, stride: usize, out: usize, layers: usize) -> StageDef {
    StageDef { fused: true, expand, stride, out, layers }
}

const fn m(expand: usize, stride: usize, out: usize, layers: usize) -> StageDef {
    StageDef { fused: false, expand, stride, out, layers }
}

/// Stem width and stage table per variant.
fn table(size: &str) -> Option<(usize, &'static [StageDef])> {
    const XS: &[StageDef] = &[f(1, 1, 16, 1), f(4, 2, 32, 2), f(4, 2, 48, 2), m(4, 2, 96, 3), m(6, 1, 112, 5), m(6, 2, 192, 8)];
    const S: &[StageDef] = &[f(1, 1, 24, 2), f(4, 2, 48, 4), f(4, 2, 64, 4), m(4, 2, 128, 6), m(6, 1, 160, 9), m(6, 2, 256, 15)];
    const M: &[StageDef] = &[
        f(1, 1, 24, 3),
        f(4, 2, 48, 5),
        f(4, 2, 80, 5),
        m(4, 2, 160, 7),
        m(6, 1, 176, 14),
        m(6, 2, 304, 18),
        m(6, 1, 512, 5),
    ];
    const L: &[StageDef] = &[
        f(1, 1, 32, 4),
        f(4, 2, 64, 7),
        f(4, 2, 96, 7),
        m(4, 2, 192, 10),
        m(6, 1, 224, 19),
        m(6, 2, 384, 25),
        m(6, 1, 640, 7),
    ];
    const XL: &[StageDef] = &[
        f(1, 1, 32, 4),
        f(4, 2, 64, 8),
        f(4, 2, 96, 8),
        m(4, 2, 192, 16),
        m(6, 1, 256, 24),
        m(6, 2, 512, 32),
        m(6, 1, 640, 8),
    ];
    Some(match size.to_ascii_uppercase().as_str() {
        "XS" => (32, XS),
        "S" => (24, S),
        "M" => (24, M),
        "L" => (32, L),
        "XL" => (32, XL),
        _ => return None,
    })
}

struct SqueezeExcite<T: Element> {
    reduce: Conv3d<T>,
    expand: Conv3d<T>,
}

impl<T: Element> SqueezeExcite<T> {
    fn forward(&self, x: &Var<T>) -> Var<T> {
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let s = x.global_avg_pool().reshape(&[b, c, 1, 1, 1]);
        let s = self.expand.forward(&self.reduce.forward(&s).silu()).sigmoid();
        x.mul(&s)
    }
}

impl<T: Element> Module<T> for SqueezeExcite<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        self.reduce.collect(&join(prefix, "reduce"), out);
        self.expand.collect(&join(prefix, "expand"), out);
    }
}

struct MbBlock<T: Element> {
    convs: Vec<ConvBn<T>>,
    se: Option<SqueezeExcite<T>>,
    /// Index in `convs` after which squeeze-excitation runs.
    se_after: usize,
    residual: bool,
}

impl<T: Element> MbBlock<T> {
    fn new(def: StageDef, c_in: usize, stride: usize, rng: &mut dyn RngCore) -> Self {
        let hidden = c_in * def.expand;
        let k3 = Conv3dGeometry::new(3, stride, 1);
        let pw = Conv3dGeometry::new(1, 1, 0);
        let (convs, se) = if def.fused {
            let convs = if def.expand == 1 {
                vec![ConvBn::new(c_in, def.out, k3, Act::Silu, rng)]
            } else {
                vec![ConvBn::new(c_in, hidden, k3, Act::Silu, rng), ConvBn::new(hidden, def.out, pw, Act::Identity, rng)]
            };
            (convs, None)
        } else {
            let convs = vec![
                ConvBn::new(c_in, hidden, pw, Act::Silu, rng),
                ConvBn::new(hidden, hidden, k3.with_groups(hidden), Act::Silu, rng),
                ConvBn::new(hidden, def.out, pw, Act::Identity, rng),
            ];
            let squeezed = (c_in / 4).max(1);
            let se = SqueezeExcite {
                reduce: Conv3d::new(hidden, squeezed, pw, true, rng),
                expand: Conv3d::new(squeezed, hidden, pw, true, rng),
            };
            (convs, Some(se))
        };
        Self { convs, se, se_after: 1, residual: stride == 1 && c_in == def.out }
    }

    fn forward(&self, x: &Var<T>, ctx: &mut Ctx<'_>) -> Var<T> {
        let mut h = x.clone();
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(&h, ctx);
            if i == self.se_after {
                if let Some(se) = &self.se {
                    h = se.forward(&h);
                }
            }
        }
        if self.residual {
            h.add(x)
        } else {
            h
        }
    }
}

impl<T: Element> Module<T> for MbBlock<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        self.convs.collect(&join(prefix, "convs"), out);
        self.se.collect(&join(prefix, "se"), out);
    }
}

pub struct EfficientNetV2<T: Element> {
    stem: ConvBn<T>,
    blocks: Vec<MbBlock<T>>,
    head: ConvBn<T>,
}

impl<T: Element> EfficientNetV2<T> {
    pub fn new(in_channels: usize, size: &str, rng: &mut dyn RngCore) -> Self {
        let (stem_width, stages) = table(size).expect("validated efficientnetv2 size");
        let stem = ConvBn::new(in_channels, stem_width, Conv3dGeometry::new(3, 2, 1), Act::Silu, rng);
        let mut c = stem_width;
        let mut blocks = Vec::new();
        for def in stages {
            for j in 0..def.layers {
                let stride = if j == 0 { def.stride } else { 1 };
                blocks.push(MbBlock::new(*def, c, stride, rng));
                c = def.out;
            }
        }
        let head = ConvBn::new(c, HEAD_CHANNELS, Conv3dGeometry::new(1, 1, 0), Act::Silu, rng);
        Self { stem, blocks, head }
    }
}

impl<T: Element> Module<T> for EfficientNetV2<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        self.stem.collect(&join(prefix, "stem"), out);
        self.blocks.collect(&join(prefix, "blocks"), out);
        self.head.collect(&join(prefix, "head"), out);
    }
}

impl<T: Element> Trunk<T> for EfficientNetV2<T> {
    fn forward_map(&self, x: &Var<T>, ctx: &mut Ctx<'_>) -> Var<T> {
        let mut h = self.stem.forward(x, ctx);
        for b in &self.blocks {
            h = b.forward(&h, ctx);
        }
        self.head.forward(&h, ctx)
    }

    fn out_channels(&self) -> usize {
        HEAD_CHANNELS
    }

    fn steps(&self) -> Vec<Resize> {
        let mut steps = vec![self.stem.resize()];
        for b in &self.blocks {
            steps.extend(b.convs.iter().map(ConvBn::resize));
        }
        steps
    }
}
