//! 3D densely connected networks (growth 32, bottleneck width 4x).

use rand::RngCore;
use voxtrain_tensor::nn::{join, BatchNorm, Conv3d, Ctx, Module, Slot};
use voxtrain_tensor::{Conv3dGeometry, Element, PoolGeometry, Var};

use crate::blocks::{Act, ConvBn, Resize, Trunk};

const GROWTH: usize = 32;
const BN_SIZE: usize = 4;
const INIT_FEATURES: usize = 64;
const STEM_POOL: PoolGeometry = PoolGeometry { kernel: 3, stride: 2, padding: 1 };
const TRANSITION_POOL: PoolGeometry = PoolGeometry { kernel: 2, stride: 2, padding: 0 };

/// Pre-activation `BN -> ReLU -> conv`.
struct BnReluConv<T: Element> {
    bn: BatchNorm<T>,
    conv: Conv3d<T>,
}

impl<T: Element> BnReluConv<T> {
    fn new(c_in: usize, c_out: usize, geo: Conv3dGeometry, rng: &mut dyn RngCore) -> Self {
        Self { bn: BatchNorm::new(c_in), conv: Conv3d::new(c_in, c_out, geo, false, rng) }
    }

    fn forward(&self, x: &Var<T>, ctx: &mut Ctx<'_>) -> Var<T> {
        self.conv.forward(&self.bn.forward(x, ctx).relu())
    }
}

impl<T: Element> Module<T> for BnReluConv<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        self.bn.collect(&join(prefix, "bn"), out);
        self.conv.collect(&join(prefix, "conv"), out);
    }
}

struct DenseLayer<T: Element> {
    reduce: BnReluConv<T>,
    grow: BnReluConv<T>,
}

impl<T: Element> Module<T> for DenseLayer<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        self.reduce.collect(&join(prefix, "reduce"), out);
        self.grow.collect(&join(prefix, "grow"), out);
    }
}

struct Stage<T: Element> {
    layers: Vec<DenseLayer<T>>,
    transition: Option<BnReluConv<T>>,
}

impl<T: Element> Module<T> for Stage<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        self.layers.collect(&join(prefix, "layers"), out);
        self.transition.collect(&join(prefix, "transition"), out);
    }
}

pub struct DenseNet<T: Element> {
    stem: ConvBn<T>,
    stages: Vec<Stage<T>>,
    final_bn: BatchNorm<T>,
    out_channels: usize,
}

pub fn block_config(size: &str) -> Option<[usize; 4]> {
    Some(match size {
        "121" => [6, 12, 24, 16],
        "169" => [6, 12, 32, 32],
        "201" => [6, 12, 48, 32],
        "264" => [6, 12, 64, 48],
        _ => return None,
    })
}

impl<T: Element> DenseNet<T> {
    pub fn new(in_channels: usize, size: &str, rng: &mut dyn RngCore) -> Self {
        let config = block_config(size).expect("validated densenet size");
        let stem = ConvBn::new(in_channels, INIT_FEATURES, Conv3dGeometry::new(7, 2, 3), Act::Relu, rng);
        let mut c = INIT_FEATURES;
        let mut stages = Vec::new();
        for (i, &n) in config.iter().enumerate() {
            let layers = (0..n)
                .map(|j| {
                    let c_in = c + j * GROWTH;
                    DenseLayer {
                        reduce: BnReluConv::new(c_in, BN_SIZE * GROWTH, Conv3dGeometry::new(1, 1, 0), rng),
                        grow: BnReluConv::new(BN_SIZE * GROWTH, GROWTH, Conv3dGeometry::new(3, 1, 1), rng),
                    }
                })
                .collect();
            c += n * GROWTH;
            let transition = (i + 1 < config.len()).then(|| {
                let t = BnReluConv::new(c, c / 2, Conv3dGeometry::new(1, 1, 0), rng);
                c /= 2;
                t
            });
            stages.push(Stage { layers, transition });
        }
        Self { stem, stages, final_bn: BatchNorm::new(c), out_channels: c }
    }
}

impl<T: Element> Module<T> for DenseNet<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        self.stem.collect(&join(prefix, "stem"), out);
        self.stages.collect(&join(prefix, "stages"), out);
        self.final_bn.collect(&join(prefix, "final_bn"), out);
    }
}

impl<T: Element> Trunk<T> for DenseNet<T> {
    fn forward_map(&self, x: &Var<T>, ctx: &mut Ctx<'_>) -> Var<T> {
        let mut h = self.stem.forward(x, ctx).max_pool3d(STEM_POOL);
        for stage in &self.stages {
            for layer in &stage.layers {
                let new = layer.grow.forward(&layer.reduce.forward(&h, ctx), ctx);
                h = Var::concat(&[h, new], 1);
            }
            if let Some(t) = &stage.transition {
                h = t.forward(&h, ctx).avg_pool3d(TRANSITION_POOL);
            }
        }
        self.final_bn.forward(&h, ctx).relu()
    }

    fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn steps(&self) -> Vec<Resize> {
        let mut steps = vec![self.stem.resize(), STEM_POOL.into()];
        for stage in &self.stages {
            if stage.transition.is_some() {
                steps.push(TRANSITION_POOL.into());
            }
        }
        steps
    }
}
