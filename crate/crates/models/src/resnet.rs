//! 3D residual networks with basic (10/18/34) or bottleneck (50+) blocks.

use rand::RngCore;
use voxtrain_tensor::nn::{join, Ctx, Module, Slot};
use voxtrain_tensor::{Conv3dGeometry, Element, PoolGeometry, Var};

use crate::blocks::{Act, ConvBn, Resize, Trunk};

const STEM_POOL: PoolGeometry = PoolGeometry { kernel: 3, stride: 2, padding: 1 };

struct Block<T: Element> {
    convs: Vec<ConvBn<T>>,
    shortcut: Option<ConvBn<T>>,
}

impl<T: Element> Block<T> {
    fn basic(c_in: usize, planes: usize, stride: usize, rng: &mut dyn RngCore) -> Self {
        let convs = vec![
            ConvBn::new(c_in, planes, Conv3dGeometry::new(3, stride, 1), Act::Relu, rng),
            ConvBn::new(planes, planes, Conv3dGeometry::new(3, 1, 1), Act::Identity, rng),
        ];
        Self { convs, shortcut: shortcut(c_in, planes, stride, rng) }
    }

    fn bottleneck(c_in: usize, planes: usize, stride: usize, rng: &mut dyn RngCore) -> Self {
        let convs = vec![
            ConvBn::new(c_in, planes, Conv3dGeometry::new(1, 1, 0), Act::Relu, rng),
            ConvBn::new(planes, planes, Conv3dGeometry::new(3, stride, 1), Act::Relu, rng),
            ConvBn::new(planes, planes * 4, Conv3dGeometry::new(1, 1, 0), Act::Identity, rng),
        ];
        Self { convs, shortcut: shortcut(c_in, planes * 4, stride, rng) }
    }

    fn forward(&self, x: &Var<T>, ctx: &mut Ctx<'_>) -> Var<T> {
        let h = self.convs.iter().fold(x.clone(), |h, c| c.forward(&h, ctx));
        let skip = match &self.shortcut {
            Some(s) => s.forward(x, ctx),
            None => x.clone(),
        };
        h.add(&skip).relu()
    }
}

fn shortcut<T: Element>(c_in: usize, c_out: usize, stride: usize, rng: &mut dyn RngCore) -> Option<ConvBn<T>> {
    (stride != 1 || c_in != c_out).then(|| ConvBn::new(c_in, c_out, Conv3dGeometry::new(1, stride, 0), Act::Identity, rng))
}

impl<T: Element> Module<T> for Block<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        self.convs.collect(&join(prefix, "convs"), out);
        self.shortcut.collect(&join(prefix, "shortcut"), out);
    }
}

pub struct ResNet<T: Element> {
    stem: ConvBn<T>,
    stages: Vec<Vec<Block<T>>>,
    out_channels: usize,
}

/// Blocks per stage and whether bottleneck blocks are used.
pub fn layout(size: &str) -> Option<([usize; 4], bool)> {
    Some(match size {
        "10" => ([1, 1, 1, 1], false),
        "18" => ([2, 2, 2, 2], false),
        "34" => ([3, 4, 6, 3], false),
        "50" => ([3, 4, 6, 3], true),
        "101" => ([3, 4, 23, 3], true),
        "152" => ([3, 8, 36, 3], true),
        "200" => ([3, 24, 36, 3], true),
        _ => return None,
    })
}

impl<T: Element> ResNet<T> {
    pub fn new(in_channels: usize, size: &str, rng: &mut dyn RngCore) -> Self {
        let (blocks, bottleneck) = layout(size).expect("validated resnet size");
        let stem = ConvBn::new(in_channels, 64, Conv3dGeometry::new(7, 2, 3), Act::Relu, rng);
        let mut c = 64;
        let mut stages = Vec::new();
        for (i, (&n, planes)) in blocks.iter().zip([64, 128, 256, 512]).enumerate() {
            let mut stage = Vec::new();
            for j in 0..n {
                let stride = if i > 0 && j == 0 { 2 } else { 1 };
                let block = if bottleneck {
                    Block::bottleneck(c, planes, stride, rng)
                } else {
                    Block::basic(c, planes, stride, rng)
                };
                c = if bottleneck { planes * 4 } else { planes };
                stage.push(block);
            }
            stages.push(stage);
        }
        Self { stem, stages, out_channels: c }
    }
}

impl<T: Element> Module<T> for ResNet<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        self.stem.collect(&join(prefix, "stem"), out);
        self.stages.collect(&join(prefix, "stages"), out);
    }
}

impl<T: Element> Trunk<T> for ResNet<T> {
    fn forward_map(&self, x: &Var<T>, ctx: &mut Ctx<'_>) -> Var<T> {
        let mut h = self.stem.forward(x, ctx).max_pool3d(STEM_POOL);
        for block in self.stages.iter().flatten() {
            h = block.forward(&h, ctx);
        }
        h
    }

    fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn steps(&self) -> Vec<Resize> {
        let mut steps = vec![self.stem.resize(), STEM_POOL.into()];
        for block in self.stages.iter().flatten() {
            steps.extend(block.convs.iter().map(ConvBn::resize));
        }
        steps
    }
}
