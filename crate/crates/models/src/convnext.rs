//! 3D ConvNeXt: patchify stem, depthwise 7^3 blocks with inverted MLPs.

use rand::RngCore;
use voxtrain_tensor::nn::{join, Conv3d, Ctx, LayerNorm, Linear, Module, Slot};
use voxtrain_tensor::{Conv3dGeometry, Element, Param, Tensor, Var};

use crate::blocks::{Resize, Trunk};

const LAYER_SCALE_INIT: f64 = 1e-6;

pub fn layout(size: &str) -> Option<([usize; 4], [usize; 4])> {
    Some(match size.to_ascii_lowercase().as_str() {
        "tiny" => ([3, 3, 9, 3], [96, 192, 384, 768]),
        "small" => ([3, 3, 27, 3], [96, 192, 384, 768]),
        "base" => ([3, 3, 27, 3], [128, 256, 512, 1024]),
        "large" => ([3, 3, 27, 3], [192, 384, 768, 1536]),
        "xlarge" => ([3, 3, 27, 3], [256, 512, 1024, 2048]),
        _ => return None,
    })
}

struct Block<T: Element> {
    dwconv: Conv3d<T>,
    norm: LayerNorm<T>,
    fc1: Linear<T>,
    fc2: Linear<T>,
    gamma: Param<T>,
}

impl<T: Element> Block<T> {
    fn new(dim: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            dwconv: Conv3d::new(dim, dim, Conv3dGeometry::new(7, 1, 3).with_groups(dim), true, rng),
            norm: LayerNorm::new(dim, 1e-6),
            fc1: Linear::new(dim, 4 * dim, true, rng),
            fc2: Linear::new(4 * dim, dim, true, rng),
            gamma: Param::new(Tensor::full(&[dim], T::of(LAYER_SCALE_INIT))),
        }
    }

    fn forward(&self, x: &Var<T>) -> Var<T> {
        let h = self.dwconv.forward(x).permute(&[0, 2, 3, 4, 1]);
        let h = self.fc2.forward(&self.fc1.forward(&self.norm.forward(&h)).gelu());
        let h = h.mul(&self.gamma.var()).permute(&[0, 4, 1, 2, 3]);
        x.add(&h)
    }
}

impl<T: Element> Module<T> for Block<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        self.dwconv.collect(&join(prefix, "dwconv"), out);
        self.norm.collect(&join(prefix, "norm"), out);
        self.fc1.collect(&join(prefix, "fc1"), out);
        self.fc2.collect(&join(prefix, "fc2"), out);
        out.push((join(prefix, "gamma"), Slot::Param(self.gamma.clone())));
    }
}

/// Stem (`conv k4 s4 -> LN`) or between-stage downsampler (`LN -> conv k2 s2`).
struct Downsample<T: Element> {
    conv: Conv3d<T>,
    norm: LayerNorm<T>,
    norm_first: bool,
}

impl<T: Element> Downsample<T> {
    fn forward(&self, x: &Var<T>) -> Var<T> {
        if self.norm_first {
            self.conv.forward(&self.norm.forward_channels_first(x))
        } else {
            self.norm.forward_channels_first(&self.conv.forward(x))
        }
    }
}

impl<T: Element> Module<T> for Downsample<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        self.conv.collect(&join(prefix, "conv"), out);
        self.norm.collect(&join(prefix, "norm"), out);
    }
}

pub struct ConvNeXt<T: Element> {
    downsamples: Vec<Downsample<T>>,
    stages: Vec<Vec<Block<T>>>,
    out_channels: usize,
}

impl<T: Element> ConvNeXt<T> {
    pub fn new(in_channels: usize, size: &str, rng: &mut dyn RngCore) -> Self {
        let (depths, dims) = layout(size).expect("validated convnext size");
        let mut downsamples = Vec::new();
        let mut stages = Vec::new();
        for i in 0..4 {
            downsamples.push(if i == 0 {
                Downsample {
                    conv: Conv3d::new(in_channels, dims[0], Conv3dGeometry::new(4, 4, 0), true, rng),
                    norm: LayerNorm::new(dims[0], 1e-6),
                    norm_first: false,
                }
            } else {
                Downsample {
                    norm: LayerNorm::new(dims[i - 1], 1e-6),
                    conv: Conv3d::new(dims[i - 1], dims[i], Conv3dGeometry::new(2, 2, 0), true, rng),
                    norm_first: true,
                }
            });
            stages.push((0..depths[i]).map(|_| Block::new(dims[i], rng)).collect());
        }
        Self { downsamples, stages, out_channels: dims[3] }
    }
}

impl<T: Element> Module<T> for ConvNeXt<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        self.downsamples.collect(&join(prefix, "downsamples"), out);
        self.stages.collect(&join(prefix, "stages"), out);
    }
}

impl<T: Element> Trunk<T> for ConvNeXt<T> {
    fn forward_map(&self, x: &Var<T>, _ctx: &mut Ctx<'_>) -> Var<T> {
        let mut h = x.clone();
        for (down, stage) in self.downsamples.iter().zip(&self.stages) {
            h = down.forward(&h);
            for block in stage {
                h = block.forward(&h);
            }
        }
        h
    }

    fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn steps(&self) -> Vec<Resize> {
        self.downsamples.iter().map(|d| d.conv.geometry.into()).collect()
    }
}
