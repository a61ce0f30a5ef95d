use rand::RngCore;
use voxtrain_tensor::nn::{join, Ctx, Module, Slot};
use voxtrain_tensor::{Conv3dGeometry, Element, PoolGeometry, Var};

use crate::blocks::{Act, ConvBn, Resize, Trunk};

/// Plain stack of `conv3 -> BN -> ReLU -> max-pool 2` layers.
pub struct SimpleCnn<T: Element> {
    layers: Vec<ConvBn<T>>,
}

const POOL: PoolGeometry = PoolGeometry { kernel: 2, stride: 2, padding: 0 };

impl<T: Element> SimpleCnn<T> {
    pub fn new(in_channels: usize, widths: &[usize], rng: &mut dyn RngCore) -> Self {
        let mut c = in_channels;
        let layers = widths
            .iter()
            .map(|&w| {
                let layer = ConvBn::new(c, w, Conv3dGeometry::new(3, 1, 1), Act::Relu, rng);
                c = w;
                layer
            })
            .collect();
        Self { layers }
    }
}

impl<T: Element> Module<T> for SimpleCnn<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        self.layers.collect(&join(prefix, "layers"), out);
    }
}

impl<T: Element> Trunk<T> for SimpleCnn<T> {
    fn forward_map(&self, x: &Var<T>, ctx: &mut Ctx<'_>) -> Var<T> {
        self.layers.iter().fold(x.clone(), |h, l| l.forward(&h, ctx).max_pool3d(POOL))
    }

    fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.conv.out_channels())
    }

    fn steps(&self) -> Vec<Resize> {
        self.layers.iter().flat_map(|l| [l.resize(), POOL.into()]).collect()
    }
}
