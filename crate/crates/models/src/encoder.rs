use rand::RngCore;
use voxtrain_tensor::nn::{join, Conv3d, Ctx, LayerNorm, Module, Slot};
use voxtrain_tensor::{Conv3dGeometry, Element, Var};

use crate::blocks::{chain, Resize, TokenEncoder, Trunk};
use crate::cnn::SimpleCnn;
use crate::convnext::ConvNeXt;
use crate::densenet::DenseNet;
use crate::efficientnet::EfficientNetV2;
use crate::resnet::ResNet;
use crate::spec::{Architecture, EncoderSpec, ModelError, VitSpec};

/// Largest spatial extent probed when searching for the minimum input size.
const MAX_PROBE: usize = 4096;

enum Body<T: Element> {
    /// Convolutional trunk, global average pooling and an optional feature norm.
    Conv { trunk: Box<dyn Trunk<T>>, norm: Option<LayerNorm<T>> },
    /// Patch embedding (or trunk plus 1x1 projection) followed by a transformer.
    Tokens { trunk: Option<Box<dyn Trunk<T>>>, embed: Conv3d<T>, transformer: TokenEncoder<T> },
}

/// Image encoder mapping `(B, C, d0, d1, d2)` volumes to `(B, F)` features.
pub struct Encoder<T: Element> {
    architecture: Architecture,
    in_channels: usize,
    body: Body<T>,
}

fn build_trunk<T: Element>(
    arch: Architecture,
    size: &str,
    spec: &EncoderSpec,
    in_channels: usize,
    rng: &mut dyn RngCore,
) -> Box<dyn Trunk<T>> {
    match arch {
        Architecture::Cnn => Box::new(SimpleCnn::new(in_channels, &spec.cnn_widths, rng)),
        Architecture::Resnet => Box::new(ResNet::new(in_channels, size, rng)),
        Architecture::Densenet => Box::new(DenseNet::new(in_channels, size, rng)),
        Architecture::EfficientNetV2 => Box::new(EfficientNetV2::new(in_channels, size, rng)),
        Architecture::ConvNext => Box::new(ConvNeXt::new(in_channels, size, rng)),
        other => unreachable!("{other} has no convolutional trunk"),
    }
}

fn patch_geometry(v: &VitSpec) -> Conv3dGeometry {
    Conv3dGeometry { kernel: v.patch_size, stride: v.patch_size, padding: [0; 3], groups: 1 }
}

impl<T: Element> Encoder<T> {
    pub fn new(spec: &EncoderSpec, in_channels: usize, rng: &mut dyn RngCore) -> Result<Self, ModelError> {
        spec.validate()?;
        if in_channels == 0 {
            return Err(ModelError::InvalidSpec("an image encoder needs at least one modality".into()));
        }
        let arch = spec.architecture;
        let body = match arch {
            Architecture::None => {
                return Err(ModelError::InvalidSpec("architecture 'none' has no image encoder".into()));
            }
            Architecture::Vit => {
                let v = &spec.vit;
                Body::Tokens {
                    trunk: None,
                    embed: Conv3d::new(in_channels, v.hidden, patch_geometry(v), true, rng),
                    transformer: TokenEncoder::new(v.hidden, v.depth, v.heads, v.mlp_dim, rng),
                }
            }
            Architecture::TransRp => {
                let trunk = build_trunk(spec.transrp_backbone, &spec.transrp_size, spec, in_channels, rng);
                let v = &spec.transrp_vit;
                Body::Tokens {
                    embed: Conv3d::new(trunk.out_channels(), v.hidden, patch_geometry(v), true, rng),
                    trunk: Some(trunk),
                    transformer: TokenEncoder::new(v.hidden, v.depth, v.heads, v.mlp_dim, rng),
                }
            }
            conv => {
                let trunk = build_trunk(conv, &spec.size, spec, in_channels, rng);
                let norm = (conv == Architecture::ConvNext).then(|| LayerNorm::new(trunk.out_channels(), 1e-6));
                Body::Conv { trunk, norm }
            }
        };
        Ok(Self { architecture: arch, in_channels, body })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_features(&self) -> usize {
        match &self.body {
            Body::Conv { trunk, .. } => trunk.out_channels(),
            Body::Tokens { transformer, .. } => transformer.dim(),
        }
    }

    fn steps(&self) -> Vec<Resize> {
        match &self.body {
            Body::Conv { trunk, .. } => trunk.steps(),
            Body::Tokens { trunk, embed, .. } => {
                let mut steps = trunk.as_ref().map(|t| t.steps()).unwrap_or_default();
                steps.push(embed.geometry.into());
                steps
            }
        }
    }

    /// The convolutional trunk, if this encoder has one.
    pub fn trunk(&self) -> Option<&dyn Trunk<T>> {
        match &self.body {
            Body::Conv { trunk, .. } => Some(trunk.as_ref()),
            Body::Tokens { trunk, .. } => trunk.as_deref(),
        }
    }

    /// Spatial grid of the final feature map (or token grid) for an input size.
    pub fn output_grid(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        chain(&self.steps(), input).filter(|g| g.iter().all(|&s| s > 0))
    }

    /// Number of transformer tokens before class-token aggregation.
    pub fn token_count(&self, input: [usize; 3]) -> Option<usize> {
        match self.body {
            Body::Tokens { .. } => self.output_grid(input).map(|g| g.iter().product()),
            Body::Conv { .. } => None,
        }
    }

    /// Smallest accepted extent along each spatial axis.
    pub fn minimum_input(&self) -> [usize; 3] {
        let steps = self.steps();
        let mut min = [0; 3];
        for (a, m) in min.iter_mut().enumerate() {
            *m = (1..=MAX_PROBE)
                .find(|&n| {
                    let mut probe = [MAX_PROBE; 3];
                    probe[a] = n;
                    chain(&steps, probe).is_some_and(|g| g[a] > 0)
                })
                .unwrap_or(MAX_PROBE);
        }
        min
    }

    pub fn forward(&self, x: &Var<T>, ctx: &mut Ctx<'_>) -> Result<Var<T>, ModelError> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.in_channels {
            return Err(ModelError::ShapeMismatch(format!(
                "encoder expects (B, {}, d0, d1, d2), got {s:?}",
                self.in_channels
            )));
        }
        let input = [s[2], s[3], s[4]];
        if self.output_grid(input).is_none() {
            return Err(ModelError::InputTooSmall { minimum: self.minimum_input(), got: input });
        }
        Ok(match &self.body {
            Body::Conv { trunk, norm } => {
                let pooled = trunk.forward_map(x, ctx).global_avg_pool();
                match norm {
                    Some(n) => n.forward(&pooled),
                    None => pooled,
                }
            }
            Body::Tokens { trunk, embed, transformer } => {
                let map = match trunk {
                    Some(t) => t.forward_map(x, ctx),
                    None => x.clone(),
                };
                transformer.forward(&embed.forward(&map))
            }
        })
    }
}

impl<T: Element> Module<T> for Encoder<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Slot<T>)>) {
        match &self.body {
            Body::Conv { trunk, norm } => {
                trunk.collect(&join(prefix, "trunk"), out);
                norm.collect(&join(prefix, "norm"), out);
            }
            Body::Tokens { trunk, embed, transformer } => {
                if let Some(t) = trunk {
                    t.collect(&join(prefix, "trunk"), out);
                }
                embed.collect(&join(prefix, "embed"), out);
                transformer.collect(&join(prefix, "transformer"), out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use voxtrain_tensor::{no_grad, Tensor};

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn vit_token_count_follows_patch_grid() {
        let mut spec = EncoderSpec::new(Architecture::Vit, "");
        spec.vit = VitSpec { patch_size: [8; 3], hidden: 24, depth: 1, heads: 2, mlp_dim: 32 };
        let enc = Encoder::<f32>::new(&spec, 1, &mut rng()).unwrap();
        assert_eq!(enc.token_count([64, 64, 32]), Some(256));
        assert_eq!(enc.minimum_input(), [8, 8, 8]);
        let _g = no_grad();
        let err = enc.forward(&Var::constant(Tensor::zeros(&[1, 1, 4, 8, 8])), &mut Ctx::eval()).unwrap_err();
        assert_eq!(err, ModelError::InputTooSmall { minimum: [8, 8, 8], got: [4, 8, 8] });
    }

    #[test]
    fn convnext_needs_32_voxels_per_axis() {
        let enc = Encoder::<f32>::new(&EncoderSpec::new(Architecture::ConvNext, "tiny"), 1, &mut rng()).unwrap();
        assert_eq!(enc.minimum_input(), [32, 32, 32]);
    }

    #[test]
    fn cnn_forward_shape_and_channel_check() {
        let mut spec = EncoderSpec::new(Architecture::Cnn, "");
        spec.cnn_widths = vec![4, 8];
        let enc = Encoder::<f64>::new(&spec, 2, &mut rng()).unwrap();
        assert_eq!(enc.minimum_input(), [4, 4, 4]);
        let y = enc.forward(&Var::constant(Tensor::ones(&[3, 2, 8, 8, 4])), &mut Ctx::eval()).unwrap();
        assert_eq!(y.shape(), &[3, 8]);
        let bad = enc.forward(&Var::constant(Tensor::ones(&[3, 1, 8, 8, 4])), &mut Ctx::eval());
        assert!(matches!(bad, Err(ModelError::ShapeMismatch(_))));
    }
}
