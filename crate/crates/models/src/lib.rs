//! Volumetric image encoders and the multi-endpoint output module.
//!
//! A [`ComposedModel`] maps an image batch `(B, C, d0, d1, d2)` and optional
//! tabular features `(B, n)` to one output column per endpoint. With
//! architecture `none` the encoder is dropped and the model is a plain MLP
//! over the tabular features.
//!
//! Weights are Kaiming-normal (`N(0, 2 / fan_in)`) with zero biases; norm
//! layers start at identity.

mod blocks;
mod cnn;
mod convnext;
mod densenet;
mod efficientnet;
mod encoder;
mod head;
mod model;
mod resnet;
mod spec;

pub use blocks::{sincos_3d, Resize, Trunk};
pub use encoder::Encoder;
pub use head::OutputModule;
pub use model::{build_model, ComposedModel};
pub use spec::{Architecture, EncoderSpec, EndpointKind, EndpointSpec, ModelError, OutputSpec, VitSpec};
