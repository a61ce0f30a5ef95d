//! Dense tensors with reverse-mode automatic differentiation, and the 3D
//! convolution, pooling, normalization and attention building blocks needed
//! for volumetric networks.
//!
//! Everything is generic over the [`Element`] type so the same network can run
//! in `f32` for training and `f64` for gradient checking.

pub mod broadcast;
pub mod element;
pub mod nn;
pub mod ops;
pub mod tensor;
pub mod var;
pub mod weights;

pub use element::{gemm, Element, MatRef};
pub use nn::{Buffer, Ctx, Module, Slot};
pub use ops::{BatchNormStats, Conv3dGeometry, PoolGeometry};
pub use tensor::Tensor;
pub use var::{is_grad_enabled, no_grad, NoGradGuard, Param, Var};
