//! Minimal dense-tensor and reverse-mode autodiff engine.
//!
//! Built for small 3D convolutional networks on the CPU: `[N, C, D, H, W]`
//! tensors, im2col convolutions backed by `matrixmultiply`, and a tape
//! ([`Graph`]) whose ops are generic over `f32` / `f64`.

mod error;
mod graph;
mod kernels;
mod scalar;
mod tensor;

pub use error::TensorError;
pub use graph::{Gradients, Graph, Var};
pub use kernels::ConvGeom;
pub use scalar::Scalar;
pub use tensor::Tensor;
