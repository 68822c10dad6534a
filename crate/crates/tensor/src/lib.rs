//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); matrix products go
//! through `matrixmultiply`. The op set is exactly what the detector needs:
//! convolutions, resizing, RoI-Align and the fused loss kernels.

mod graph;
pub mod kernels;
mod ops;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use kernels::RoiBox;
pub use scalar::Scalar;
pub use tensor::{ShapeError, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
