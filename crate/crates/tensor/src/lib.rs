//! Minimal reverse-mode autodiff over dense `NCHW` tensors, generic over the
//! element type. Provides exactly the operators the anomaly-detection networks
//! and losses need: convolutions, normalization, pooling, channel plumbing and
//! elementwise math.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use kernels::Axis;
pub use nn::{BatchNorm2d, Conv2d, Linear, Mode};
pub use optim::Adam;
pub use params::{ParamEntry, ParamId, ParamKind, ParamSet};
pub use scalar::{pairwise_sum, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
