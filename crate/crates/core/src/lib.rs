//! PointConv: convolution on point clouds with MLP-generated weights and
//! inverse-density scaling, built on a small reverse-mode tensor engine.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the element type for the common cases.

// Var arithmetic is fallible (shape checks), so std ops traits do not fit.
#![allow(clippy::should_implement_trait)]
// `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod nn;
pub mod params;
pub mod point_ops;
pub mod pointconv;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use network::{Network, NetworkConfig, Task};
pub use params::{ParamId, ParamStore};
pub use point_ops::{FpsStart, Neighborhood, PointCloud};
pub use pointconv::{DensityMode, PointConvConfig, PointConvLayer};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type PointCloud32 = PointCloud<f32>;
pub type PointCloud64 = PointCloud<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
