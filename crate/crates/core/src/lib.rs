//! Micro-expression action-unit detection from flow-infused, latent
//! motion-magnified inputs.
//!
//! The numeric core is generic over [`scalar::Scalar`]; the aliases below fix
//! the two instantiations used in practice: `f64` for analytic and gradient
//! checks, `f32` for training.

pub mod autonet;
pub mod config;
pub mod docsbench;
pub mod eval;
pub mod flow;
pub mod imaging;
pub mod infusenet;
pub mod magnify;
pub mod scalar;
pub mod synth;
pub mod train;

pub use scalar::Scalar;

pub type ImageF32 = imaging::Image<f32>;
pub type ImageF64 = imaging::Image<f64>;
pub type PlaneF32 = imaging::Plane<f32>;
pub type PlaneF64 = imaging::Plane<f64>;
pub type FlowFieldF32 = flow::FlowField<f32>;
pub type FlowFieldF64 = flow::FlowField<f64>;
pub type TensorF32 = autonet::Tensor<f32>;
pub type TensorF64 = autonet::Tensor<f64>;
pub type GraphF32 = autonet::Graph<f32>;
pub type GraphF64 = autonet::Graph<f64>;
pub type ParamsF32 = autonet::ParamStore<f32>;
pub type ParamsF64 = autonet::ParamStore<f64>;
