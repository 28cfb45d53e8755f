//! Deterministic simulation engine for federated skeleton-based action
//! recognition with adaptive topology and multi-grain distillation.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training and
//! storage, `f64` for gradient oracles); the aliases below fix the element
//! type for everyday use.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod federation;
pub mod kernels;
pub mod metrics;
pub mod mkd;
pub mod model;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod topology;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ParamSet32 = params::ParamSet<f32>;
pub type ParamSet64 = params::ParamSet<f64>;
pub type StGcn32 = model::StGcn<f32>;
pub type StGcn64 = model::StGcn<f64>;
