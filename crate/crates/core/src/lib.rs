//! A desk-scale NLP toolkit: a small transformer backbone with tape autodiff,
//! task heads, parameter-efficient tuning, prompt processors, a trainer with
//! experiment tracking, self-training and instruction-based extraction.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod autograd;
pub mod backbone;
pub mod error;
pub mod heads;
pub mod hugie;
pub mod params;
pub mod peft;
pub mod processors;
pub mod scalar;
pub mod semisup;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Backbone32 = backbone::Backbone<f32>;
pub type Backbone64 = backbone::Backbone<f64>;
pub type TaskModel32 = training::TaskModel<f32>;
pub type TaskModel64 = training::TaskModel<f64>;
