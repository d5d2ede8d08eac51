//! Input gradient adversarial matching (IGAM) at desk scale.
//!
//! A student classifier is trained on natural images while its input
//! gradients are pushed towards those of a frozen, adversarially robust
//! teacher, through a discriminator (GAN-style) term and an l2 term. The
//! crate carries everything needed to run that end to end on small models:
//! a higher-order autodiff core, CNN layers, l-inf attacks, differentiable
//! input adapters between teacher and student resolutions, the two-phase
//! trainer and the evaluation harness.
//!
//! All numeric code is generic over [`Real`]; the `*64` aliases below pin the
//! reference precision.

pub mod attacks;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
mod scalar;
pub mod trainer;
pub mod transforms;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Model64 = nn::Model<f64>;
pub type Dataset64 = data::Dataset<f64>;
pub type InputTransform64 = transforms::InputTransform<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Model32 = nn::Model<f32>;
