//! Domain-adaptive object detection with shared/private feature
//! disentanglement, built on a small reverse-mode autodiff engine.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

// Comparisons such as `!(x > 0.0)` are written that way to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod detector;
pub mod eval;
pub mod kernels;
pub mod losses;
pub mod params;
pub mod reproduce;
pub mod scalar;
pub mod synth_data;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = detector::DetectorModel<f32>;
pub type Model64 = detector::DetectorModel<f64>;
