//! Two-stage dermoscopy pipeline: a U-Net-style lesion segmenter and a
//! two-branch inception-style three-class classifier, trained with a small
//! reverse-mode autodiff engine.
//!
//! Every numeric component is generic over [`Scalar`] (`f32` for models,
//! `f64` for gradient checks). The aliases below fix the scalar for the
//! common 32-bit case.

pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod gradsuite;
pub mod imaging;
pub mod metrics;
pub mod param;
pub mod pipeline;
pub mod recnet;
pub mod rng;
pub mod scalar;
pub mod segnet;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use param::{Group, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type SegModel32 = segnet::SegModel<f32>;
pub type SegModel64 = segnet::SegModel<f64>;
pub type RecModel32 = recnet::RecModel<f32>;
pub type RecModel64 = recnet::RecModel<f64>;
pub type ParamStore32 = param::ParamStore<f32>;

/// Side length every network input is resized to.
pub const INPUT_SIZE: usize = 150;
