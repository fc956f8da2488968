//! Tensors, reverse-mode autodiff and normalization layers for small
//! convolutional networks, including instance-level meta normalization:
//! a light auto-encoder that turns per-instance group statistics into
//! per-instance rescaling weights.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod ilm;
pub mod model;
pub mod norm;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use ilm::{Activation, EmbedDimRule, IlmOptions, IlmParams, KeySource};
pub use model::{Model, NormKind, NormSpec, WeightInit};
pub use norm::{Mode, PartitionScheme};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Dataset32 = train::Dataset<f32>;
pub type Dataset64 = train::Dataset<f64>;
