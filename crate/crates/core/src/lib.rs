//! Retinal vessel segmentation from first principles.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod eda;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod scalar;
pub mod selfcheck;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Mode, Shape, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type UNet32 = model::UNet<f32>;
pub type UNet64 = model::UNet<f64>;
pub type ParameterSet32 = model::ParameterSet<f32>;
