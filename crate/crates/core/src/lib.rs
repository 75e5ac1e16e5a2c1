//! Structure-aware dynamic layer (SAL) and the SCAR model for single-choice
//! abstract visual reasoning, with procedural toy RPM / VAP / O3 tasks and a
//! training harness.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); the aliases below fix the common choices.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod avr;
pub mod cli;
pub mod error;
pub mod io;
pub mod model;
pub mod sal;
pub mod taskgen;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
