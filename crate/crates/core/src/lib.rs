//! Cascaded long/short-term memory for long-context sentence classification.
//!
//! A group of fixed-weight leaky-integrator reservoirs integrates the hidden
//! state of every sentence seen so far in a corpus. Its readouts become memory
//! tokens that a small transformer encoder attends to, through a
//! cross-attention block, while classifying the current sentence.
//!
//! Numeric code is generic over [`Scalar`] (`f32` and `f64`); verification
//! paths use `f64`.

// NaN-rejecting guards are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod fusion;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod params;
pub mod reservoir;
pub mod scalar;
pub mod stm;
pub mod tape;
pub mod training;

#[cfg(any(test, feature = "oracle"))]
#[doc(hidden)]
pub mod oracle;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Matrix64 = numerics::Matrix<f64>;
pub type Matrix32 = numerics::Matrix<f32>;
pub type Model64 = model::ResFormer<f64>;
pub type Model32 = model::ResFormer<f32>;
pub type Reservoir64 = reservoir::Reservoir<f64>;
pub type GroupReservoir64 = reservoir::GroupReservoir<f64>;
pub type GroupMemory64 = reservoir::GroupMemory<f64>;
pub type ParamStore64 = params::ParamStore<f64>;
