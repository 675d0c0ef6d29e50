//! Desk-scale unified multimodal relation extraction: multilevel
//! optimal-transport feature fusion, hierarchical cross-modal attention and
//! mixture-of-experts routing over a tape-based autodiff core, trained and
//! verified on synthetic planted-rule tasks.
//!
//! The numeric core is generic over the scalar type ([`scalar::Scalar`]):
//! training runs in `f32`, gradient checking instantiates the same code in
//! `f64`, and the Sinkhorn solver always accumulates in `f64` internally.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod moe;
pub mod optim;
pub mod ot;
pub mod params;
pub mod relation;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var};

/// Training-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Checking-precision tensor.
pub type Tensor64 = tensor::Tensor<f64>;
