//! Scalar abstraction for the tensor core.
//!
//! Every numeric path in this crate is generic over [`Scalar`] so the same
//! model code runs in `f32` for training and in `f64` for finite-difference
//! gradient checks, where `f32` rounding would drown the comparison.
//! The Sinkhorn solver ignores the model scalar and always accumulates in
//! `f64` (see `ot`).

use num_traits::{Float, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    Float + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self {
        Self::from(v).expect("f64 -> scalar conversion")
    }

    fn from_usize(v: usize) -> Self {
        Self::from(v).expect("usize -> scalar conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar -> f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
