//! Floating-point scalar abstraction: all training math is written once,
//! generic over the element type, and instantiated as `f32` for training and
//! `f64` for finite-difference verification.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used for hyperparameters and constants.
    fn from_config(v: f64) -> Self {
        Self::from_f64(v).expect("finite config value")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
