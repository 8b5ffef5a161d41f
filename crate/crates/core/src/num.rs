//! Scalar abstraction: everything numeric in this crate is generic over
//! [`Real`], instantiated as `f32` or `f64`. Concrete aliases live at the
//! crate root; `f64` is the default used by the CLI and all tolerances.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar: f32 or f64.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Shorthand for lossless-enough literal conversion from f64.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal converts to scalar")
    }
}

impl Real for f32 {}
impl Real for f64 {}
