//! Dense row-major tensors and a reverse-mode tape.
//!
//! Everything trainable in the crate is built from the operations recorded by
//! [`Tape`]. Broadcasting is limited to scalar scaling, bias-add along the last
//! axis and per-channel bias on NCHW maps.

mod gradcheck;
mod kernels;
mod layers;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sets, relative_error};
pub use kernels::{matmul_into, softmax_in_place};
pub use layers::{Linear, LstmCell};
pub(crate) use layers::uniform as layers_uniform;
pub use params::{Bound, ParamId, Params};
pub use tape::{ConvSpec, Grads, Tape, Var};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type. `f32` for training, `f64` for gradient checks.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Numeric precision of a training or inference run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
