//! Minimal CNN engine: valid 1×1 and 3×3 convolutions, ReLU, batch
//! normalization, dense channel concatenation, MSE loss, reverse-mode
//! gradients and Adam. Activations are `(batch, channels, height, width)`
//! arrays in standard layout.

mod adam;
mod batchnorm;
mod conv;
mod loss;
mod network;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array4, ArrayD, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

pub use adam::Adam;
pub use batchnorm::{BatchNorm, BnCache, BN_EPSILON, BN_MOMENTUM};
pub use conv::Conv2d;
pub use loss::{masked_mse_loss, mse_loss};
pub use network::{LayerOrder, Mode, Network};

/// Floating-point element type of the engine (`f32` or `f64`).
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + LinalgScalar
        + ScalarOperand
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Sum
        + 'static
{
}

pub type Tensor4<F> = Array4<F>;

/// Learnable array with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Real> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}
