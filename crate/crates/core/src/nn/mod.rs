//! Hand-rolled neural-network layers with explicit forward/backward passes.
//!
//! Everything is generic over [`Real`] so training runs in f32 while the
//! finite-difference gradient checks run the identical code in f64.

pub mod conv;
pub mod dense;
pub mod embedder;
pub mod norm;
pub mod ssm;

use num_traits::{Float, FromPrimitive, NumAssign};

pub trait Real:
    Float
    + NumAssign
    + FromPrimitive
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for pulling f64 literals into the working precision.
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal fits any Real")
}

pub fn relu<T: Real>(x: T) -> T {
    x.max(T::zero())
}

pub fn relu_grad<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

/// GELU, tanh approximation: 0.5x(1 + tanh(√(2/π)(x + 0.044715x³))).
pub fn gelu<T: Real>(x: T) -> T {
    let c = real::<T>(0.797_884_560_802_865_4); // √(2/π)
    let a = real::<T>(0.044715);
    let u = c * (x + a * x * x * x);
    real::<T>(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = real::<T>(0.797_884_560_802_865_4);
    let a = real::<T>(0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    let du = c * (T::one() + real::<T>(3.0) * a * x * x);
    real::<T>(0.5) * (T::one() + t) + real::<T>(0.5) * x * sech2 * du
}
