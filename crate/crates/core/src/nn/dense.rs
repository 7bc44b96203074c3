//! Affine layers on row-major batches: Y = X·Wᵀ + b.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{real, Real};

#[derive(Debug, Clone)]
pub struct Dense<T> {
    /// (out, in)
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Dense {
            w: Array2::zeros((d_out, d_in)),
            b: Array1::zeros(d_out),
        }
    }

    /// Kaiming-uniform weights (bound √(6/fan_in)), zero bias.
    pub fn kaiming(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / d_in as f64).sqrt();
        let w = Array2::from_shape_fn((d_out, d_in), |_| {
            real::<T>(rng.gen_range(-bound..bound))
        });
        Dense {
            w,
            b: Array1::zeros(d_out),
        }
    }

    /// X (B, in) → Y (B, out).
    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Returns dX and accumulates dW/db into `grad`.
    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Dense<T>) -> Array2<T> {
        grad.w += &dy.t().dot(x);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }
}
