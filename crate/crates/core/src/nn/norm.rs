//! Normalization layers with learnable per-channel scale/shift.
//!
//! The conv stack uses a per-sample channel norm (statistics over each
//! sample's (f, t) plane, one group per channel) so a clip's features never
//! depend on what else shares its batch. SSM blocks use a per-time-step
//! layer norm over channels.

use ndarray::{Array1, Array2, Array3, Array4, Axis};

use super::{real, Real};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct NormParams<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

impl<T: Real> NormParams<T> {
    pub fn identity(channels: usize) -> Self {
        NormParams {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        NormParams {
            gamma: Array1::zeros(channels),
            beta: Array1::zeros(channels),
        }
    }
}

/// Shared core: normalize a flat group, returning x̂ and 1/σ.
fn normalize_group<T: Real>(values: &mut [T]) -> T {
    let m = real::<T>(values.len() as f64);
    let mut mean = T::zero();
    for v in values.iter() {
        mean += *v;
    }
    mean /= m;
    let mut var = T::zero();
    for v in values.iter() {
        let d = *v - mean;
        var += d * d;
    }
    var /= m;
    let inv_std = (var + real::<T>(NORM_EPS)).sqrt().recip();
    for v in values.iter_mut() {
        *v = (*v - mean) * inv_std;
    }
    inv_std
}

/// Shared core of the backward pass: given dx̂ for one group (in `dxhat`,
/// overwritten with dx), apply dx = r·(dx̂ − mean(dx̂) − x̂·mean(dx̂·x̂)).
fn normalize_group_backward<T: Real>(dxhat: &mut [T], xhat: &[T], inv_std: T) {
    let m = real::<T>(dxhat.len() as f64);
    let mut mean_d = T::zero();
    let mut mean_dx = T::zero();
    for (d, x) in dxhat.iter().zip(xhat) {
        mean_d += *d;
        mean_dx += *d * *x;
    }
    mean_d /= m;
    mean_dx /= m;
    for (d, x) in dxhat.iter_mut().zip(xhat) {
        *d = inv_std * (*d - mean_d - *x * mean_dx);
    }
}

pub struct ChannelNormCache<T> {
    xhat: Array4<T>,
    /// (batch, channels)
    inv_std: Array2<T>,
}

/// Per-sample, per-channel normalization of (B, C, F, T) over the (F, T)
/// plane, then y = γ_c·x̂ + β_c.
pub fn channel_norm_forward<T: Real>(
    x: &Array4<T>,
    p: &NormParams<T>,
) -> (Array4<T>, ChannelNormCache<T>) {
    let (b, c, _, _) = x.dim();
    let mut xhat = x.clone();
    let mut inv_std = Array2::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut plane = xhat.index_axis_mut(Axis(0), bi);
            let mut plane = plane.index_axis_mut(Axis(0), ci);
            let flat = plane.as_slice_mut().expect("contiguous plane");
            inv_std[(bi, ci)] = normalize_group(flat);
        }
    }
    let mut y = xhat.clone();
    for ci in 0..c {
        let gamma = p.gamma[ci];
        let beta = p.beta[ci];
        y.index_axis_mut(Axis(1), ci)
            .mapv_inplace(|v| gamma * v + beta);
    }
    (y, ChannelNormCache { xhat, inv_std })
}

pub fn channel_norm_backward<T: Real>(
    dy: &Array4<T>,
    cache: &ChannelNormCache<T>,
    p: &NormParams<T>,
    grad: &mut NormParams<T>,
) -> Array4<T> {
    let (b, c, _, _) = dy.dim();
    let mut dx = dy.clone();
    for ci in 0..c {
        let mut dgamma = T::zero();
        let mut dbeta = T::zero();
        let gamma = p.gamma[ci];
        for bi in 0..b {
            let xhat_plane = cache.xhat.index_axis(Axis(0), bi);
            let xhat_plane = xhat_plane.index_axis(Axis(0), ci);
            let xhat_flat = xhat_plane.as_slice().expect("contiguous plane");
            let mut dx_plane = dx.index_axis_mut(Axis(0), bi);
            let mut dx_plane = dx_plane.index_axis_mut(Axis(0), ci);
            let dx_flat = dx_plane.as_slice_mut().expect("contiguous plane");
            for (d, x) in dx_flat.iter_mut().zip(xhat_flat) {
                dgamma += *d * *x;
                dbeta += *d;
                *d *= gamma; // dy → dx̂
            }
            normalize_group_backward(dx_flat, xhat_flat, cache.inv_std[(bi, ci)]);
        }
        grad.gamma[ci] += dgamma;
        grad.beta[ci] += dbeta;
    }
    dx
}

pub struct LayerNormCache<T> {
    /// (B, C, T) normalized values.
    xhat: Array3<T>,
    /// (B, T)
    inv_std: Array2<T>,
}

/// Per-(sample, time-step) normalization of (B, C, T) over channels,
/// then y = γ_c·x̂ + β_c.
pub fn layer_norm_forward<T: Real>(
    x: &Array3<T>,
    p: &NormParams<T>,
) -> (Array3<T>, LayerNormCache<T>) {
    let (b, c, t) = x.dim();
    let mut xhat = x.clone();
    let mut inv_std = Array2::zeros((b, t));
    let mut column = vec![T::zero(); c];
    for bi in 0..b {
        for ti in 0..t {
            for ci in 0..c {
                column[ci] = xhat[(bi, ci, ti)];
            }
            inv_std[(bi, ti)] = normalize_group(&mut column);
            for ci in 0..c {
                xhat[(bi, ci, ti)] = column[ci];
            }
        }
    }
    let mut y = xhat.clone();
    for ci in 0..c {
        let gamma = p.gamma[ci];
        let beta = p.beta[ci];
        y.index_axis_mut(Axis(1), ci)
            .mapv_inplace(|v| gamma * v + beta);
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward<T: Real>(
    dy: &Array3<T>,
    cache: &LayerNormCache<T>,
    p: &NormParams<T>,
    grad: &mut NormParams<T>,
) -> Array3<T> {
    let (b, c, t) = dy.dim();
    let mut dx = dy.clone();
    let mut dcol = vec![T::zero(); c];
    let mut xcol = vec![T::zero(); c];
    for bi in 0..b {
        for ti in 0..t {
            for ci in 0..c {
                let d = dx[(bi, ci, ti)];
                let x = cache.xhat[(bi, ci, ti)];
                grad.gamma[ci] += d * x;
                grad.beta[ci] += d;
                dcol[ci] = d * p.gamma[ci];
                xcol[ci] = x;
            }
            normalize_group_backward(&mut dcol, &xcol, cache.inv_std[(bi, ti)]);
            for ci in 0..c {
                dx[(bi, ci, ti)] = dcol[ci];
            }
        }
    }
    dx
}
