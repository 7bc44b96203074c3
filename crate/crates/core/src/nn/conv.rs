//! Frequency-only convolutions on (B, C, F, T) tensors.
//!
//! Every kernel has time extent 1, so each time step is an independent
//! column. Convolution is evaluated as one GEMM per layer: an im2col matrix
//! gathers (c_in · k) input taps for every (batch, f_out, t) position and the
//! weight matrix multiplies it, which keeps the whole batch on the fast
//! matrix-multiply path.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;

use super::{real, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Conv<T> {
    /// (c_out, c_in · k)
    pub weight: Array2<T>,
    /// None for convolutions followed by a channel norm — the norm's mean
    /// subtraction cancels a bias exactly, leaving it a dead parameter.
    pub bias: Option<Array1<T>>,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv<T> {
    pub fn zeros(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
    ) -> Self {
        Conv {
            weight: Array2::zeros((c_out, c_in * k)),
            bias: with_bias.then(|| Array1::zeros(c_out)),
            k,
            stride,
            pad,
        }
    }

    /// Kaiming-uniform init (bound √(6/fan_in), fan_in = c_in·k), zero bias.
    pub fn kaiming(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (6.0 / (c_in * k) as f64).sqrt();
        Conv {
            weight: Array2::from_shape_fn((c_out, c_in * k), |_| {
                real::<T>(rng.gen_range(-bound..bound))
            }),
            bias: with_bias.then(|| Array1::zeros(c_out)),
            k,
            stride,
            pad,
        }
    }

    /// Zero-valued copy with the same shape and bias presence — the gradient
    /// accumulator template.
    pub fn zeros_like(&self) -> Self {
        Conv {
            weight: Array2::zeros(self.weight.dim()),
            bias: self.bias.as_ref().map(|b| Array1::zeros(b.len())),
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.ncols() / self.k
    }

    pub fn c_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_len(&self, f: usize) -> Option<usize> {
        (f + 2 * self.pad >= self.k).then(|| (f + 2 * self.pad - self.k) / self.stride + 1)
    }
}

/// Gather conv taps: output (c_in·k, B·F_out·T), column index (b, fo, t).
fn im2col<T: Real>(x: &Array4<T>, conv: &Conv<T>, f_out: usize) -> Array2<T> {
    let (b, c_in, f, t) = x.dim();
    let mut m = Array2::zeros((c_in * conv.k, b * f_out * t));
    for bi in 0..b {
        for ci in 0..c_in {
            for kk in 0..conv.k {
                let row = ci * conv.k + kk;
                for fo in 0..f_out {
                    let fi = (fo * conv.stride + kk) as isize - conv.pad as isize;
                    if fi < 0 || fi >= f as isize {
                        continue;
                    }
                    let col_base = (bi * f_out + fo) * t;
                    for ti in 0..t {
                        m[(row, col_base + ti)] = x[(bi, ci, fi as usize, ti)];
                    }
                }
            }
        }
    }
    m
}

/// Scatter-add the im2col gradient back onto the input grid.
fn col2im<T: Real>(dm: &Array2<T>, conv: &Conv<T>, dims: (usize, usize, usize, usize)) -> Array4<T> {
    let (b, c_in, f, t) = dims;
    let f_out = conv.output_len(f).expect("validated by forward");
    let mut dx = Array4::zeros(dims);
    for bi in 0..b {
        for ci in 0..c_in {
            for kk in 0..conv.k {
                let row = ci * conv.k + kk;
                for fo in 0..f_out {
                    let fi = (fo * conv.stride + kk) as isize - conv.pad as isize;
                    if fi < 0 || fi >= f as isize {
                        continue;
                    }
                    let col_base = (bi * f_out + fo) * t;
                    for ti in 0..t {
                        dx[(bi, ci, fi as usize, ti)] += dm[(row, col_base + ti)];
                    }
                }
            }
        }
    }
    dx
}

/// (B, C_in, F, T) → (B, C_out, F_out, T). `stage` names the layer in shape
/// errors when the frequency axis has shrunk below the kernel.
pub fn conv_forward<T: Real>(x: &Array4<T>, conv: &Conv<T>, stage: &str) -> Result<Array4<T>> {
    let (b, c_in, f, t) = x.dim();
    if c_in != conv.c_in() {
        return Err(Error::Shape {
            stage: stage.into(),
            detail: format!("expected {} input channels, got {c_in}", conv.c_in()),
        });
    }
    if conv.stride > 1 && f < conv.stride {
        return Err(Error::Shape {
            stage: stage.into(),
            detail: format!(
                "frequency axis {f} already exhausted before stride-{} downsampling",
                conv.stride
            ),
        });
    }
    let f_out = conv.output_len(f).ok_or_else(|| Error::Shape {
        stage: stage.into(),
        detail: format!(
            "frequency axis {f} too small for kernel {} with padding {}",
            conv.k, conv.pad
        ),
    })?;
    let m = im2col(x, conv, f_out);
    let mut y2 = conv.weight.dot(&m);
    if let Some(bias) = &conv.bias {
        for (mut row, &bv) in y2.rows_mut().into_iter().zip(bias.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
    }
    // Columns are ordered (b, fo, t): reshape to (c_out, b, f_out, t), then
    // move channels behind batch.
    let y = y2
        .into_shape_with_order((conv.c_out(), b, f_out, t))
        .expect("gemm output size matches");
    Ok(y.permuted_axes([1, 0, 2, 3]).as_standard_layout().to_owned())
}

/// Returns dX and accumulates weight/bias gradients into `grad`.
pub fn conv_backward<T: Real>(
    x: &Array4<T>,
    dy: &Array4<T>,
    conv: &Conv<T>,
    grad: &mut Conv<T>,
) -> Array4<T> {
    let (b, _, f, t) = x.dim();
    let f_out = conv.output_len(f).expect("validated by forward");
    let dy2 = dy
        .view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_shape_with_order((conv.c_out(), b * f_out * t))
        .expect("dy matches forward output shape")
        .to_owned();
    let m = im2col(x, conv, f_out);
    grad.weight += &dy2.dot(&m.t());
    if let Some(gb) = &mut grad.bias {
        *gb += &dy2.sum_axis(Axis(1));
    }
    let dm = conv.weight.t().dot(&dy2);
    col2im(&dm, conv, x.dim())
}

pub struct MaxPoolCache {
    /// Source frequency index chosen for each output element.
    argmax: Array4<usize>,
}

/// 3×1 max pooling over frequency, stride 2, zero-free padding of one bin on
/// each side (padded positions are −∞ and never selected).
pub fn maxpool3_forward<T: Real>(x: &Array4<T>, stage: &str) -> Result<(Array4<T>, MaxPoolCache)> {
    let (b, c, f, t) = x.dim();
    if f < 2 {
        return Err(Error::Shape {
            stage: stage.into(),
            detail: format!("frequency axis {f} already exhausted before stride-2 pooling"),
        });
    }
    let f_out = (f + 2 - 3) / 2 + 1;
    let mut y = Array4::zeros((b, c, f_out, t));
    let mut argmax = Array4::zeros((b, c, f_out, t));
    for bi in 0..b {
        for ci in 0..c {
            for fo in 0..f_out {
                for ti in 0..t {
                    let mut best = T::neg_infinity();
                    let mut best_f = 0usize;
                    for kk in 0..3 {
                        let fi = (fo * 2 + kk) as isize - 1;
                        if fi < 0 || fi >= f as isize {
                            continue;
                        }
                        let v = x[(bi, ci, fi as usize, ti)];
                        if v > best {
                            best = v;
                            best_f = fi as usize;
                        }
                    }
                    y[(bi, ci, fo, ti)] = best;
                    argmax[(bi, ci, fo, ti)] = best_f;
                }
            }
        }
    }
    Ok((y, MaxPoolCache { argmax }))
}

pub fn maxpool3_backward<T: Real>(
    dy: &Array4<T>,
    cache: &MaxPoolCache,
    input_dims: (usize, usize, usize, usize),
) -> Array4<T> {
    let (b, c, f_out, t) = dy.dim();
    let mut dx = Array4::zeros(input_dims);
    for bi in 0..b {
        for ci in 0..c {
            for fo in 0..f_out {
                for ti in 0..t {
                    let fi = cache.argmax[(bi, ci, fo, ti)];
                    dx[(bi, ci, fi, ti)] += dy[(bi, ci, fo, ti)];
                }
            }
        }
    }
    dx
}

/// Full-height f×1 average pool: (B, C, F, T) → (B, C, T).
pub fn avgpool_freq_forward<T: Real>(x: &Array4<T>) -> ndarray::Array3<T> {
    x.mean_axis(Axis(2)).expect("f ≥ 1")
}

pub fn avgpool_freq_backward<T: Real>(
    dy: &ndarray::Array3<T>,
    input_dims: (usize, usize, usize, usize),
) -> Array4<T> {
    let (_, _, f, _) = input_dims;
    let scale = real::<T>(1.0 / f as f64);
    let mut dx = Array4::zeros(input_dims);
    for fi in 0..f {
        dx.index_axis_mut(Axis(2), fi).assign(&dy.mapv(|v| v * scale));
    }
    dx
}
