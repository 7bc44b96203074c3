//! Shared oracles for unit tests.

use num_complex::Complex;
use rustfft::FftPlanner;

/// Frequency (Hz) of the strongest FFT bin of `samples`.
pub fn fft_peak_hz(samples: &[f32], rate: u32) -> f64 {
    let n = samples.len();
    let mut buf: Vec<Complex<f64>> = samples
        .iter()
        .map(|&s| Complex::new(f64::from(s), 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2 + 1;
    let peak = buf[..half]
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm_sqr().total_cmp(&b.1.norm_sqr()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    peak as f64 * f64::from(rate) / n as f64
}
