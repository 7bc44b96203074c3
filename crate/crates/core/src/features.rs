//! Waveform → stacked spectrogram: log-Mel, STFT magnitude, and phase angle
//! on one shared (f, t) grid.
//!
//! The grid is shared by forcing `n_mels = n_fft/2 + 1`, so the three channels
//! stack into a (3, f, t) tensor. Frames are centered (reflect padding), which
//! gives the frame-count law `t = 1 + floor(len / hop)`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2};
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
    Rect,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub window: Window,
    pub eps: f32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            n_fft: 510,
            hop: 128,
            n_mels: 256,
            sample_rate: 20_000,
            window: Window::Hann,
            eps: 1e-6,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft == 0 || self.n_fft % 2 != 0 {
            return Err(Error::Config(format!(
                "features.n_fft must be positive and even, got {}",
                self.n_fft
            )));
        }
        if self.hop == 0 {
            return Err(Error::Config("features.hop must be positive".into()));
        }
        if self.n_mels != self.n_fft / 2 + 1 {
            return Err(Error::Config(format!(
                "features.n_mels must equal n_fft/2 + 1 = {} so all channels share one grid, got {}",
                self.n_fft / 2 + 1,
                self.n_mels
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("features.eps must be positive".into()));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_frames(&self, len: usize) -> usize {
        1 + len / self.hop
    }
}

/// (3, f, t) tensor: channel 0 log-Mel, channel 1 STFT magnitude (both
/// standardized per sample), channel 2 raw phase angle in [-π, π].
#[derive(Debug, Clone)]
pub struct StackedSpectrogram {
    pub data: Array3<f32>,
}

fn window_values(kind: Window, n: usize) -> Vec<f32> {
    match kind {
        // Periodic Hann: w[k] = 0.5 (1 - cos 2πk/N). Σw² = 3N/8 for even N.
        Window::Hann => (0..n)
            .map(|k| {
                let x = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                (0.5 * (1.0 - x.cos())) as f32
            })
            .collect(),
        Window::Rect => vec![1.0; n],
    }
}

fn fft_plan(n: usize) -> Arc<dyn Fft<f32>> {
    static PLANS: OnceLock<Mutex<HashMap<usize, Arc<dyn Fft<f32>>>>> = OnceLock::new();
    let plans = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut plans = plans.lock().unwrap();
    plans
        .entry(n)
        .or_insert_with(|| FftPlanner::new().plan_fft_forward(n))
        .clone()
}

/// Reflect ("bounce") index into [0, len), excluding the edge sample from the
/// mirror, librosa-style. Total for any len ≥ 1.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Complex STFT. Columns are DFTs of windowed frames centered at k·hop;
/// output shape (n_fft/2 + 1, 1 + floor(len/hop)).
pub fn stft(w: &Waveform, cfg: &FeatureConfig) -> Result<Array2<Complex<f32>>> {
    cfg.validate()?;
    if w.samples.is_empty() {
        return Err(Error::Shape {
            stage: "stft".into(),
            detail: "empty waveform".into(),
        });
    }
    let n = cfg.n_fft;
    let pad = n / 2;
    let len = w.samples.len();
    let n_frames = cfg.n_frames(len);
    let win = window_values(cfg.window, n);
    let fft = fft_plan(n);
    let mut scratch = vec![Complex::new(0.0f32, 0.0); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex::new(0.0f32, 0.0); n];
    let mut out = Array2::zeros((cfg.n_bins(), n_frames));
    for frame in 0..n_frames {
        let start = frame as isize * cfg.hop as isize - pad as isize;
        for (k, slot) in buf.iter_mut().enumerate() {
            let sample = w.samples[reflect_index(start + k as isize, len)];
            *slot = Complex::new(sample * win[k], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (bin, value) in buf.iter().take(cfg.n_bins()).enumerate() {
            out[(bin, frame)] = *value;
        }
    }
    Ok(out)
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank, shape (n_mels, n_bins), peak weight 1.
///
/// Each triangle's half-widths are clamped to at least one FFT-bin spacing;
/// without the clamp, dense banks (n_mels = n_fft/2 + 1) produce low-frequency
/// triangles narrower than a bin and therefore all-zero rows.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Array2<f32> {
    let n_bins = cfg.n_bins();
    let df = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mel_max = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    let hz_points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut bank = Array2::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let center = hz_points[m + 1];
        let left = hz_points[m].min(center - df);
        let right = hz_points[m + 2].max(center + df);
        for bin in 0..n_bins {
            let f = bin as f64 * df;
            let w = ((f - left) / (center - left)).min((right - f) / (right - center));
            if w > 0.0 {
                bank[(m, bin)] = w as f32;
            }
        }
    }
    bank
}

/// Log-Mel spectrogram: filterbank applied to the power spectrogram, then
/// ln(x + eps). Shape (n_mels, t).
pub fn mel_spectrogram(w: &Waveform, cfg: &FeatureConfig) -> Result<Array2<f32>> {
    let spec = stft(w, cfg)?;
    let power = spec.mapv(|c| c.norm_sqr());
    let mut mel = mel_filterbank(cfg).dot(&power);
    mel.mapv_inplace(|x| (x + cfg.eps).ln());
    Ok(mel)
}

/// Standardize in place to zero mean, unit variance (variance floor 1e-8).
pub fn standardize(mut x: ArrayViewMut2<'_, f32>) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let scale = (1.0 / var.max(1e-8).sqrt()) as f32;
    let mean = mean as f32;
    x.mapv_inplace(|v| (v - mean) * scale);
}

/// Build the 3-channel stacked spectrogram of a fixed-length waveform.
pub fn stack_channels(w: &Waveform, cfg: &FeatureConfig) -> Result<StackedSpectrogram> {
    let spec = stft(w, cfg)?;
    let (f, t) = spec.dim();
    let mut data = Array3::zeros((3, f, t));
    {
        let power = spec.mapv(|c| c.norm_sqr());
        let mut mel = mel_filterbank(cfg).dot(&power);
        mel.mapv_inplace(|x| (x + cfg.eps).ln());
        data.index_axis_mut(ndarray::Axis(0), 0).assign(&mel);
    }
    data.index_axis_mut(ndarray::Axis(0), 1)
        .assign(&spec.mapv(|c| c.norm()));
    data.index_axis_mut(ndarray::Axis(0), 2)
        .assign(&spec.mapv(|c| c.im.atan2(c.re)));
    standardize(data.index_axis_mut(ndarray::Axis(0), 0));
    standardize(data.index_axis_mut(ndarray::Axis(0), 1));
    debug_assert!(data.iter().all(|v| v.is_finite()));
    Ok(StackedSpectrogram { data })
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    dtype: String,
    shape: Vec<usize>,
    config: FeatureConfig,
}

/// Write a spectrogram as one JSON header line followed by raw little-endian
/// f32 values in row-major order.
pub fn write_features(
    path: impl AsRef<Path>,
    s: &StackedSpectrogram,
    cfg: &FeatureConfig,
) -> Result<()> {
    let path = path.as_ref();
    let header = DumpHeader {
        dtype: "f32".into(),
        shape: s.data.shape().to_vec(),
        config: cfg.clone(),
    };
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    serde_json::to_writer(&mut file, &header)
        .map_err(|e| Error::FeatureDump(e.to_string()))?;
    file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    for &v in s.data.as_slice().expect("stacked spectrogram is contiguous") {
        file.write_all(&v.to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    file.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<(StackedSpectrogram, FeatureConfig)> {
    let path = path.as_ref();
    let mut reader =
        BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: DumpHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::FeatureDump(format!("{}: bad header: {e}", path.display())))?;
    if header.dtype != "f32" {
        return Err(Error::FeatureDump(format!(
            "{}: unsupported dtype `{}`",
            path.display(),
            header.dtype
        )));
    }
    if header.shape.len() != 3 {
        return Err(Error::FeatureDump(format!(
            "{}: expected rank-3 shape, got {:?}",
            path.display(),
            header.shape
        )));
    }
    let count: usize = header.shape.iter().product();
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() != count * 4 {
        return Err(Error::FeatureDump(format!(
            "{}: expected {} bytes of data, found {}",
            path.display(),
            count * 4,
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data =
        Array3::from_shape_vec((header.shape[0], header.shape[1], header.shape[2]), values)
            .map_err(|e| Error::FeatureDump(e.to_string()))?;
    Ok((StackedSpectrogram { data }, header.config))
}

/// Doubled one-sided power sum: Σ|X|² over a full (two-sided) spectrum,
/// reconstructed from the one-sided STFT. Used by energy checks.
pub fn twosided_power(spec: ArrayView2<'_, Complex<f32>>, n_fft: usize) -> f64 {
    let (bins, frames) = spec.dim();
    let mut total = 0.0f64;
    for frame in 0..frames {
        for bin in 0..bins {
            let p = spec[(bin, frame)].norm_sqr() as f64;
            // DC and Nyquist appear once in the full spectrum; interior bins twice.
            let mult = if bin == 0 || (n_fft % 2 == 0 && bin == n_fft / 2) {
                1.0
            } else {
                2.0
            };
            total += mult * p;
        }
    }
    total
}
