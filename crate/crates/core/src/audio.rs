//! Waveform ingestion: WAV decode/encode, band-limited resampling, length
//! normalization.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Mono audio snippet. Samples are nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, rate: u32) -> Self {
        assert!(rate > 0, "sample rate must be positive");
        Waveform { samples, rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

// ---------------------------------------------------------------------------
// WAV container
// ---------------------------------------------------------------------------

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        if end > self.buf.len() {
            return None;
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|s| u16::from_le_bytes([s[0], s[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }
}

const WAVE_FORMAT_PCM: u16 = 1;
const WAVE_FORMAT_IEEE_FLOAT: u16 = 3;

/// Decode a RIFF/WAVE file to a mono waveform.
///
/// Multi-channel audio is averaged down to one channel. 16-bit PCM and 32-bit
/// IEEE float payloads are accepted.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes).map_err(|kind| match kind {
        WavErr::Decode(reason) => Error::WavDecode {
            path: path.to_path_buf(),
            reason,
        },
        WavErr::Unsupported(reason) => Error::WavUnsupported {
            path: path.to_path_buf(),
            reason,
        },
    })
}

enum WavErr {
    Decode(String),
    Unsupported(String),
}

fn decode_wav(bytes: &[u8]) -> std::result::Result<Waveform, WavErr> {
    let bad = |m: &str| WavErr::Decode(m.to_string());
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4) != Some(b"RIFF") {
        return Err(bad("missing RIFF magic"));
    }
    let _riff_size = cur.u32().ok_or_else(|| bad("truncated RIFF header"))?;
    if cur.take(4) != Some(b"WAVE") {
        return Err(bad("missing WAVE form type"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while cur.pos < bytes.len() {
        let id: [u8; 4] = match cur.take(4) {
            Some(s) => [s[0], s[1], s[2], s[3]],
            None => break,
        };
        let size = cur.u32().ok_or_else(|| bad("truncated chunk header"))? as usize;
        let payload = cur
            .take(size)
            .ok_or_else(|| bad("chunk size exceeds file length"))?;
        if size % 2 == 1 {
            let _ = cur.take(1); // RIFF chunks are word-aligned
        }
        match &id {
            b"fmt " => {
                let mut f = Cursor { buf: payload, pos: 0 };
                let format = f.u16().ok_or_else(|| bad("short fmt chunk"))?;
                let channels = f.u16().ok_or_else(|| bad("short fmt chunk"))?;
                let rate = f.u32().ok_or_else(|| bad("short fmt chunk"))?;
                let _byte_rate = f.u32().ok_or_else(|| bad("short fmt chunk"))?;
                let _block_align = f.u16().ok_or_else(|| bad("short fmt chunk"))?;
                let bits = f.u16().ok_or_else(|| bad("short fmt chunk"))?;
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => {
                data = Some(payload);
                break;
            }
            _ => {}
        }
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| bad("missing fmt chunk"))?;
    let data = data.ok_or_else(|| bad("missing data chunk"))?;
    if channels == 0 {
        return Err(bad("zero channels"));
    }
    if rate == 0 {
        return Err(bad("zero sample rate"));
    }

    let unsupported = |m: String| WavErr::Unsupported(m);
    let samples: Vec<f32> = match (format, bits) {
        (WAVE_FORMAT_PCM, 16) => {
            let frame = 2 * channels as usize;
            if data.len() % frame != 0 {
                return Err(bad("data chunk is not a whole number of frames"));
            }
            data.chunks_exact(frame)
                .map(|fr| {
                    let mut acc = 0.0f32;
                    for c in 0..channels as usize {
                        let v = i16::from_le_bytes([fr[2 * c], fr[2 * c + 1]]);
                        acc += f32::from(v) / 32768.0;
                    }
                    acc / channels as f32
                })
                .collect()
        }
        (WAVE_FORMAT_IEEE_FLOAT, 32) => {
            let frame = 4 * channels as usize;
            if data.len() % frame != 0 {
                return Err(bad("data chunk is not a whole number of frames"));
            }
            data.chunks_exact(frame)
                .map(|fr| {
                    let mut acc = 0.0f32;
                    for c in 0..channels as usize {
                        let v = f32::from_le_bytes([
                            fr[4 * c],
                            fr[4 * c + 1],
                            fr[4 * c + 2],
                            fr[4 * c + 3],
                        ]);
                        acc += v;
                    }
                    acc / channels as f32
                })
                .collect()
        }
        (WAVE_FORMAT_PCM, b) => {
            return Err(unsupported(format!("PCM with {b} bits per sample")))
        }
        (WAVE_FORMAT_IEEE_FLOAT, b) => {
            return Err(unsupported(format!("float with {b} bits per sample")))
        }
        (f, _) => return Err(unsupported(format!("format code {f}"))),
    };

    if samples.iter().any(|s| !s.is_finite()) {
        return Err(bad("non-finite sample value"));
    }
    Ok(Waveform::new(samples, rate))
}

/// Write a mono waveform as 16-bit PCM. Samples are clamped to `[-1, 1]`.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let data_len = (w.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&WAVE_FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.rate.to_le_bytes());
    out.extend_from_slice(&(w.rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

const TAPS: usize = 64;
const HALF: isize = (TAPS / 2) as isize;
const SUBPHASES: usize = 256;
const KAISER_BETA: f64 = 8.6;

fn bessel_i0(x: f64) -> f64 {
    // Series expansion; converges quickly for the argument range we use.
    let mut term = 1.0;
    let mut sum = 1.0;
    let half_x = x / 2.0;
    for k in 1..=30 {
        term *= (half_x / k as f64) * (half_x / k as f64);
        sum += term;
        if term < 1e-18 * sum {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Phase-major table of windowed-sinc taps for one cutoff, rows normalized to
/// unit DC gain.
fn build_kernel_table(cutoff: f64) -> Vec<f32> {
    let i0_beta = bessel_i0(KAISER_BETA);
    let mut table = vec![0.0f32; (SUBPHASES + 1) * TAPS];
    for phase in 0..=SUBPHASES {
        let frac = phase as f64 / SUBPHASES as f64;
        let row = &mut table[phase * TAPS..(phase + 1) * TAPS];
        let mut sum = 0.0f64;
        for (k, slot) in row.iter_mut().enumerate() {
            // Input index offset for tap k is (k - HALF + 1); kernel argument
            // is the distance from the interpolation point.
            let x = frac + (HALF - 1 - k as isize) as f64;
            let u = x / HALF as f64;
            let tap = if u.abs() <= 1.0 {
                cutoff * sinc(cutoff * x) * bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / i0_beta
            } else {
                0.0
            };
            *slot = tap as f32;
            sum += tap;
        }
        if sum.abs() > 1e-12 {
            let inv = (1.0 / sum) as f32;
            for slot in row.iter_mut() {
                *slot *= inv;
            }
        }
    }
    table
}

fn kernel_table(cutoff: f64) -> Arc<Vec<f32>> {
    // Quantize so the cache stays small across arbitrary pitch ratios.
    static CACHE: OnceLock<Mutex<HashMap<u32, Arc<Vec<f32>>>>> = OnceLock::new();
    let q = ((cutoff * 50.0).floor().clamp(1.0, 50.0)) as u32;
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("kernel cache poisoned");
    guard
        .entry(q)
        .or_insert_with(|| Arc::new(build_kernel_table(q as f64 / 50.0)))
        .clone()
}

/// Windowed-sinc interpolation of `input` at positions `o * step` for
/// `o = 0..out_len`. `cutoff` is relative to the input Nyquist frequency.
pub(crate) fn sinc_interpolate(input: &[f32], out_len: usize, step: f64, cutoff: f64) -> Vec<f32> {
    let table = kernel_table(cutoff);
    let n = input.len() as isize;
    let mut out = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let p = o as f64 * step;
        let ip = p.floor();
        let frac = p - ip;
        let phase = frac * SUBPHASES as f64;
        let pi = phase.floor() as usize;
        let pw = (phase - pi as f64) as f32;
        let row_a = &table[pi * TAPS..(pi + 1) * TAPS];
        let row_b = &table[(pi + 1) * TAPS..(pi + 2) * TAPS];
        let start = ip as isize - HALF + 1;
        let mut acc_a = 0.0f64;
        let mut acc_b = 0.0f64;
        if start >= 0 && start + TAPS as isize <= n {
            let src = &input[start as usize..start as usize + TAPS];
            for k in 0..TAPS {
                acc_a += f64::from(row_a[k]) * f64::from(src[k]);
                acc_b += f64::from(row_b[k]) * f64::from(src[k]);
            }
        } else {
            for k in 0..TAPS {
                let j = start + k as isize;
                if j >= 0 && j < n {
                    let v = f64::from(input[j as usize]);
                    acc_a += f64::from(row_a[k]) * v;
                    acc_b += f64::from(row_b[k]) * v;
                }
            }
        }
        out.push((acc_a * (1.0 - f64::from(pw)) + acc_b * f64::from(pw)) as f32);
    }
    out
}

/// Band-limited resampling to `target_rate`.
///
/// Output length is `round(len * target_rate / rate)`. Equal rates return the
/// input unchanged.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::Config("target sample rate must be positive".into()));
    }
    if w.rate == target_rate {
        return Ok(w.clone());
    }
    let out_len = (w.samples.len() as f64 * f64::from(target_rate) / f64::from(w.rate)).round()
        as usize;
    let step = f64::from(w.rate) / f64::from(target_rate);
    let cutoff = (1.0 / step).min(1.0) * 0.945;
    let samples = sinc_interpolate(&w.samples, out_len, step, cutoff);
    Ok(Waveform::new(samples, target_rate))
}

/// Fix the length to exactly `target_len`: center-crop longer inputs,
/// symmetrically zero-pad shorter ones.
pub fn crop_or_pad(w: &Waveform, target_len: usize) -> Waveform {
    assert!(target_len > 0, "target length must be positive");
    let n = w.samples.len();
    if n == target_len {
        return w.clone();
    }
    let samples = if n > target_len {
        let start = (n - target_len) / 2;
        w.samples[start..start + target_len].to_vec()
    } else {
        let left = (target_len - n) / 2;
        let mut s = vec![0.0f32; target_len];
        s[left..left + n].copy_from_slice(&w.samples);
        s
    };
    Waveform::new(samples, w.rate)
}

/// Like [`crop_or_pad`] but longer inputs are cropped at a seed-determined
/// offset instead of the center.
pub fn crop_or_pad_seeded(w: &Waveform, target_len: usize, seed: u64) -> Waveform {
    assert!(target_len > 0, "target length must be positive");
    let n = w.samples.len();
    if n <= target_len {
        return crop_or_pad(w, target_len);
    }
    let mut rng = rng_for(seed, "crop", 0);
    let start = rng.gen_range(0..=n - target_len);
    Waveform::new(w.samples[start..start + target_len].to_vec(), w.rate)
}
