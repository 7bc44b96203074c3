//! Deterministic synthetic call-type generator for desk-scale experiments.
//!
//! Each class is a harmonic stack with a class-determined fundamental
//! (3-semitone steps above 220 Hz, so any two classes are ≥ 3 semitones
//! apart), partial decay, amplitude-modulation pulse rate, and noise floor.
//! Per-clip variation (detune, phases, level, noise) comes from counter-based
//! sub-seeds, so the same seed always writes byte-identical WAV files.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;

use crate::audio::{write_wav, Waveform};
use crate::error::{Error, Result};
use crate::manifest::{Entry, Manifest, Role};
use crate::rng::rng_for;

const BASE_HZ: f64 = 220.0;
const SEMITONE_STEP: f64 = 3.0;
/// Per-clip detune range in semitones; well inside the 3-semitone class gap.
const DETUNE_SEMITONES: f64 = 0.3;
const MAX_PARTIALS: usize = 6;

/// Nominal fundamental of class `c`: 220 Hz raised by 3 semitones per step.
pub fn class_f0(class: usize) -> f64 {
    BASE_HZ * 2f64.powf(SEMITONE_STEP * class as f64 / 12.0)
}

/// Amplitude-modulation pulse rate of class `c` (all below 8 Hz so the
/// envelope is resolvable at typical frame rates).
pub fn class_pulse_hz(class: usize) -> f64 {
    2.0 + (class % 6) as f64
}

fn class_partial_decay(class: usize) -> f64 {
    1.0 + 0.25 * (class % 4) as f64
}

fn class_noise_amp(class: usize) -> f64 {
    0.005 + 0.003 * (class % 5) as f64
}

/// Render one clip of class `class`; `index` must be globally unique so every
/// clip gets an independent sub-seed.
pub fn synth_clip(class: usize, index: u64, rate: u32, clip_len: usize, seed: u64) -> Waveform {
    let mut rng = rng_for(seed, "synth", index);
    let detune: f64 = rng.gen_range(-DETUNE_SEMITONES..DETUNE_SEMITONES);
    let f0 = class_f0(class) * 2f64.powf(detune / 12.0);
    let pulse_hz = class_pulse_hz(class);
    let decay = class_partial_decay(class);
    let noise_amp = class_noise_amp(class);
    let am_phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let level: f64 = rng.gen_range(0.75..1.0);

    let nyquist = f64::from(rate) / 2.0;
    let n_partials = (nyquist / f0).floor().min(MAX_PARTIALS as f64).max(1.0) as usize;
    let phases: Vec<f64> = (0..n_partials).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let amps: Vec<f64> = (1..=n_partials).map(|k| 1.0 / (k as f64).powf(decay)).collect();

    let dt = 1.0 / f64::from(rate);
    let mut samples = Vec::with_capacity(clip_len);
    let mut peak = 0.0f64;
    for n in 0..clip_len {
        let t = n as f64 * dt;
        // Smooth pulse train in [0.1, 1.1]: never fully gated, no clicks.
        let env = 0.1 + (0.5 * (1.0 - (2.0 * PI * pulse_hz * t + am_phase).cos())).powf(1.5);
        let mut tone = 0.0;
        for k in 0..n_partials {
            tone += amps[k] * (2.0 * PI * (k + 1) as f64 * f0 * t + phases[k]).sin();
        }
        let noise = noise_amp * rng.gen_range(-1.0..1.0);
        let v = env * tone + noise;
        peak = peak.max(v.abs());
        samples.push(v);
    }
    let scale = if peak > 0.0 { 0.85 * level / peak } else { 0.0 };
    Waveform::new(samples.iter().map(|&v| (v * scale) as f32).collect(), rate)
}

/// Class labels padded so lexicographic and numeric order agree.
fn class_label(class: usize, n_classes: usize) -> String {
    let width = (n_classes.max(2) - 1).to_string().len();
    format!("class{class:0width$}")
}

/// Write `n_classes × clips_per_class` WAVs plus `manifest.csv` into
/// `out_dir`. Returns the manifest (paths relative to `out_dir`).
pub fn make_synth(
    out_dir: &Path,
    n_classes: usize,
    clips_per_class: usize,
    rate: u32,
    clip_len: usize,
    seed: u64,
) -> Result<Manifest> {
    if n_classes == 0 || clips_per_class == 0 {
        return Err(Error::Config(
            "make-synth needs at least one class and one clip per class".into(),
        ));
    }
    if rate == 0 || clip_len == 0 {
        return Err(Error::Config("make-synth needs a positive rate and clip length".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut entries = Vec::with_capacity(n_classes * clips_per_class);
    for c in 0..n_classes {
        let label = class_label(c, n_classes);
        for k in 0..clips_per_class {
            let index = (c * clips_per_class + k) as u64;
            let clip = synth_clip(c, index, rate, clip_len, seed);
            let name = format!("{label}_clip{k:03}.wav");
            write_wav(out_dir.join(&name), &clip)?;
            entries.push(Entry {
                path: name,
                label: label.clone(),
                group: String::new(),
                role: Role::Auto,
            });
        }
    }
    let manifest = Manifest::from_entries(entries)?;
    manifest.write(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
