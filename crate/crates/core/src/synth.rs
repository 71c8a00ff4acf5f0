//! Synthetic facial-patch clips with a known pulse.
//!
//! Each pixel is a textured skin baseline plus a pulse term
//! `pulse_amplitude * weight[c] * bvp(t)`, a slow additive illumination drift
//! and sub-pixel motion of the texture.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, stream};
use crate::signal::{normalize_signal, BvpTrace};
use crate::tensor::Tensor;

/// Frequency of the illumination drift in Hz.
pub const DRIFT_HZ: f64 = 0.05;

/// Relative amplitude of the second harmonic in the pulse waveform.
pub const HARMONIC: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub hr_bpm: f64,
    pub fs: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub pulse_amplitude: f64,
    /// Mean skin colour (R, G, B).
    pub baseline: [f64; 3],
    /// Per-channel pulse weights (R, G, B).
    pub channel_weights: [f64; 3],
    /// Amplitude of the additive drift sinusoid.
    pub drift_amplitude: f64,
    /// Peak texture displacement in pixels.
    pub jitter_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            hr_bpm: 75.0,
            fs: 30.0,
            frames: 128,
            height: 32,
            width: 32,
            pulse_amplitude: 0.02,
            baseline: [0.7, 0.5, 0.4],
            channel_weights: [0.5, 1.0, 0.3],
            drift_amplitude: 0.02,
            jitter_amplitude: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(40.0..=180.0).contains(&self.hr_bpm) {
            return Err(Error::Config(format!("hr_bpm must lie in [40, 180], got {}", self.hr_bpm)));
        }
        if !(self.fs > 0.0) || self.hr_bpm / 60.0 >= self.fs / 2.0 {
            return Err(Error::Config(format!(
                "hr {} bpm is not below the Nyquist rate of fs = {}",
                self.hr_bpm, self.fs
            )));
        }
        if self.frames < 2 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("clip needs >= 2 frames and non-empty frames".into()));
        }
        let amps = [self.pulse_amplitude, self.drift_amplitude, self.jitter_amplitude];
        if amps.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(Error::Config("amplitudes must be finite and >= 0".into()));
        }
        if self.baseline.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::Config("baseline colour must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Normalized pulse waveform `sin(wt + p) + 0.3 sin(2wt + 2p + q)` sampled at `fs`.
pub fn pulse_waveform(hr_bpm: f64, fs: f64, frames: usize, phase: f64, harmonic_phase: f64) -> Result<Vec<f64>> {
    let w = 2.0 * PI * hr_bpm / 60.0;
    let raw: Vec<f64> = (0..frames)
        .map(|i| {
            let t = i as f64 / fs;
            (w * t + phase).sin() + HARMONIC * (2.0 * w * t + 2.0 * phase + harmonic_phase).sin()
        })
        .collect();
    normalize_signal(&raw)
}

/// Sum of a few random plane waves; smooth skin texture in roughly [-1, 1].
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn new<R: Rng>(rng: &mut R, height: usize, width: usize) -> Self {
        let scale = height.max(width) as f64;
        let waves = (0..4)
            .map(|_| {
                let ky = rng.random_range(0.5..3.0) * 2.0 * PI / scale;
                let kx = rng.random_range(0.5..3.0) * 2.0 * PI / scale;
                let amp = rng.random_range(0.1..0.3);
                (ky, kx, rng.random_range(0.0..2.0 * PI), amp)
            })
            .collect();
        Self { waves }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        self.waves
            .iter()
            .map(|&(ky, kx, p, a)| a * (ky * y + kx * x + p).sin())
            .sum()
    }
}

/// Generates one clip `[3, T, H, W]` and its pulse trace.
pub fn generate_clip(spec: &SynthSpec) -> Result<(Tensor<f32>, BvpTrace)> {
    spec.validate()?;
    let mut rng = stream(spec.seed, &[purpose::SYNTH]);
    let phase = rng.random_range(0.0..2.0 * PI);
    let harmonic_phase = rng.random_range(0.0..2.0 * PI);
    let bvp = pulse_waveform(spec.hr_bpm, spec.fs, spec.frames, phase, harmonic_phase)?;

    // nuisance terms come from their own stream so they never depend on the pulse draw
    let mut nuisance = stream(spec.seed, &[purpose::SYNTH, 1]);
    let texture = Texture::new(&mut nuisance, spec.height, spec.width);
    let drift_phase = nuisance.random_range(0.0..2.0 * PI);
    let motion: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                nuisance.random_range(0.1..1.0),
                nuisance.random_range(0.0..2.0 * PI),
                nuisance.random_range(0.5..1.0),
            )
        })
        .collect();

    let (t_len, h, w) = (spec.frames, spec.height, spec.width);
    let plane = h * w;
    let mut data = vec![0f32; 3 * t_len * plane];
    for t in 0..t_len {
        let secs = t as f64 / spec.fs;
        let drift = spec.drift_amplitude * (2.0 * PI * DRIFT_HZ * secs + drift_phase).sin();
        let [(f0, p0, a0), (f1, p1, a1)] = [motion[0], motion[1]];
        let dy = spec.jitter_amplitude * a0 * (2.0 * PI * f0 * secs + p0).sin();
        let dx = spec.jitter_amplitude * a1 * (2.0 * PI * f1 * secs + p1).sin();
        for y in 0..h {
            for x in 0..w {
                let tex = 0.1 * texture.at(y as f64 + dy, x as f64 + dx);
                for c in 0..3 {
                    let v = spec.baseline[c] * (1.0 + tex)
                        + spec.pulse_amplitude * spec.channel_weights[c] * bvp[t]
                        + drift;
                    data[(c * t_len + t) * plane + y * w + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    let clip = Tensor::new([3, t_len, h, w], data)?;
    Ok((clip, BvpTrace::new(bvp, spec.fs)?))
}

/// Spatial mean of one channel per frame.
pub fn channel_trace(clip: &Tensor<f32>, channel: usize) -> Result<Vec<f64>> {
    let shape = clip.shape();
    if shape.len() != 4 || channel >= shape[0] {
        return Err(Error::Dimension(format!(
            "expected a [C, T, H, W] clip with channel {channel}, got {shape:?}"
        )));
    }
    let (t_len, plane) = (shape[1], shape[2] * shape[3]);
    Ok((0..t_len)
        .map(|t| {
            let off = (channel * t_len + t) * plane;
            clip.data()[off..off + plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64
        })
        .collect())
}

/// Which part of a dataset a record belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Settings for a whole synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthDatasetConfig {
    pub clips: usize,
    pub hr_range: (f64, f64),
    /// Fraction of records put in the train split.
    pub train_fraction: f64,
    /// Per-record pulse amplitude is drawn from this multiple range of the
    /// base spec's amplitude (clips of varying difficulty).
    pub amplitude_range: (f64, f64),
    /// Per-record jitter is drawn from this multiple range of the base jitter.
    pub jitter_range: (f64, f64),
    pub base: SynthSpec,
    pub seed: u64,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        Self {
            clips: 64,
            hr_range: (50.0, 150.0),
            train_fraction: 0.7,
            amplitude_range: (0.6, 1.4),
            jitter_range: (0.0, 2.0),
            base: SynthSpec::default(),
            seed: 0,
        }
    }
}

/// One generated record before it is written to disk.
#[derive(Clone, Debug)]
pub struct SynthRecord {
    pub id: String,
    pub split: Split,
    pub spec: SynthSpec,
    pub clip: Tensor<f32>,
    pub bvp: BvpTrace,
}

/// Record specs (HR, difficulty, split) without rendering the clips.
pub fn plan_dataset(cfg: &SynthDatasetConfig) -> Result<Vec<(String, Split, SynthSpec)>> {
    let (lo, hi) = cfg.hr_range;
    if !(lo <= hi) || cfg.clips == 0 {
        return Err(Error::Config(format!(
            "need clips >= 1 and lo <= hi (got {} clips, range {lo}:{hi})",
            cfg.clips
        )));
    }
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(Error::Config("train_fraction must lie in [0, 1]".into()));
    }
    for (name, (a, b)) in [("amplitude_range", cfg.amplitude_range), ("jitter_range", cfg.jitter_range)] {
        if !(a >= 0.0 && a <= b) {
            return Err(Error::Config(format!("{name} must satisfy 0 <= lo <= hi")));
        }
    }
    let mut order: Vec<usize> = (0..cfg.clips).collect();
    order.shuffle(&mut stream(cfg.seed, &[purpose::SPLIT]));
    let mut n_train = (cfg.train_fraction * cfg.clips as f64).round() as usize;
    if cfg.clips >= 2 && cfg.train_fraction < 1.0 {
        n_train = n_train.clamp(1, cfg.clips - 1);
    }
    let mut split = vec![Split::Test; cfg.clips];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }
    let mut rng = stream(cfg.seed, &[purpose::SYNTH, 2]);
    let width = (cfg.clips.max(2) - 1).to_string().len();
    (0..cfg.clips)
        .map(|i| {
            let hr = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let amp = sample_range(&mut rng, cfg.amplitude_range);
            let jit = sample_range(&mut rng, cfg.jitter_range);
            let spec = SynthSpec {
                hr_bpm: hr,
                pulse_amplitude: cfg.base.pulse_amplitude * amp,
                jitter_amplitude: cfg.base.jitter_amplitude * jit,
                seed: crate::rng::derive_seed(cfg.seed, &[purpose::SYNTH, i as u64]),
                ..cfg.base.clone()
            };
            spec.validate()?;
            Ok((format!("rec{i:0width$}"), split[i], spec))
        })
        .collect()
}

fn sample_range<R: Rng>(rng: &mut R, (a, b): (f64, f64)) -> f64 {
    if b > a {
        rng.random_range(a..=b)
    } else {
        a
    }
}

/// Generates every record of a dataset.
pub fn generate_dataset(cfg: &SynthDatasetConfig) -> Result<Vec<SynthRecord>> {
    let plan = plan_dataset(cfg)?;
    crate::par::map_range(plan.len(), |i| {
        let (id, split, spec) = plan[i].clone();
        let (clip, bvp) = generate_clip(&spec)?;
        Ok(SynthRecord {
            id,
            split,
            spec,
            clip,
            bvp,
        })
    })
    .into_iter()
    .collect()
}
