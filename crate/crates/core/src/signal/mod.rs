//! 1-D signal processing: Butterworth band-pass, cubic-spline resampling,
//! normalization, spectral heart-rate estimation and pixel noise.

mod filter;
mod hr;
mod spline;

pub use filter::{butterworth_bandpass, BandSpec, Bandpass, Biquad};
pub use hr::{estimate_hr, fft_len, power_spectrum};
pub use spline::{cubic_spline_resample, CubicSpline};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A uniformly sampled 1-D signal.
#[derive(Clone, Debug, PartialEq)]
pub struct BvpTrace {
    pub samples: Vec<f64>,
    pub fs: f64,
}

impl BvpTrace {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self> {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::Config(format!("sampling rate must be > 0, got {fs}")));
        }
        if samples.len() < 2 {
            return Err(Error::Input(format!("trace needs at least 2 samples, got {}", samples.len())));
        }
        Ok(Self { samples, fs })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    /// Sample times starting at 0.
    pub fn times(&self) -> Vec<f64> {
        (0..self.samples.len()).map(|i| i as f64 / self.fs).collect()
    }
}

/// Affine map sending the minimum to -1 and the maximum to +1.
pub fn normalize_signal(samples: &[f64]) -> Result<Vec<f64>> {
    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Degenerate(format!(
            "cannot normalize a signal with range [{lo}, {hi}]"
        )));
    }
    let mid = 0.5 * (hi + lo);
    let half = 0.5 * (hi - lo);
    Ok(samples.iter().map(|&v| ((v - mid) / half).clamp(-1.0, 1.0)).collect())
}

/// Adds i.i.d. `N(0, level^2)` noise to every pixel, then clips to [0, 1].
pub fn add_noise<R: Rng>(clip: &Tensor<f32>, level: f64, rng: &mut R) -> Result<Tensor<f32>> {
    if !(level >= 0.0 && level.is_finite()) {
        return Err(Error::Config(format!("noise level must be finite and >= 0, got {level}")));
    }
    if level == 0.0 {
        return Ok(clip.clone());
    }
    Ok(clip.map(|v| {
        let e: f64 = StandardNormal.sample(rng);
        (v as f64 + level * e).clamp(0.0, 1.0) as f32
    }))
}
