//! Digital Butterworth band-pass (bilinear transform, prewarped edges),
//! applied forward and backward for zero phase.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pass band in Hz and prototype order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandSpec {
    pub low: f64,
    pub high: f64,
    pub order: usize,
}

impl Default for BandSpec {
    fn default() -> Self {
        Self {
            low: 0.6,
            high: 3.0,
            order: 4,
        }
    }
}

impl BandSpec {
    pub fn validate(&self, fs: f64) -> Result<()> {
        if !(self.low > 0.0 && self.low < self.high && self.high < fs / 2.0) {
            return Err(Error::Config(format!(
                "band [{}, {}] Hz must satisfy 0 < low < high < fs/2 = {}",
                self.low,
                self.high,
                fs / 2.0
            )));
        }
        if self.order == 0 {
            return Err(Error::Config("filter order must be >= 1".into()));
        }
        Ok(())
    }

    fn prewarped(&self, fs: f64) -> (f64, f64) {
        let w = |f: f64| 2.0 * fs * (PI * f / fs).tan();
        (w(self.low), w(self.high))
    }
}

/// One second-order section `(b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + self.b[1] * z_inv + self.b[2] * z2) / (1.0 + self.a[0] * z_inv + self.a[1] * z2)
    }

    fn dc_gain(&self) -> f64 {
        (self.b.iter().sum::<f64>()) / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct-form II state reached after a unit step settles.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z1 = self.b[2] - self.a[1] * g;
        let z0 = self.b[1] - self.a[0] * g + z1;
        [z0, z1]
    }

    fn run(&self, x: &mut [f64], mut z: [f64; 2]) {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        for v in x.iter_mut() {
            let xi = *v;
            let y = b0 * xi + z[0];
            z[0] = b1 * xi - a1 * y + z[1];
            z[1] = b2 * xi - a2 * y;
            *v = y;
        }
    }
}

/// A designed band-pass as a cascade of second-order sections.
#[derive(Clone, Debug, PartialEq)]
pub struct Bandpass {
    pub band: BandSpec,
    pub fs: f64,
    pub sections: Vec<Biquad>,
}

impl Bandpass {
    pub fn design(band: BandSpec, fs: f64) -> Result<Self> {
        band.validate(fs)?;
        let n = band.order;
        let (wl, wh) = band.prewarped(fs);
        let w0 = (wl * wh).sqrt();
        let bw = wh - wl;

        // Each upper-half-plane prototype pole p yields band-pass poles s1, s2;
        // conj(p) yields their conjugates, so (s1, conj s1) and (s2, conj s2)
        // are the section pole pairs. A real prototype pole gives one section.
        let mut pairs: Vec<(Complex64, Complex64)> = Vec::with_capacity(n);
        for k in 0..n {
            let theta = PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
            let p = Complex64::from_polar(1.0, theta);
            if p.im < -1e-12 {
                continue;
            }
            let pb = p * bw;
            let disc = (pb * pb - 4.0 * w0 * w0).sqrt();
            let (s1, s2) = ((pb + disc) / 2.0, (pb - disc) / 2.0);
            if p.im.abs() <= 1e-12 {
                pairs.push((s1, s2));
            } else {
                pairs.push((s1, s1.conj()));
                pairs.push((s2, s2.conj()));
            }
        }
        debug_assert_eq!(pairs.len(), n);

        let k2 = 2.0 * fs;
        let bilinear = |s: Complex64| (k2 + s) / (k2 - s);
        let mut sections: Vec<Biquad> = pairs
            .iter()
            .map(|&(s1, s2)| {
                let (z1, z2) = (bilinear(s1), bilinear(s2));
                Biquad {
                    b: [1.0, 0.0, -1.0],
                    a: [-(z1 + z2).re, (z1 * z2).re],
                }
            })
            .collect();

        // unit gain at the digital image of the analog centre frequency
        let wc = 2.0 * (w0 / k2).atan();
        let z_inv = Complex64::from_polar(1.0, -wc);
        let g: f64 = sections.iter().map(|s| s.response(z_inv).norm()).product();
        let per = g.powf(-1.0 / sections.len() as f64);
        for s in &mut sections {
            for b in &mut s.b {
                *b *= per;
            }
        }
        Ok(Self { band, fs, sections })
    }

    /// Magnitude of the single-pass digital response at `f` Hz.
    pub fn magnitude(&self, f: f64) -> f64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * f / self.fs);
        self.sections.iter().map(|s| s.response(z_inv).norm()).product()
    }

    /// One causal pass with every section started from rest.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            s.run(&mut y, [0.0; 2]);
        }
        y
    }

    fn filter_steady(&self, y: &mut [f64]) {
        let x0 = y[0];
        let mut scale = x0;
        for s in &self.sections {
            let z = s.step_state();
            s.run(y, [z[0] * scale, z[1] * scale]);
            scale *= s.dc_gain();
        }
    }

    /// Zero-phase filtering: odd extension at both ends, steady-state
    /// initial conditions, forward pass, backward pass.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = x.len();
        if n < 2 {
            return Err(Error::Input(format!("filtfilt needs at least 2 samples, got {n}")));
        }
        let pad = (3 * (2 * self.sections.len() + 1)).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.filter_steady(&mut ext);
        ext.reverse();
        self.filter_steady(&mut ext);
        ext.reverse();
        Ok(ext[pad..pad + n].to_vec())
    }
}

/// Band-pass filters `samples` forward and backward.
pub fn butterworth_bandpass(samples: &[f64], fs: f64, band: &BandSpec) -> Result<Vec<f64>> {
    Bandpass::design(*band, fs)?.filtfilt(samples)
}
