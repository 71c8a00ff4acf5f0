//! Heart rate from the dominant spectral peak inside the pass band.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::filter::{BandSpec, Bandpass};
use super::BvpTrace;
use crate::error::{Error, Result};

/// Minimum transform length; keeps the bin spacing near 0.44 bpm at 30 Hz.
const MIN_FFT: usize = 4096;

/// Zero-padded transform length used for an `n`-sample trace.
pub fn fft_len(n: usize) -> usize {
    (8 * n).max(MIN_FFT).next_power_of_two()
}

/// Power spectrum of the Hann-windowed, zero-padded trace; bin `k` is at
/// `k * fs / n_fft` Hz. Returns `fft_len(n) / 2 + 1` bins.
pub fn power_spectrum(samples: &[f64]) -> Vec<f64> {
    let n = samples.len();
    let n_fft = fft_len(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let denom = (n.max(2) - 1) as f64;
    for (i, (b, &v)) in buf.iter_mut().zip(samples).enumerate() {
        let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / denom).cos();
        b.re = v * w;
    }
    FftPlanner::new().plan_fft_forward(n_fft).process(&mut buf);
    buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

/// Band-pass filters the trace, then returns 60 x the frequency of the largest
/// power-spectrum peak inside the band, refined by parabolic interpolation.
pub fn estimate_hr(trace: &BvpTrace, band: &BandSpec) -> Result<f64> {
    let n = trace.len();
    if (n as f64) < 4.0 * trace.fs {
        return Err(Error::Input(format!(
            "heart-rate estimation needs >= 4 s of signal ({} samples), got {n}",
            (4.0 * trace.fs).ceil()
        )));
    }
    let filtered = Bandpass::design(*band, trace.fs)?.filtfilt(&trace.samples)?;
    if filtered.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            component: "filtered trace".into(),
        });
    }
    let power = power_spectrum(&filtered);
    let df = trace.fs / fft_len(n) as f64;
    let lo = (band.low / df).ceil() as usize;
    let hi = ((band.high / df).floor() as usize).min(power.len() - 1);
    let k = (lo..=hi)
        .max_by(|&a, &b| power[a].total_cmp(&power[b]).then(b.cmp(&a)))
        .expect("band holds at least one bin");
    let mut f = k as f64 * df;
    if k > lo && k < hi {
        let (a, b, c) = (power[k - 1], power[k], power[k + 1]);
        let d = a - 2.0 * b + c;
        if d < 0.0 {
            f += 0.5 * (a - c) / d * df;
        }
    }
    Ok(60.0 * f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn trace(n: usize, f: impl Fn(f64) -> f64) -> BvpTrace {
        BvpTrace::new((0..n).map(|i| f(i as f64 / 30.0)).collect(), 30.0).unwrap()
    }

    #[test]
    fn pure_tones() {
        let band = BandSpec::default();
        let hr = estimate_hr(&trace(512, |t| (2.0 * PI * 1.5 * t).sin()), &band).unwrap();
        assert!((hr - 90.0).abs() <= 0.5, "{hr}");
        let hr = estimate_hr(&trace(512, |t| (2.0 * PI * 1.0 * t).sin()), &band).unwrap();
        assert!((hr - 60.0).abs() <= 0.5, "{hr}");
    }

    #[test]
    fn dominant_peak_of_a_mixture() {
        let x = trace(512, |t| (2.0 * PI * 1.2 * t).sin() + 0.3 * (2.0 * PI * 2.0 * t).sin());
        let hr = estimate_hr(&x, &BandSpec::default()).unwrap();
        assert!((hr - 72.0).abs() <= 0.5, "{hr}");
    }

    #[test]
    fn clip_length_traces_are_accurate() {
        for bpm in [55.0, 75.0, 101.3, 140.0] {
            let x = trace(128, |t| (2.0 * PI * bpm / 60.0 * t + 0.4).sin());
            let hr = estimate_hr(&x, &BandSpec::default()).unwrap();
            assert!((hr - bpm).abs() < 1.5, "{bpm} -> {hr}");
        }
    }

    #[test]
    fn short_trace_is_rejected() {
        assert!(matches!(
            estimate_hr(&trace(100, |t| t.sin()), &BandSpec::default()),
            Err(Error::Input(_))
        ));
    }
}
