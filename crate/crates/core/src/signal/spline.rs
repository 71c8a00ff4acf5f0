//! Natural cubic spline interpolation.

use crate::error::{Error, Result};

/// Natural cubic spline through `(x, y)` knots with increasing `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct CubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn new(x: &[f64], y: &[f64]) -> Result<Self> {
        let n = x.len();
        if n != y.len() || n < 2 {
            return Err(Error::Input(format!(
                "spline needs matching knots (>= 2), got {} x and {} y",
                n,
                y.len()
            )));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Input("spline knots must be strictly increasing".into()));
        }
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior equations.
            let k = n - 2;
            let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
            let mut diag: Vec<f64> = (0..k).map(|i| 2.0 * (h[i] + h[i + 1])).collect();
            let mut rhs: Vec<f64> = (0..k)
                .map(|i| 6.0 * ((y[i + 2] - y[i + 1]) / h[i + 1] - (y[i + 1] - y[i]) / h[i]))
                .collect();
            for i in 1..k {
                let w = h[i] / diag[i - 1];
                diag[i] -= w * h[i];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - h[i + 1] * m[i + 2]) / diag[i];
            }
        }
        Ok(Self {
            x: x.to_vec(),
            y: y.to_vec(),
            m,
        })
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.x[0], self.x[self.x.len() - 1])
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        let (lo, hi) = self.domain();
        if !(t >= lo && t <= hi) {
            return Err(Error::Range(format!("t = {t} outside spline domain [{lo}, {hi}]")));
        }
        let i = match self.x.partition_point(|&k| k <= t) {
            0 => 0,
            p => (p - 1).min(self.x.len() - 2),
        };
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        Ok(a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0)
    }
}

/// Evaluates the natural spline through `(times, samples)` at `targets`.
pub fn cubic_spline_resample(times: &[f64], samples: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    let s = CubicSpline::new(times, samples)?;
    targets.iter().map(|&t| s.eval(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn knots_are_reproduced() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 / 30.0).collect();
        let y: Vec<f64> = x.iter().map(|t| (7.0 * t).sin() + t * t).collect();
        assert_eq!(cubic_spline_resample(&x, &y, &x).unwrap(), y);
    }

    #[test]
    fn linear_data_is_exact() {
        let x = [0.0, 0.5, 1.7, 2.0, 3.1];
        let y: Vec<f64> = x.iter().map(|t| 3.0 * t - 1.0).collect();
        for t in [0.0, 0.1, 0.9, 1.99, 3.1] {
            let v = cubic_spline_resample(&x, &y, &[t]).unwrap()[0];
            assert!((v - (3.0 * t - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn sine_upsampling_error() {
        let x: Vec<f64> = (0..300).map(|i| i as f64 / 30.0).collect();
        let y: Vec<f64> = x.iter().map(|t| (2.0 * PI * 1.5 * t).sin()).collect();
        let targets: Vec<f64> = (0..598).map(|i| i as f64 / 60.0).collect();
        let v = cubic_spline_resample(&x, &y, &targets).unwrap();
        let interior = 60..538;
        let err = interior
            .map(|i| (v[i] - (2.0 * PI * 1.5 * targets[i]).sin()).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn extrapolation_is_a_range_error() {
        let x = [0.0, 1.0, 2.0];
        let y = [0.0, 1.0, 0.0];
        assert!(matches!(cubic_spline_resample(&x, &y, &[2.5]), Err(Error::Range(_))));
        assert!(matches!(cubic_spline_resample(&x, &y, &[-0.1]), Err(Error::Range(_))));
    }
}
