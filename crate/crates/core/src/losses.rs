//! Training objective: negative Pearson, SNR reward and scaled KL.
//!
//! All terms take `[N, T]` prediction/target tensors and return the value
//! together with its gradient with respect to the prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Lower bound on the prediction variance in the Pearson denominator.
pub const PEARSON_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the SNR reward.
    pub lambda: f64,
    /// Weight of the KL regularizer.
    pub beta: f64,
    /// Multiplier on the model KL; `None` means `1 / batches_per_epoch`.
    pub kl_normalization: Option<f64>,
    pub snr_clip_db: f64,
    pub snr_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            beta: 1.0,
            kl_normalization: None,
            snr_clip_db: 20.0,
            snr_eps: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.lambda) || !finite_nonneg(self.beta) {
            return Err(Error::Config(format!(
                "loss.lambda and loss.beta must be finite and >= 0 (got {}, {})",
                self.lambda, self.beta
            )));
        }
        if let Some(k) = self.kl_normalization {
            if !finite_nonneg(k) {
                return Err(Error::Config(format!("loss.kl_normalization must be finite and >= 0, got {k}")));
            }
        }
        if !(self.snr_eps > 0.0) || !(self.snr_clip_db > 0.0) {
            return Err(Error::Config("loss.snr_eps and loss.snr_clip_db must be > 0".into()));
        }
        Ok(())
    }

    /// KL multiplier for an epoch of `batches` minibatches.
    pub fn kl_factor(&self, batches: usize) -> f64 {
        self.kl_normalization.unwrap_or(1.0 / batches.max(1) as f64)
    }
}

/// A loss value and its gradient with respect to the prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Term<F> {
    pub value: f64,
    pub grad: Tensor<F>,
}

fn rows<F: Scalar>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<(usize, usize)> {
    if pred.shape() != target.shape() || pred.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "loss expects matching [N, T] tensors, got {:?} and {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (n, t) = (pred.shape()[0], pred.shape()[1]);
    if n == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    Ok((n, t))
}

fn centered<F: Scalar>(x: &[F]) -> Vec<f64> {
    let m = x.iter().map(|v| v.as_f64()).sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v.as_f64() - m).collect()
}

/// Mean of `1 - r_i` over the batch. Samples with a constant target
/// contribute 1 with zero gradient and are reported in `flagged`.
pub fn pearson_loss<F: Scalar>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<(Term<F>, Vec<usize>)> {
    let (n, t) = rows(pred, target)?;
    if t < 2 {
        return Err(Error::Input(format!("pearson loss needs T >= 2, got {t}")));
    }
    let mut grad = vec![F::zero(); n * t];
    let mut total = 0.0;
    let mut flagged = Vec::new();
    for i in 0..n {
        let p = centered(&pred.data()[i * t..(i + 1) * t]);
        let y = centered(&target.data()[i * t..(i + 1) * t]);
        let a: f64 = p.iter().zip(&y).map(|(p, y)| p * y).sum();
        let raw: f64 = p.iter().map(|p| p * p).sum();
        let floored = raw < PEARSON_EPS;
        let b = raw.max(PEARSON_EPS);
        let c: f64 = y.iter().map(|y| y * y).sum();
        if c <= f64::EPSILON * t as f64 {
            log::warn!("pearson loss: sample {i} has a constant target");
            flagged.push(i);
            total += 1.0;
            continue;
        }
        let s = (b * c).sqrt();
        let r = a / s;
        total += 1.0 - r;
        // centering is absorbed: sum(y) = sum(p) = 0
        for (j, g) in grad[i * t..(i + 1) * t].iter_mut().enumerate() {
            let dr = if floored { y[j] / s } else { y[j] / s - r * p[j] / b };
            *g = F::from_f64_lossy(-dr / n as f64);
        }
    }
    Ok((
        Term {
            value: total / n as f64,
            grad: Tensor::new(pred.shape().to_vec(), grad)?,
        },
        flagged,
    ))
}

/// Mean clipped SNR in dB of the prediction against the target.
pub fn snr_term<F: Scalar>(pred: &Tensor<F>, target: &Tensor<F>, cfg: &LossConfig) -> Result<Term<F>> {
    let (n, t) = rows(pred, target)?;
    let k = 10.0 / std::f64::consts::LN_10;
    let mut grad = vec![F::zero(); n * t];
    let mut total = 0.0;
    for i in 0..n {
        let p = &pred.data()[i * t..(i + 1) * t];
        let y = &target.data()[i * t..(i + 1) * t];
        let sig: f64 = p.iter().map(|v| v.as_f64().powi(2)).sum();
        let noise: f64 = p.iter().zip(y).map(|(p, y)| (p.as_f64() - y.as_f64()).powi(2)).sum::<f64>() + cfg.snr_eps;
        if sig == 0.0 {
            total -= cfg.snr_clip_db;
            continue;
        }
        let db = k * (sig / noise).ln();
        if db.abs() >= cfg.snr_clip_db {
            total += db.signum() * cfg.snr_clip_db;
            continue;
        }
        total += db;
        for (j, g) in grad[i * t..(i + 1) * t].iter_mut().enumerate() {
            let (pj, yj) = (p[j].as_f64(), y[j].as_f64());
            *g = F::from_f64_lossy(k * (2.0 * pj / sig - 2.0 * (pj - yj) / noise) / n as f64);
        }
    }
    Ok(Term {
        value: total / n as f64,
        grad: Tensor::new(pred.shape().to_vec(), grad)?,
    })
}

/// Components of one evaluation of the total loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown<F> {
    pub total: f64,
    pub pearson: f64,
    pub snr: f64,
    /// Contribution of the regularizer, `beta * kl_factor * kl`.
    pub kl_term: f64,
    /// Gradient of `total` with respect to the prediction.
    pub grad: Tensor<F>,
    /// Batch rows whose target was constant.
    pub flagged: Vec<usize>,
}

/// `pearson - lambda * snr + beta * kl_factor * kl`.
pub fn total_loss<F: Scalar>(
    pred: &Tensor<F>,
    target: &Tensor<F>,
    kl: f64,
    kl_factor: f64,
    cfg: &LossConfig,
) -> Result<LossBreakdown<F>> {
    if !(kl >= 0.0) {
        return Err(Error::NonFinite {
            component: format!("kl (value {kl})"),
        });
    }
    let (pearson, flagged) = pearson_loss(pred, target)?;
    let snr = snr_term(pred, target, cfg)?;
    let kl_term = cfg.beta * kl_factor * kl;
    for (name, v) in [("pearson", pearson.value), ("snr", snr.value), ("kl", kl_term)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { component: name.into() });
        }
    }
    let lam = F::from_f64_lossy(cfg.lambda);
    let mut grad = pearson.grad;
    for (g, s) in grad.data_mut().iter_mut().zip(snr.grad.data()) {
        *g = *g - lam * *s;
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite {
            component: "loss gradient".into(),
        });
    }
    Ok(LossBreakdown {
        total: pearson.value - cfg.lambda * snr.value + kl_term,
        pearson: pearson.value,
        snr: snr.value,
        kl_term,
        grad,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(n: usize, t: usize, phase: f64) -> Tensor<f64> {
        Tensor::from_fn([n, t], |i| {
            let (r, j) = (i / t, i % t);
            (0.3 * j as f64 + phase + r as f64).sin()
        })
    }

    #[test]
    fn pearson_examples() {
        let y = wave(2, 64, 0.0);
        let l = |p: &Tensor<f64>| pearson_loss(p, &y).unwrap().0.value;
        assert!(l(&y).abs() < 1e-9);
        assert!((l(&y.map(|v| -v)) - 2.0).abs() < 1e-9);
        assert!(l(&y.map(|v| 2.0 * v + 3.0)).abs() < 1e-9);
    }

    #[test]
    fn constant_target_is_flagged() {
        let y = Tensor::from_fn([2, 8], |i| if i < 8 { 1.0 } else { (i as f64).sin() });
        let p = wave(2, 8, 0.4);
        let (term, flagged) = pearson_loss(&p, &y).unwrap();
        assert_eq!(flagged, vec![0]);
        assert!(term.grad.data()[..8].iter().all(|&g| g == 0.0));
        assert!(term.value >= 0.5);
    }

    #[test]
    fn constant_prediction_is_finite() {
        let y = wave(1, 16, 0.0);
        let p = Tensor::full([1, 16], 0.3);
        let (term, _) = pearson_loss(&p, &y).unwrap();
        assert!((term.value - 1.0).abs() < 1e-12 && term.grad.all_finite());
    }

    #[test]
    fn snr_examples() {
        let cfg = LossConfig::default();
        let y = wave(1, 128, 0.0);
        assert_eq!(snr_term(&y, &y, &cfg).unwrap().value, 20.0);
        let twice = snr_term(&y.map(|v| 2.0 * v), &y, &cfg).unwrap().value;
        assert!((twice - 10.0 * 4f64.log10()).abs() < 1e-6);
        // orthogonal with equal norm: cos vs sin over full periods
        let t = 100;
        let cos = Tensor::from_fn([1, t], |j| (2.0 * std::f64::consts::PI * 5.0 * j as f64 / t as f64).cos());
        let sin = Tensor::from_fn([1, t], |j| (2.0 * std::f64::consts::PI * 5.0 * j as f64 / t as f64).sin());
        let orth = snr_term(&cos, &sin, &cfg).unwrap().value;
        assert!((orth + 10.0 * 2f64.log10()).abs() < 1e-6);
    }

    #[test]
    fn total_loss_composition() {
        let y = wave(2, 32, 0.0);
        let p = wave(2, 32, 0.7);
        let plain = LossConfig {
            lambda: 0.0,
            beta: 0.0,
            ..LossConfig::default()
        };
        let b = total_loss(&p, &y, 3.0, 1.0, &plain).unwrap();
        assert_eq!(b.total, pearson_loss(&p, &y).unwrap().0.value);

        let snr_only = LossConfig {
            lambda: 0.1,
            beta: 0.0,
            ..LossConfig::default()
        };
        assert!((total_loss(&y, &y, 0.0, 1.0, &snr_only).unwrap().total + 2.0).abs() < 1e-9);

        let kl_only = LossConfig {
            lambda: 0.0,
            beta: 1.0,
            ..LossConfig::default()
        };
        let with_kl = total_loss(&p, &y, 5.0, kl_only.kl_factor(10), &kl_only).unwrap();
        assert!((with_kl.kl_term - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_finite_components_are_named() {
        let y = wave(1, 8, 0.0);
        let mut p = y.clone();
        p.data_mut()[3] = f64::NAN;
        let err = total_loss(&p, &y, 0.0, 1.0, &LossConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        let err = total_loss(&y, &y, f64::INFINITY, 1.0, &LossConfig::default()).unwrap_err();
        assert!(err.to_string().contains("kl"), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            lambda: -1.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            snr_eps: 0.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
