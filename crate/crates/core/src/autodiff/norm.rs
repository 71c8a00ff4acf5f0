//! Per-channel batch normalization over (N, T, H, W).

use serde::{Deserialize, Serialize};

use crate::tensor::Scalar;

/// Whether batch statistics or the running estimates are used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running mean/variance estimates of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<F = f32> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
    pub momentum: F,
}

impl<F: Scalar> RunningStats<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
            momentum: F::from_f64_lossy(0.1),
        }
    }
}

pub(crate) struct BnSaved<F> {
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
}

/// Forward pass. In train mode `stats` is updated with the batch moments
/// (unbiased variance for the running estimate).
pub(crate) fn batch_norm_forward<F: Scalar>(
    x: &[F],
    batch: usize,
    channels: usize,
    plane: usize,
    gamma: &[F],
    beta: &[F],
    eps: F,
    mode: NormMode,
    stats: &mut RunningStats<F>,
) -> (Vec<F>, BnSaved<F>) {
    let m = batch * plane;
    let mf = F::from_usize(m).unwrap_or_else(F::one);
    let (mean, var) = match mode {
        NormMode::Train => {
            let mut mean = vec![F::zero(); channels];
            let mut var = vec![F::zero(); channels];
            for c in 0..channels {
                let mut s = F::zero();
                for n in 0..batch {
                    let off = (n * channels + c) * plane;
                    s = s + x[off..off + plane].iter().copied().sum::<F>();
                }
                let mu = s / mf;
                let mut ss = F::zero();
                for n in 0..batch {
                    let off = (n * channels + c) * plane;
                    ss = ss
                        + x[off..off + plane]
                            .iter()
                            .map(|&v| (v - mu) * (v - mu))
                            .sum::<F>();
                }
                mean[c] = mu;
                var[c] = ss / mf;
            }
            let mom = stats.momentum;
            let unbias = if m > 1 {
                mf / (mf - F::one())
            } else {
                F::one()
            };
            for c in 0..channels {
                stats.mean[c] = (F::one() - mom) * stats.mean[c] + mom * mean[c];
                stats.var[c] = (F::one() - mom) * stats.var[c] + mom * var[c] * unbias;
            }
            (mean, var)
        }
        NormMode::Eval => (stats.mean.clone(), stats.var.clone()),
    };
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * plane;
            for i in off..off + plane {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, BnSaved { xhat, inv_std })
}

pub(crate) struct BnGrads<F> {
    pub input: Vec<F>,
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
}

pub(crate) fn batch_norm_backward<F: Scalar>(
    dout: &[F],
    saved: &BnSaved<F>,
    batch: usize,
    channels: usize,
    plane: usize,
    gamma: &[F],
    mode: NormMode,
) -> BnGrads<F> {
    let mf = F::from_usize(batch * plane).unwrap_or_else(F::one);
    let mut dgamma = vec![F::zero(); channels];
    let mut dbeta = vec![F::zero(); channels];
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * plane;
            for i in off..off + plane {
                dbeta[c] = dbeta[c] + dout[i];
                dgamma[c] = dgamma[c] + dout[i] * saved.xhat[i];
            }
        }
    }
    let mut dx = vec![F::zero(); dout.len()];
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * plane;
            let scale = gamma[c] * saved.inv_std[c];
            match mode {
                NormMode::Train => {
                    for i in off..off + plane {
                        dx[i] = scale / mf * (mf * dout[i] - dbeta[c] - saved.xhat[i] * dgamma[c]);
                    }
                }
                NormMode::Eval => {
                    for i in off..off + plane {
                        dx[i] = scale * dout[i];
                    }
                }
            }
        }
    }
    BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}
