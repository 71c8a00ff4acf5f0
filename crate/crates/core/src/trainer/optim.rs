//! AdamW with decoupled weight decay and the cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `lr_min + (lr_max - lr_min) (1 + cos(pi t / total)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let frac = step.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * frac).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub hyper: AdamWParams,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    /// Number of completed updates.
    pub t: u64,
}

impl AdamW {
    pub fn new(hyper: AdamWParams, sizes: &[usize]) -> Self {
        Self {
            hyper,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update. `decay[i]` selects decoupled decay for tensor `i`;
    /// `names` label diagnostics.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<f32>],
        grads: &[Tensor<f32>],
        decay: &[bool],
        names: &[String],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() || decay.len() != params.len() {
            return Err(Error::Dimension(format!(
                "optimizer holds {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != self.m[i].len() || params[i].len() != g.len() {
                return Err(Error::Dimension(format!("gradient size mismatch for {}", names[i])));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    component: format!("gradient of {}", names[i]),
                });
            }
        }
        let (b1, b2) = self.hyper.betas;
        let t = self.t + 1;
        let c1 = 1.0 - b1.powf(t as f64);
        let c2 = 1.0 - b2.powf(t as f64);
        let shrink = 1.0 - lr * self.hyper.weight_decay;
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, &g), (mi, vi)) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut().zip(v.iter_mut())) {
                let g = g as f64;
                let m_new = b1 * *mi as f64 + (1.0 - b1) * g;
                let v_new = b2 * *vi as f64 + (1.0 - b2) * g * g;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let mut x = *w as f64;
                if decay[i] {
                    x *= shrink;
                }
                x -= lr * (m_new / c1) / ((v_new / c2).sqrt() + self.hyper.eps);
                *w = x as f32;
            }
        }
        self.t = t;
        Ok(())
    }
}
