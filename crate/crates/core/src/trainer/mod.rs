//! Epoch loop: seeded shuffling and flips, one weight sample per batch,
//! total loss, backward, AdamW on a per-step cosine schedule.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointMeta, TensorEntry, MAGIC, VERSION};
pub use optim::{cosine_lr, AdamW, AdamWParams};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::bayes::kl_gradient;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig};
use crate::network::{stack_clips, ConvLayer, PassMode, RfBayesPhysNet};
use crate::rng::{purpose, stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    /// Random horizontal flips.
    pub flip: bool,
    /// Set from the `loss` section of a run config.
    #[serde(skip)]
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            lr_min: 0.0,
            weight_decay: 5e-5,
            batch_size: 4,
            epochs: 50,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            flip: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..=self.lr).contains(&self.lr_min) {
            return Err(Error::Config(format!(
                "need lr > 0 and 0 <= lr_min <= lr (got {}, {})",
                self.lr, self.lr_min
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and adam_eps be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        self.loss.validate()
    }
}

/// A training clip `[C, T, H, W]` with its aligned pulse.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub clip: Tensor<f32>,
    pub bvp: Vec<f32>,
}

/// Means over one epoch's steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: u64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub loss: f64,
    pub pearson_term: f64,
    pub snr_term: f64,
    pub kl_term: f64,
}

pub const METRICS_HEADER: &str = "epoch,step,lr,loss,pearson_term,snr_term,kl_term";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.step, r.lr, r.loss, r.pearson_term, r.snr_term, r.kl_term
        );
    }
    s
}

/// Mirrors a clip `[C, T, H, W]` along its width.
pub fn flip_horizontal(clip: &Tensor<f32>) -> Tensor<f32> {
    let w = *clip.shape().last().expect("non-empty shape");
    let mut out = clip.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Training state: network, optimizer and progress counters.
pub struct Trainer {
    pub net: RfBayesPhysNet,
    pub cfg: TrainConfig,
    pub opt: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(net: RfBayesPhysNet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let sizes: Vec<usize> = net.params().iter().map(|(_, _, t)| t.len()).collect();
        let opt = AdamW::new(
            AdamWParams {
                betas: cfg.betas,
                eps: cfg.adam_eps,
                weight_decay: cfg.weight_decay,
            },
            &sizes,
        );
        Ok(Self {
            net,
            cfg,
            opt,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Restores a trainer; `cfg` may extend `epochs` beyond the stored run.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: Option<TrainConfig>) -> Result<Self> {
        let net = ckpt.network()?;
        let mut stored = ckpt.meta.train.clone();
        stored.loss = ckpt.meta.loss;
        let cfg = cfg.unwrap_or(stored);
        let mut t = Self::new(net, cfg)?;
        let names: Vec<String> = t.net.params().into_iter().map(|(n, _, _)| n).collect();
        for (i, name) in names.iter().enumerate() {
            for (slot, tag) in [(&mut t.opt.m[i], "adam_m"), (&mut t.opt.v[i], "adam_v")] {
                let key = format!("{name}.{tag}");
                let pos = ckpt
                    .meta
                    .tensors
                    .iter()
                    .position(|e| e.name == key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                if ckpt.data[pos].len() != slot.len() {
                    return Err(Error::Checkpoint(format!("{key} has the wrong size")));
                }
                slot.copy_from_slice(&ckpt.data[pos]);
            }
        }
        t.opt.t = ckpt.meta.step;
        t.epoch = ckpt.meta.epoch;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut entries = checkpoint::network_state(&self.net);
        let names: Vec<String> = self.net.params().into_iter().map(|(n, _, _)| n).collect();
        for (i, name) in names.iter().enumerate() {
            entries.push((format!("{name}.adam_m"), self.opt.m[i].clone()));
            entries.push((format!("{name}.adam_v"), self.opt.v[i].clone()));
        }
        let (tensors, data) = entries
            .into_iter()
            .map(|(name, d)| (TensorEntry { name, len: d.len() }, d))
            .unzip();
        Checkpoint {
            meta: CheckpointMeta {
                net: self.net.config().clone(),
                train: self.cfg.clone(),
                loss: self.cfg.loss,
                epoch: self.epoch,
                step: self.opt.t,
                seed: self.cfg.seed,
                tensors,
            },
            data,
        }
    }

    fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.batch_size)
    }

    /// Runs the next epoch. Parameters change only if every step succeeds
    /// up to the failing one; the caller keeps the previous checkpoint.
    pub fn train_epoch(&mut self, data: &[TrainSample]) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let epoch = self.epoch;
        let m = self.batches_per_epoch(data.len());
        let total_steps = self.cfg.epochs * m;
        let kl_factor = self.cfg.loss.kl_factor(m);
        let mut rng = stream(self.cfg.seed, &[purpose::EPOCH, epoch as u64]);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let flips: Vec<bool> = order.iter().map(|_| self.cfg.flip && rng.random_bool(0.5)).collect();

        let (mut loss, mut pear, mut snr, mut klt, mut lr) = (0.0, 0.0, 0.0, 0.0, self.cfg.lr);
        for b in 0..m {
            let idx = &order[b * self.cfg.batch_size..((b + 1) * self.cfg.batch_size).min(order.len())];
            let clips: Vec<Tensor<f32>> = idx
                .iter()
                .zip(&flips[b * self.cfg.batch_size..])
                .map(|(&i, &f)| if f { flip_horizontal(&data[i].clip) } else { data[i].clip.clone() })
                .collect();
            let batch = stack_clips(&clips.iter().collect::<Vec<_>>())?;
            let t_len = data[idx[0]].bvp.len();
            let mut target = Vec::with_capacity(idx.len() * t_len);
            for &i in idx {
                if data[i].bvp.len() != t_len {
                    return Err(Error::Dimension("pulse traces in a batch differ in length".into()));
                }
                target.extend_from_slice(&data[i].bvp);
            }
            let target = Tensor::new([idx.len(), t_len], target)?;

            let step = self.opt.t as usize;
            lr = cosine_lr(step, total_steps, self.cfg.lr, self.cfg.lr_min);
            let mut wrng = stream(self.cfg.seed, &[purpose::EPOCH, epoch as u64, 1 + b as u64]);
            let out = self.step(&batch, &target, kl_factor, lr, &mut wrng)?;
            loss += out.0;
            pear += out.1;
            snr += out.2;
            klt += out.3;
        }
        self.epoch += 1;
        let mf = m as f64;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            step: self.opt.t,
            lr,
            loss: loss / mf,
            pearson_term: pear / mf,
            snr_term: snr / mf,
            kl_term: klt / mf,
        };
        log::info!(
            "epoch {} loss {:.4} pearson {:.4} snr {:.3} kl {:.4} lr {:.3e}",
            metrics.epoch,
            metrics.loss,
            metrics.pearson_term,
            metrics.snr_term,
            metrics.kl_term,
            lr
        );
        self.history.push(metrics);
        Ok(metrics)
    }

    /// One optimization step; returns (loss, pearson, snr, kl_term).
    fn step<R: Rng>(
        &mut self,
        batch: &Tensor<f32>,
        target: &Tensor<f32>,
        kl_factor: f64,
        lr: f64,
        rng: &mut R,
    ) -> Result<(f64, f64, f64, f64)> {
        let mut g = Graph::new();
        let (pred, vars) = self.net.record_train(&mut g, batch, PassMode::TRAIN, rng)?;
        let kl = self.net.kl();
        let lb = total_loss(g.value(pred), target, kl, kl_factor, &self.cfg.loss)?;
        if !lb.total.is_finite() {
            return Err(Error::NonFinite {
                component: "training loss".into(),
            });
        }
        let mut grads = g.backward(pred, lb.grad)?;

        let params = self.net.params();
        let mut gvec: Vec<Tensor<f32>> = params
            .iter()
            .zip(&vars.vars)
            .map(|((_, _, t), v)| {
                v.and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect();
        let names: Vec<String> = params.iter().map(|(n, _, _)| n.clone()).collect();
        let decay: Vec<bool> = params.iter().map(|(_, r, _)| r.decays()).collect();
        drop(params);

        let scale = (self.cfg.loss.beta * kl_factor) as f32;
        if scale != 0.0 {
            let mut i = 0;
            for c in self.net.convs() {
                match &c.layer {
                    ConvLayer::Deterministic(_) => i += 2,
                    ConvLayer::Bayesian(b) => {
                        if !b.frozen {
                            for (vp, off) in [(&b.weight, 0), (&b.bias, 2)] {
                                let (dmu, drho) = kl_gradient(vp.mu.data(), vp.rho.data(), &b.prior);
                                for (gm, d) in gvec[i + off].data_mut().iter_mut().zip(dmu) {
                                    *gm += scale * d;
                                }
                                for (gr, d) in gvec[i + off + 1].data_mut().iter_mut().zip(drho) {
                                    *gr += scale * d;
                                }
                            }
                        }
                        i += 4;
                    }
                }
            }
        }
        let mut ps = self.net.params_mut();
        self.opt.step(&mut ps, &gvec, &decay, &names, lr)?;
        Ok((lb.total, lb.pearson, lb.snr, lb.kl_term))
    }

    /// Trains until `cfg.epochs`, checkpointing after every epoch when
    /// `ckpt_path` is given and writing the metrics CSV alongside.
    pub fn run(&mut self, data: &[TrainSample], ckpt_path: Option<&Path>, metrics_path: Option<&Path>) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            self.train_epoch(data)?;
            if let Some(p) = ckpt_path {
                self.checkpoint().save(p)?;
            }
            if let Some(p) = metrics_path {
                append_metrics(p, self.history.last().expect("epoch just ran"))?;
            }
        }
        Ok(())
    }
}

/// Appends one row, creating the file with its header when needed.
pub fn append_metrics(path: &Path, row: &EpochMetrics) -> Result<()> {
    use std::io::Write as _;
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(METRICS_HEADER);
        text.push('\n');
    }
    let body = metrics_csv(std::slice::from_ref(row));
    text.push_str(body.lines().nth(1).expect("one row"));
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, NetConfig};

    fn tiny_net() -> RfBayesPhysNet {
        build_network(&NetConfig {
            input_shape: [3, 16, 16, 16],
            stem_channels: 4,
            diff_channels: 4,
            encoder_channels: vec![6, 8],
            decoder_channels: vec![6, 4],
            ..NetConfig::default()
        })
        .unwrap()
    }

    fn tiny_data(n: usize) -> Vec<TrainSample> {
        (0..n)
            .map(|k| {
                let bvp: Vec<f32> = (0..16).map(|t| ((t as f32) * 0.9 + k as f32).sin()).collect();
                let clip = Tensor::from_fn([3, 16, 16, 16], |i| {
                    let t = (i / 256) % 16;
                    0.5 + 0.02 * bvp[t] + 0.01 * ((i * 31 % 17) as f32 / 17.0)
                });
                TrainSample { clip, bvp }
            })
            .collect()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn flip_reverses_width_only() {
        let c = Tensor::from_fn([1, 1, 2, 3], |i| i as f32);
        assert_eq!(flip_horizontal(&c).data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        assert_eq!(flip_horizontal(&flip_horizontal(&c)), c);
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let data = tiny_data(3);
        let run = || {
            let mut t = Trainer::new(tiny_net(), cfg(2)).unwrap();
            t.run(&data, None, None).unwrap();
            t.checkpoint().to_bytes().unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let data = tiny_data(3);
        let mut full = Trainer::new(tiny_net(), cfg(3)).unwrap();
        full.run(&data, None, None).unwrap();

        let mut first = Trainer::new(tiny_net(), cfg(3)).unwrap();
        first.train_epoch(&data).unwrap();
        let bytes = first.checkpoint().to_bytes().unwrap();
        let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap(), None).unwrap();
        assert_eq!(resumed.epoch, 1);
        resumed.run(&data, None, None).unwrap();
        assert_eq!(resumed.checkpoint().data, full.checkpoint().data);
    }

    #[test]
    fn step_count_and_lr_schedule() {
        let data = tiny_data(3);
        let mut t = Trainer::new(tiny_net(), cfg(2)).unwrap();
        let a = t.train_epoch(&data).unwrap();
        let b = t.train_epoch(&data).unwrap();
        assert_eq!((a.step, b.step), (2, 4));
        assert!(b.lr < a.lr);
        assert!(a.loss.is_finite() && a.kl_term > 0.0);
    }

    #[test]
    fn zero_gradients_decay_geometrically() {
        let mut t = Trainer::new(tiny_net(), TrainConfig {
            weight_decay: 0.1,
            ..cfg(1)
        })
        .unwrap();
        let before: Vec<f32> = t.net.params()[0].2.data().to_vec();
        let zeros: Vec<Tensor<f32>> = t.net.params().iter().map(|(_, _, p)| Tensor::zeros(p.shape().to_vec())).collect();
        let names: Vec<String> = t.net.params().iter().map(|(n, _, _)| n.clone()).collect();
        let decay: Vec<bool> = t.net.params().iter().map(|(_, r, _)| r.decays()).collect();
        for _ in 0..3 {
            let mut ps = t.net.params_mut();
            t.opt.step(&mut ps, &zeros, &decay, &names, 0.01).unwrap();
        }
        let after = t.net.params()[0].2.data().to_vec();
        let f = (1.0f64 - 0.01 * 0.1).powi(3);
        for (a, b) in after.iter().zip(&before) {
            assert!((*a as f64 - *b as f64 * f).abs() < 1e-6);
        }
    }

    #[test]
    fn metrics_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let row = EpochMetrics {
            epoch: 1,
            step: 4,
            lr: 1e-4,
            loss: 0.5,
            pearson_term: 0.6,
            snr_term: 2.0,
            kl_term: 0.1,
        };
        append_metrics(&p, &row).unwrap();
        append_metrics(&p, &row).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "1,4,0.0001,0.5,0.6,2,0.1");
    }
}
