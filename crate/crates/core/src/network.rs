//! Dual-branch 3-D encoder/decoder producing one pulse waveform per clip.
//!
//! Data flow for a `[N, 3, T, H, W]` clip:
//!
//! ```text
//! clip ──► stem.conv ─ bn ─ elu ─ pool ──────────────┐
//!   └─► frame diff ─► diff.conv ─ bn ─ elu ─ pool    ├─ concat ─► enc1 … encK ─► dec1 … decK ─► head ─► spatial mean ─► [N, T]
//!                      └─ diff.block1 … (residual) ──┘
//! ```
//!
//! Each encoder stage spatially pools, then convolves with a temporal stride;
//! each decoder stage undoes one temporal stride with a transposed conv.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvSpec, Graph, NormMode, RunningStats, Var};
use crate::bayes::{BayesConv3d, PriorSpec, VariationalParameter, WeightMode};
use crate::error::{Error, Result};
use crate::rng::{normal_vec_f32, purpose, stream};
use crate::tensor::Tensor;

/// Architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// `(C, T, H, W)` of one clip.
    pub input_shape: [usize; 4],
    pub stem_channels: usize,
    /// Stride of the stem and diff-branch input convolutions.
    pub stem_stride: [usize; 3],
    /// Max-pool window (= stride) closing both front branches.
    pub stem_pool: [usize; 3],
    pub diff_channels: usize,
    pub diff_blocks: usize,
    /// Output channels of each encoder stage.
    pub encoder_channels: Vec<usize>,
    /// Max-pool window (= stride) opening each encoder stage.
    pub encoder_pool: [usize; 3],
    /// Output channels of each decoder stage.
    pub decoder_channels: Vec<usize>,
    /// Temporal upsampling factor of each decoder stage; encoder stage `i`
    /// downsamples by the mirrored entry.
    pub decoder_strides: Vec<usize>,
    pub kernel: [usize; 3],
    pub bayesian_layers: BTreeSet<String>,
    pub prior: PriorSpec,
    /// Initial posterior standard deviation of Bayesian weights.
    pub init_sigma: f64,
    pub elu_alpha: f32,
    pub bn_eps: f32,
    pub bn_momentum: f32,
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_shape: [3, 128, 32, 32],
            stem_channels: 16,
            stem_stride: [1, 2, 2],
            stem_pool: [1, 2, 2],
            diff_channels: 16,
            diff_blocks: 2,
            encoder_channels: vec![32, 64],
            encoder_pool: [1, 2, 2],
            decoder_channels: vec![32, 16],
            decoder_strides: vec![2, 2],
            kernel: [3, 3, 3],
            bayesian_layers: ["enc2.conv", "dec1.tconv", "dec2.tconv", "head"]
                .into_iter()
                .map(String::from)
                .collect(),
            prior: PriorSpec::default(),
            init_sigma: 0.05,
            elu_alpha: 1.0,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            init_seed: 0,
        }
    }
}

impl NetConfig {
    /// Names of every convolution, in forward order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = vec!["stem.conv".to_string(), "diff.conv".to_string()];
        names.extend((1..=self.diff_blocks).map(|i| format!("diff.block{i}.conv")));
        names.extend((1..=self.encoder_channels.len()).map(|i| format!("enc{i}.conv")));
        names.extend((1..=self.decoder_channels.len()).map(|i| format!("dec{i}.tconv")));
        names.push("head".into());
        names
    }

    /// Same architecture with every (or no) layer Bayesian.
    pub fn with_all_bayesian(mut self, bayesian: bool) -> Self {
        self.bayesian_layers = if bayesian {
            self.layer_names().into_iter().collect()
        } else {
            BTreeSet::new()
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        let names = self.layer_names();
        if let Some(bad) = self.bayesian_layers.iter().find(|n| !names.contains(n)) {
            return Err(Error::Config(format!(
                "bayesian_layers: unknown layer {bad:?} (known: {})",
                names.join(", ")
            )));
        }
        let stages = self.encoder_channels.len();
        if self.decoder_channels.len() != stages || self.decoder_strides.len() != stages {
            return Err(Error::Config(format!(
                "encoder has {stages} stages but decoder_channels has {} and decoder_strides {}",
                self.decoder_channels.len(),
                self.decoder_strides.len()
            )));
        }
        if let Some(s) = self.decoder_strides.iter().find(|&&s| s == 0 || (s > 1 && s % 2 == 1)) {
            return Err(Error::Config(format!("decoder stride {s} must be 1 or even")));
        }
        if self.input_shape[0] == 0 || [self.stem_channels, self.diff_channels].contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let t = self.input_shape[1];
        let factor: usize = self.decoder_strides.iter().product();
        if t % factor != 0 {
            return Err(Error::Config(format!(
                "T = {t} is not divisible by the total temporal stride {factor}"
            )));
        }
        self.prior.validate()?;
        if !(self.init_sigma > 0.0) {
            return Err(Error::Config("init_sigma must be > 0".into()));
        }
        self.shape_plan().map(|_| ())
    }

    /// Spatio-temporal extents after the front branches and each encoder stage.
    fn shape_plan(&self) -> Result<Vec<[usize; 3]>> {
        let [_, t, h, w] = self.input_shape;
        let front_spec = ConvSpec::same(self.kernel, self.stem_stride);
        let mut ext = front_spec.conv_output([t, h, w], self.kernel)?;
        ext = pool_extent(ext, self.stem_pool)?;
        let mut plan = vec![ext];
        for &s in self.decoder_strides.iter().rev() {
            ext = pool_extent(ext, self.encoder_pool)?;
            ext = ConvSpec::same(self.kernel, [s, 1, 1]).conv_output(ext, self.kernel)?;
            plan.push(ext);
        }
        for &s in &self.decoder_strides {
            let (k, spec) = tconv_geometry(s);
            ext = spec.transpose_output(ext, k)?;
        }
        if ext[0] != t {
            return Err(Error::Config(format!(
                "decoder restores T = {} instead of {t}; check strides against the frame count",
                ext[0]
            )));
        }
        Ok(plan)
    }
}

fn pool_extent(ext: [usize; 3], pool: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for d in 0..3 {
        if pool[d] == 0 || pool[d] > ext[d] {
            return Err(Error::Config(format!("pool {pool:?} does not fit extents {ext:?}")));
        }
        out[d] = ext[d] / pool[d];
    }
    Ok(out)
}

/// Kernel and padding of a decoder stage with temporal stride `s`:
/// output length is exactly `s * input length`.
fn tconv_geometry(s: usize) -> ([usize; 3], ConvSpec) {
    if s == 1 {
        ([3, 1, 1], ConvSpec::new([1, 1, 1], [1, 0, 0]))
    } else {
        ([2 * s, 1, 1], ConvSpec::new([s, 1, 1], [s / 2, 0, 0]))
    }
}

/// A deterministic convolution (or transposed convolution).
#[derive(Clone, Debug, PartialEq)]
pub struct DetConv {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub spec: ConvSpec,
    pub transposed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConvLayer {
    Deterministic(DetConv),
    Bayesian(BayesConv3d),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedConv {
    pub name: String,
    pub layer: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer {
    pub name: String,
    pub gamma: Tensor<f32>,
    pub beta: Tensor<f32>,
    pub stats: RunningStats<f32>,
}

/// How optimization treats a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Deterministic conv weight or bias.
    Weight,
    /// Posterior mean.
    Mean,
    /// Posterior pre-softplus scale.
    Rho,
    /// Normalization scale or shift.
    Norm,
}

impl ParamRole {
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::Weight | ParamRole::Mean)
    }
}

/// Graph handles for one layer's parameters in a recorded pass.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    /// One entry per parameter tensor in [`RfBayesPhysNet::params`] order;
    /// `None` when the tensor did not take part in the pass.
    pub vars: Vec<Option<Var>>,
}

/// Mode of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PassMode {
    pub weights: WeightMode,
    pub norm: NormMode,
}

impl PassMode {
    pub const TRAIN: PassMode = PassMode {
        weights: WeightMode::Sample,
        norm: NormMode::Train,
    };
    pub const SAMPLE: PassMode = PassMode {
        weights: WeightMode::Sample,
        norm: NormMode::Eval,
    };
    pub const FROZEN: PassMode = PassMode {
        weights: WeightMode::Frozen,
        norm: NormMode::Eval,
    };
}

/// The network.
#[derive(Clone, Debug, PartialEq)]
pub struct RfBayesPhysNet {
    cfg: NetConfig,
    convs: Vec<NamedConv>,
    norms: Vec<NormLayer>,
}

/// Indices of the convs/norms making up each sequential stage.
struct Layout {
    diff_blocks: usize,
    encoders: usize,
}

impl Layout {
    // conv order: stem, diff, blocks.., enc.., dec.., head
    fn enc(&self, i: usize) -> usize {
        2 + self.diff_blocks + i
    }
    fn dec(&self, i: usize) -> usize {
        2 + self.diff_blocks + self.encoders + i
    }
    fn head(&self) -> usize {
        2 + self.diff_blocks + 2 * self.encoders
    }
    /// Stage 0 is the front (both branches + fusion); then encoders, decoders, head.
    fn stage_convs(&self, stage: usize) -> Vec<usize> {
        let e = self.encoders;
        match stage {
            0 => (0..2 + self.diff_blocks).collect(),
            s if s <= e => vec![self.enc(s - 1)],
            s if s <= 2 * e => vec![self.dec(s - 1 - e)],
            _ => vec![self.head()],
        }
    }
    fn stages(&self) -> usize {
        2 * self.encoders + 2
    }
}

/// Graph state threaded through a recorded pass.
struct Pass<'a, R> {
    g: &'a mut Graph<f32>,
    mode: PassMode,
    trainable: bool,
    rng: &'a mut R,
    stats: &'a mut [RunningStats<f32>],
    vars: Vec<Option<Var>>,
}

/// Builds a freshly initialized network.
pub fn build_network(cfg: &NetConfig) -> Result<RfBayesPhysNet> {
    RfBayesPhysNet::new(cfg.clone())
}

impl RfBayesPhysNet {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.init_seed, &[purpose::INIT]);
        let k = cfg.kernel;
        let kvol: usize = k.iter().product();
        let cin = cfg.input_shape[0];
        let front = ConvSpec::same(k, cfg.stem_stride);
        let same = ConvSpec::same(k, [1, 1, 1]);

        // (name, shape, fan_in, spec, transposed, norm channels)
        let mut plan: Vec<(String, Vec<usize>, usize, ConvSpec, bool, Option<usize>)> = vec![
            ("stem".into(), vec![cfg.stem_channels, cin, k[0], k[1], k[2]], cin * kvol, front, false, Some(cfg.stem_channels)),
            ("diff".into(), vec![cfg.diff_channels, cin, k[0], k[1], k[2]], cin * kvol, front, false, Some(cfg.diff_channels)),
        ];
        for i in 1..=cfg.diff_blocks {
            let c = cfg.diff_channels;
            plan.push((format!("diff.block{i}"), vec![c, c, k[0], k[1], k[2]], c * kvol, same, false, Some(c)));
        }
        let mut ch = cfg.stem_channels + cfg.diff_channels;
        for (i, (&out, &s)) in cfg.encoder_channels.iter().zip(cfg.decoder_strides.iter().rev()).enumerate() {
            plan.push((format!("enc{}", i + 1), vec![out, ch, k[0], k[1], k[2]], ch * kvol, ConvSpec::same(k, [s, 1, 1]), false, Some(out)));
            ch = out;
        }
        for (i, (&out, &s)) in cfg.decoder_channels.iter().zip(&cfg.decoder_strides).enumerate() {
            let (tk, spec) = tconv_geometry(s);
            let fan_in = ch * tk.iter().product::<usize>() / s;
            plan.push((format!("dec{}", i + 1), vec![ch, out, tk[0], tk[1], tk[2]], fan_in, spec, true, Some(out)));
            ch = out;
        }
        plan.push(("head".into(), vec![1, ch, 1, 1, 1], ch, ConvSpec::UNIT, false, None));

        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for (stage, shape, fan_in, spec, transposed, norm) in plan {
            let name = if stage == "head" {
                stage.clone()
            } else if transposed {
                format!("{stage}.tconv")
            } else {
                format!("{stage}.conv")
            };
            let bias_len = if transposed { shape[1] } else { shape[0] };
            let mu_std = (1.0 / fan_in as f64).sqrt();
            let layer = if cfg.bayesian_layers.contains(&name) {
                let weight = VariationalParameter::init(&shape, mu_std, cfg.init_sigma, &mut rng);
                let mut bias = VariationalParameter::init(&[bias_len], 0.0, cfg.init_sigma, &mut rng);
                bias.mu = Tensor::zeros([bias_len]);
                ConvLayer::Bayesian(BayesConv3d {
                    weight,
                    bias,
                    prior: cfg.prior,
                    spec,
                    transposed,
                    frozen: false,
                })
            } else {
                let n: usize = shape.iter().product();
                let w = normal_vec_f32(&mut rng, n).into_iter().map(|e| e * mu_std as f32).collect();
                // keep draw counts aligned with the Bayesian branch
                let _ = normal_vec_f32(&mut rng, bias_len);
                ConvLayer::Deterministic(DetConv {
                    weight: Tensor::new(shape, w)?,
                    bias: Tensor::zeros([bias_len]),
                    spec,
                    transposed,
                })
            };
            convs.push(NamedConv { name, layer });
            if let Some(c) = norm {
                let mut stats = RunningStats::new(c);
                stats.momentum = cfg.bn_momentum;
                norms.push(NormLayer {
                    name: format!("{stage}.bn"),
                    gamma: Tensor::full([c], 1.0),
                    beta: Tensor::zeros([c]),
                    stats,
                });
            }
        }
        Ok(Self { cfg, convs, norms })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn convs(&self) -> &[NamedConv] {
        &self.convs
    }

    pub fn convs_mut(&mut self) -> &mut [NamedConv] {
        &mut self.convs
    }

    pub fn norms(&self) -> &[NormLayer] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [NormLayer] {
        &mut self.norms
    }

    fn layout(&self) -> Layout {
        Layout {
            diff_blocks: self.cfg.diff_blocks,
            encoders: self.cfg.encoder_channels.len(),
        }
    }

    /// Freezes (or unfreezes) every Bayesian layer.
    pub fn set_frozen(&mut self, frozen: bool) {
        for c in &mut self.convs {
            if let ConvLayer::Bayesian(b) = &mut c.layer {
                b.frozen = frozen;
            }
        }
    }

    /// Every trainable tensor with its name and role, in a fixed order.
    pub fn params(&self) -> Vec<(String, ParamRole, &Tensor<f32>)> {
        let mut out = Vec::new();
        for c in &self.convs {
            match &c.layer {
                ConvLayer::Deterministic(d) => {
                    out.push((format!("{}.weight", c.name), ParamRole::Weight, &d.weight));
                    out.push((format!("{}.bias", c.name), ParamRole::Weight, &d.bias));
                }
                ConvLayer::Bayesian(b) => {
                    out.push((format!("{}.weight_mu", c.name), ParamRole::Mean, &b.weight.mu));
                    out.push((format!("{}.weight_rho", c.name), ParamRole::Rho, &b.weight.rho));
                    out.push((format!("{}.bias_mu", c.name), ParamRole::Mean, &b.bias.mu));
                    out.push((format!("{}.bias_rho", c.name), ParamRole::Rho, &b.bias.rho));
                }
            }
        }
        for n in &self.norms {
            out.push((format!("{}.gamma", n.name), ParamRole::Norm, &n.gamma));
            out.push((format!("{}.beta", n.name), ParamRole::Norm, &n.beta));
        }
        out
    }

    /// Mutable view in [`RfBayesPhysNet::params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out: Vec<&mut Tensor<f32>> = Vec::new();
        for c in &mut self.convs {
            match &mut c.layer {
                ConvLayer::Deterministic(d) => {
                    out.push(&mut d.weight);
                    out.push(&mut d.bias);
                }
                ConvLayer::Bayesian(b) => {
                    out.push(&mut b.weight.mu);
                    out.push(&mut b.weight.rho);
                    out.push(&mut b.bias.mu);
                    out.push(&mut b.bias.rho);
                }
            }
        }
        for n in &mut self.norms {
            out.push(&mut n.gamma);
            out.push(&mut n.beta);
        }
        out
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// Summed KL of all non-frozen Bayesian layers.
    pub fn kl(&self) -> f64 {
        self.convs
            .iter()
            .map(|c| match &c.layer {
                ConvLayer::Bayesian(b) => b.kl(),
                ConvLayer::Deterministic(_) => 0.0,
            })
            .sum()
    }

    /// Index of the first param of each conv in [`RfBayesPhysNet::params`] order.
    fn param_offsets(&self) -> (Vec<usize>, usize) {
        let mut offs = Vec::with_capacity(self.convs.len());
        let mut i = 0;
        for c in &self.convs {
            offs.push(i);
            i += match c.layer {
                ConvLayer::Deterministic(_) => 2,
                ConvLayer::Bayesian(_) => 4,
            };
        }
        (offs, i)
    }

    fn check_clip(&self, clip: &Tensor<f32>) -> Result<usize> {
        let [n, c, t, h, w] = clip.dims5("network input")?;
        if [c, t, h, w] != self.cfg.input_shape {
            return Err(Error::Input(format!(
                "clip shape {:?} does not match configured input {:?}",
                &clip.shape()[1..],
                self.cfg.input_shape
            )));
        }
        Ok(n)
    }

    fn conv<R: Rng>(&self, p: &mut Pass<'_, R>, idx: usize, input: Var) -> Result<Var> {
        let (offs, _) = self.param_offsets();
        let base = offs[idx];
        let trainable = p.trainable;
        match &self.convs[idx].layer {
            ConvLayer::Deterministic(d) => {
                let leaf = |g: &mut Graph<f32>, t: &Tensor<f32>| {
                    if trainable {
                        g.param(t.clone())
                    } else {
                        g.constant(t.clone())
                    }
                };
                let w = leaf(p.g, &d.weight);
                let b = leaf(p.g, &d.bias);
                p.vars[base] = Some(w);
                p.vars[base + 1] = Some(b);
                if d.transposed {
                    p.g.conv_transpose3d(input, w, Some(b), d.spec)
                } else {
                    p.g.conv3d(input, w, Some(b), d.spec)
                }
            }
            ConvLayer::Bayesian(b) => {
                let (out, v) = b.forward(p.g, input, p.mode.weights, trainable, p.rng)?;
                p.vars[base] = Some(v.weight_mu);
                p.vars[base + 1] = v.weight_rho;
                p.vars[base + 2] = Some(v.bias_mu);
                p.vars[base + 3] = v.bias_rho;
                Ok(out)
            }
        }
    }

    fn norm_act<R: Rng>(&self, p: &mut Pass<'_, R>, norm_idx: usize, input: Var) -> Result<Var> {
        let n = &self.norms[norm_idx];
        let (_, conv_params) = self.param_offsets();
        let (gamma, beta) = if p.trainable {
            (p.g.param(n.gamma.clone()), p.g.param(n.beta.clone()))
        } else {
            (p.g.constant(n.gamma.clone()), p.g.constant(n.beta.clone()))
        };
        p.vars[conv_params + 2 * norm_idx] = Some(gamma);
        p.vars[conv_params + 2 * norm_idx + 1] = Some(beta);
        let y = p
            .g
            .batch_norm3d(input, gamma, beta, self.cfg.bn_eps, p.mode.norm, &mut p.stats[norm_idx])?;
        Ok(p.g.elu(y, self.cfg.elu_alpha))
    }

    /// Runs stages `[from, to)` starting from `x`.
    fn run_stages<R: Rng>(&self, p: &mut Pass<'_, R>, from: usize, to: usize, mut x: Var) -> Result<Var> {
        let lay = self.layout();
        let e = lay.encoders;
        for stage in from..to {
            x = match stage {
                0 => {
                    let stem = self.conv(p, 0, x)?;
                    let stem = self.norm_act(p, 0, stem)?;
                    let stem = p.g.max_pool3d(stem, self.cfg.stem_pool, self.cfg.stem_pool)?;
                    let d = p.g.temporal_difference(x)?;
                    let d = self.conv(p, 1, d)?;
                    let d = self.norm_act(p, 1, d)?;
                    let mut d = p.g.max_pool3d(d, self.cfg.stem_pool, self.cfg.stem_pool)?;
                    for b in 0..lay.diff_blocks {
                        let r = self.conv(p, 2 + b, d)?;
                        let r = self.norm_act(p, 2 + b, r)?;
                        d = p.g.add(d, r)?;
                    }
                    p.g.concat_channels(stem, d)?
                }
                s if s <= e => {
                    let i = s - 1;
                    let pooled = p.g.max_pool3d(x, self.cfg.encoder_pool, self.cfg.encoder_pool)?;
                    let y = self.conv(p, lay.enc(i), pooled)?;
                    self.norm_act(p, 2 + lay.diff_blocks + i, y)?
                }
                s if s <= 2 * e => {
                    let i = s - 1 - e;
                    let y = self.conv(p, lay.dec(i), x)?;
                    self.norm_act(p, 2 + lay.diff_blocks + e + i, y)?
                }
                _ => {
                    let y = self.conv(p, lay.head(), x)?;
                    let m = p.g.spatial_mean(y)?;
                    let [n, c, t] = <[usize; 3]>::try_from(p.g.value(m).shape()).expect("3-D");
                    p.g.reshape(m, [n, c * t])?
                }
            };
        }
        Ok(x)
    }

    /// Records a full pass on `g` for training. Parameters become graph
    /// params; running statistics are updated in train-norm mode.
    pub fn record_train<R: Rng>(
        &mut self,
        g: &mut Graph<f32>,
        clip: &Tensor<f32>,
        mode: PassMode,
        rng: &mut R,
    ) -> Result<(Var, ParamVars)> {
        self.check_clip(clip)?;
        let mut stats: Vec<RunningStats<f32>> = self.norms.iter().map(|n| n.stats.clone()).collect();
        let (_, total) = self.param_offsets();
        let out = {
            let mut p = Pass {
                g,
                mode,
                trainable: true,
                rng,
                stats: &mut stats,
                vars: vec![None; total + 2 * self.norms.len()],
            };
            let x = p.g.constant(clip.clone());
            let y = self.run_stages(&mut p, 0, self.layout().stages(), x)?;
            (y, ParamVars { vars: p.vars })
        };
        for (n, s) in self.norms.iter_mut().zip(stats) {
            n.stats = s;
        }
        Ok(out)
    }

    fn infer_stages<R: Rng>(&self, from: usize, to: usize, x: &Tensor<f32>, mode: PassMode, rng: &mut R) -> Result<Tensor<f32>> {
        let mode = PassMode {
            norm: NormMode::Eval,
            ..mode
        };
        let mut stats: Vec<RunningStats<f32>> = self.norms.iter().map(|n| n.stats.clone()).collect();
        let mut g = Graph::new();
        let mut p = Pass {
            g: &mut g,
            mode,
            trainable: false,
            rng,
            stats: &mut stats,
            vars: vec![None; self.param_offsets().1 + 2 * self.norms.len()],
        };
        let xv = p.g.constant(x.clone());
        let y = self.run_stages(&mut p, from, to, xv)?;
        Ok(g.value(y).clone())
    }

    /// Inference pass (running normalization statistics): `[N, 3, T, H, W] -> [N, T]`.
    pub fn forward<R: Rng>(&self, clip: &Tensor<f32>, mode: WeightMode, rng: &mut R) -> Result<Tensor<f32>> {
        self.check_clip(clip)?;
        let mode = PassMode {
            weights: mode,
            norm: NormMode::Eval,
        };
        self.infer_stages(0, self.layout().stages(), clip, mode, rng)
    }

    /// First stage whose output depends on weight sampling under `mode`.
    fn first_stochastic_stage(&self, mode: WeightMode) -> usize {
        let lay = self.layout();
        (0..lay.stages())
            .find(|&s| {
                lay.stage_convs(s).iter().any(|&i| match &self.convs[i].layer {
                    ConvLayer::Bayesian(b) => b.is_sampling(mode),
                    ConvLayer::Deterministic(_) => false,
                })
            })
            .unwrap_or(lay.stages())
    }

    /// Splits inference into a deterministic prefix, computed once, and a
    /// stochastic suffix evaluated per Monte-Carlo pass.
    pub fn prepare_sampling(&self, clip: &Tensor<f32>, mode: WeightMode) -> Result<SamplingPrefix> {
        self.check_clip(clip)?;
        let stage = self.first_stochastic_stage(mode);
        let features = if stage == 0 {
            clip.clone()
        } else {
            let mut unused = stream(0, &[]);
            self.infer_stages(0, stage, clip, PassMode { weights: mode, norm: NormMode::Eval }, &mut unused)?
        };
        Ok(SamplingPrefix { stage, features, mode })
    }

    /// Completes one pass from a prepared prefix.
    pub fn forward_from_prefix<R: Rng>(&self, prefix: &SamplingPrefix, rng: &mut R) -> Result<Tensor<f32>> {
        let stages = self.layout().stages();
        if prefix.stage == stages {
            return Ok(prefix.features.clone());
        }
        let mode = PassMode {
            weights: prefix.mode,
            norm: NormMode::Eval,
        };
        self.infer_stages(prefix.stage, stages, &prefix.features, mode, rng)
    }
}

/// Cached output of the deterministic stages of the network.
#[derive(Clone, Debug)]
pub struct SamplingPrefix {
    stage: usize,
    features: Tensor<f32>,
    mode: WeightMode,
}

impl SamplingPrefix {
    /// Whether every pass from this prefix gives the same output.
    pub fn is_deterministic(&self, net: &RfBayesPhysNet) -> bool {
        self.stage == net.layout().stages()
    }
}

/// Frame difference along time; the last frame is zero.
pub fn temporal_difference(clip: &Tensor<f32>) -> Result<Tensor<f32>> {
    crate::autodiff::temporal_difference(clip)
}

/// Stacks clips `[C, T, H, W]` into a batch `[N, C, T, H, W]`.
pub fn stack_clips(clips: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = clips
        .first()
        .ok_or_else(|| Error::Input("cannot stack an empty batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * clips.len());
    for c in clips {
        if c.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "batch mixes clip shapes {:?} and {:?}",
                shape,
                c.shape()
            )));
        }
        data.extend_from_slice(c.data());
    }
    let mut full = vec![clips.len()];
    full.extend(shape);
    Tensor::new(full, data)
}
