//! Tape-based reverse-mode differentiation for the operations the network uses.
//!
//! A [`Graph`] records one forward pass. Every op appends a node holding its
//! output value plus whatever context its backward rule needs; nodes are
//! therefore already in topological order and [`Graph::backward`] walks them
//! in reverse.

mod conv;
mod gradcheck;
mod norm;
mod pool;

pub use conv::ConvSpec;
pub use gradcheck::{check_function, grad_check, GradCheckOptions, GradCheckReport, SkipFn};
pub use norm::{NormMode, RunningStats};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use conv::ConvDims;
use norm::BnSaved;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Conv3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    ConvTranspose3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    MaxPool3d {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm3d {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<F>,
        mode: NormMode,
    },
    Elu {
        input: Var,
        alpha: F,
    },
    Add(Var, Var),
    ConcatChannels(Var, Var),
    TemporalDiff(Var),
    SpatialMean(Var),
    Reshape(Var),
    Reparam {
        mu: Var,
        rho: Var,
        eps: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Record of a single forward pass.
pub struct Graph<F = f32> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node so the graph can record a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// A leaf without gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    fn conv_dims(&self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec, transpose: bool) -> Result<ConvDims> {
        let what = if transpose { "conv_transpose3d" } else { "conv3d" };
        let [batch, cin, t, h, w] = self.value(input).dims5(what)?;
        let [w0, w1, kt, kh, kw] = self.value(weight).dims5(&format!("{what} weight"))?;
        let (wcin, cout) = if transpose { (w0, w1) } else { (w1, w0) };
        if wcin != cin {
            return Err(Error::Dimension(format!(
                "{what}: input has {cin} channels but weight expects {wcin}"
            )));
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [cout] {
                return Err(Error::Dimension(format!(
                    "{what}: bias shape {bs:?} does not match {cout} output channels"
                )));
            }
        }
        let input_ext = [t, h, w];
        let kernel = [kt, kh, kw];
        let output = if transpose {
            spec.transpose_output(input_ext, kernel)?
        } else {
            spec.conv_output(input_ext, kernel)?
        };
        Ok(ConvDims {
            batch,
            cin,
            cout,
            input: input_ext,
            kernel,
            output,
            spec,
        })
    }

    /// Cross-correlation; `weight` is `[cout, cin, kt, kh, kw]`.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let dims = self.conv_dims(input, weight, bias, spec, false)?;
        let out = conv::conv3d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &dims,
        );
        let [to, ho, wo] = dims.output;
        let value = Tensor::new([dims.batch, dims.cout, to, ho, wo], out)?;
        let rg = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(value, rg, Op::Conv3d { input, weight, bias, dims }))
    }

    /// Adjoint of [`Graph::conv3d`]; `weight` is `[cin, cout, kt, kh, kw]`.
    pub fn conv_transpose3d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let dims = self.conv_dims(input, weight, bias, spec, true)?;
        let out = conv::conv_transpose3d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &dims,
        );
        let [to, ho, wo] = dims.output;
        let value = Tensor::new([dims.batch, dims.cout, to, ho, wo], out)?;
        let rg = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(value, rg, Op::ConvTranspose3d { input, weight, bias, dims }))
    }

    pub fn max_pool3d(&mut self, input: Var, kernel: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let [n, c, t, h, w] = self.value(input).dims5("max_pool3d")?;
        let out_ext = pool::pool_output([t, h, w], kernel, stride)?;
        let (vals, argmax) =
            pool::max_pool3d_forward(self.value(input).data(), n * c, [t, h, w], kernel, stride, out_ext);
        let value = Tensor::new([n, c, out_ext[0], out_ext[1], out_ext[2]], vals)?;
        let rg = self.needs(input);
        Ok(self.push(value, rg, Op::MaxPool3d { input, argmax }))
    }

    /// Batch normalization; train mode updates `stats` in place.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm3d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: F,
        mode: NormMode,
        stats: &mut RunningStats<F>,
    ) -> Result<Var> {
        let [n, c, t, h, w] = self.value(input).dims5("batch_norm3d")?;
        if !(eps > F::zero()) {
            return Err(Error::Config("batch_norm3d: eps must be > 0".into()));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::Dimension(format!(
                    "batch_norm3d: {name} shape {:?} does not match {c} channels",
                    self.value(v).shape()
                )));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::Dimension(format!(
                "batch_norm3d: running stats sized for {} channels, input has {c}",
                stats.mean.len()
            )));
        }
        let (y, saved) = norm::batch_norm_forward(
            self.value(input).data(),
            n,
            c,
            t * h * w,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            mode,
            stats,
        );
        let value = Tensor::new([n, c, t, h, w], y)?;
        let rg = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(value, rg, Op::BatchNorm3d { input, gamma, beta, saved, mode }))
    }

    /// `x` for `x >= 0`, `alpha * (e^x - 1)` otherwise.
    pub fn elu(&mut self, input: Var, alpha: F) -> Var {
        let value = self.value(input).map(|x| elu(x, alpha));
        let rg = self.needs(input);
        self.push(value, rg, Op::Elu { input, alpha })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    /// Stacks two 5-D tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, t, h, w] = self.value(a).dims5("concat")?;
        let [nb, cb, tb, hb, wb] = self.value(b).dims5("concat")?;
        if (n, t, h, w) != (nb, tb, hb, wb) {
            return Err(Error::Dimension(format!(
                "concat: shapes {:?} and {:?} differ outside the channel axis",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let plane = t * h * w;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&da[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&db[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::new([n, ca + cb, t, h, w], out)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::ConcatChannels(a, b)))
    }

    /// `D[t] = x[t+1] - x[t]`, with the last frame zero.
    pub fn temporal_difference(&mut self, input: Var) -> Result<Var> {
        let value = temporal_difference(self.value(input))?;
        let rg = self.needs(input);
        Ok(self.push(value, rg, Op::TemporalDiff(input)))
    }

    /// Averages over height and width: `[N, C, T, H, W] -> [N, C, T]`.
    pub fn spatial_mean(&mut self, input: Var) -> Result<Var> {
        let [n, c, t, h, w] = self.value(input).dims5("spatial_mean")?;
        let hw = h * w;
        let inv = F::one() / F::from_usize(hw).unwrap_or_else(F::one);
        let out: Vec<F> = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|s| s.iter().copied().sum::<F>() * inv)
            .collect();
        let value = Tensor::new([n, c, t], out)?;
        let rg = self.needs(input);
        Ok(self.push(value, rg, Op::SpatialMean(input)))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.needs(input);
        Ok(self.push(value, rg, Op::Reshape(input)))
    }

    /// `w = mu + softplus(rho) * eps`, with `eps` supplied by the caller.
    pub fn reparameterize(&mut self, mu: Var, rho: Var, eps: Vec<F>) -> Result<Var> {
        let (m, r) = (self.value(mu), self.value(rho));
        if m.shape() != r.shape() || eps.len() != m.len() {
            return Err(Error::Dimension(format!(
                "reparameterize: mu {:?}, rho {:?}, eps len {}",
                m.shape(),
                r.shape(),
                eps.len()
            )));
        }
        let data = m
            .data()
            .iter()
            .zip(r.data())
            .zip(&eps)
            .map(|((&mu, &rho), &e)| mu + softplus(rho) * e)
            .collect();
        let value = Tensor::new(m.shape().to_vec(), data)?;
        let rg = self.needs(mu) || self.needs(rho);
        Ok(self.push(value, rg, Op::Reparam { mu, rho, eps }))
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape as the
    /// output). Can only be called once per recorded forward pass.
    pub fn backward(&mut self, output: Var, seed: Tensor<F>) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::Graph(
                "backward already ran on this graph; record a new forward pass first".into(),
            ));
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("unknown node {}", output.0)));
        }
        if seed.shape() != self.value(output).shape() {
            return Err(Error::Dimension(format!(
                "backward seed shape {:?} does not match output {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward from a single-element output with seed 1.
    pub fn backward_scalar(&mut self, output: Var) -> Result<Gradients<F>> {
        let shape = self.value(output).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::Dimension(format!("backward_scalar on shape {shape:?}")));
        }
        self.backward(output, Tensor::full(shape, F::one()))
    }

    fn backward_node(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, data: Vec<F>| -> Result<()> {
            let shape = self.value(v).shape().to_vec();
            let t = Tensor::new(shape, data)?;
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t)?,
                slot @ None => *slot = Some(t),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { input, weight, bias, dims } | Op::ConvTranspose3d { input, weight, bias, dims } => {
                let need = [self.needs(*input), self.needs(*weight), bias.is_some_and(|b| self.needs(b))];
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                let res = if matches!(node.op, Op::Conv3d { .. }) {
                    conv::conv3d_backward(x, w, g.data(), dims, need)
                } else {
                    conv::conv_transpose3d_backward(x, w, g.data(), dims, need)
                };
                if let Some(dx) = res.input {
                    acc(*input, dx)?;
                }
                if let Some(dw) = res.weight {
                    acc(*weight, dw)?;
                }
                if let (Some(b), Some(db)) = (bias, res.bias) {
                    acc(*b, db)?;
                }
            }
            Op::MaxPool3d { input, argmax } => {
                let dx = pool::max_pool3d_backward(g.data(), argmax, self.value(*input).len());
                acc(*input, dx)?;
            }
            Op::BatchNorm3d { input, gamma, beta, saved, mode } => {
                let [n, c, t, h, w] = self.value(*input).dims5("batch_norm3d")?;
                let r = norm::batch_norm_backward(g.data(), saved, n, c, t * h * w, self.value(*gamma).data(), *mode);
                if self.needs(*input) {
                    acc(*input, r.input)?;
                }
                if self.needs(*gamma) {
                    acc(*gamma, r.gamma)?;
                }
                if self.needs(*beta) {
                    acc(*beta, r.beta)?;
                }
            }
            Op::Elu { input, alpha } => {
                let x = self.value(*input).data();
                let dx = x
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| if x >= F::zero() { g } else { g * *alpha * x.exp() })
                    .collect();
                acc(*input, dx)?;
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.data().to_vec())?;
                }
                if self.needs(*b) {
                    acc(*b, g.data().to_vec())?;
                }
            }
            Op::ConcatChannels(a, b) => {
                let [n, ca, t, h, w] = self.value(*a).dims5("concat")?;
                let cb = self.value(*b).shape()[1];
                let plane = t * h * w;
                let mut ga = Vec::with_capacity(n * ca * plane);
                let mut gb = Vec::with_capacity(n * cb * plane);
                for s in g.data().chunks((ca + cb) * plane) {
                    ga.extend_from_slice(&s[..ca * plane]);
                    gb.extend_from_slice(&s[ca * plane..]);
                }
                if self.needs(*a) {
                    acc(*a, ga)?;
                }
                if self.needs(*b) {
                    acc(*b, gb)?;
                }
            }
            Op::TemporalDiff(input) => {
                let [_, _, t, h, w] = self.value(*input).dims5("temporal_difference")?;
                let plane = h * w;
                let mut dx = vec![F::zero(); g.len()];
                for (gs, dxs) in g.data().chunks(t * plane).zip(dx.chunks_mut(t * plane)) {
                    for ti in 0..t - 1 {
                        for p in 0..plane {
                            let gv = gs[ti * plane + p];
                            dxs[(ti + 1) * plane + p] = dxs[(ti + 1) * plane + p] + gv;
                            dxs[ti * plane + p] = dxs[ti * plane + p] - gv;
                        }
                    }
                }
                acc(*input, dx)?;
            }
            Op::SpatialMean(input) => {
                let [_, _, _, h, w] = self.value(*input).dims5("spatial_mean")?;
                let hw = h * w;
                let inv = F::one() / F::from_usize(hw).unwrap_or_else(F::one);
                let dx = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, hw)).collect();
                acc(*input, dx)?;
            }
            Op::Reshape(input) => acc(*input, g.data().to_vec())?,
            Op::Reparam { mu, rho, eps } => {
                if self.needs(*mu) {
                    acc(*mu, g.data().to_vec())?;
                }
                if self.needs(*rho) {
                    let r = self.value(*rho).data();
                    let d = g
                        .data()
                        .iter()
                        .zip(r)
                        .zip(eps)
                        .map(|((&gv, &rv), &e)| gv * e * sigmoid(rv))
                        .collect();
                    acc(*rho, d)?;
                }
            }
        }
        Ok(())
    }
}

pub fn elu<F: Scalar>(x: F, alpha: F) -> F {
    if x >= F::zero() {
        x
    } else {
        alpha * x.exp_m1()
    }
}

/// `ln(1 + e^x)`, stable for large `|x|`.
pub fn softplus<F: Scalar>(x: F) -> F {
    let twenty = F::from_f64_lossy(20.0);
    if x > twenty {
        x
    } else if x < -twenty {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 20.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Frame difference along T of a `[N, C, T, H, W]` tensor; the last frame is zero.
pub fn temporal_difference<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let [_, _, t, h, w] = x.dims5("temporal_difference")?;
    if t < 2 {
        return Err(Error::Input(format!(
            "temporal_difference needs at least 2 frames, got {t}"
        )));
    }
    let plane = h * w;
    let mut out = vec![F::zero(); x.len()];
    for (xs, os) in x.data().chunks(t * plane).zip(out.chunks_mut(t * plane)) {
        for ti in 0..t - 1 {
            for p in 0..plane {
                os[ti * plane + p] = xs[(ti + 1) * plane + p] - xs[ti * plane + p];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests;
