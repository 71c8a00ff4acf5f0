//! Gaussian variational weights: `w = mu + softplus(rho) * eps`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{inverse_softplus, sigmoid, softplus, ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::normal_vec_f32;
use crate::tensor::{Scalar, Tensor};

/// Isotropic Gaussian prior `N(mean, std^2)` over every weight of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSpec {
    pub mean: f64,
    pub std: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { mean: 0.0, std: 0.1 }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0 && self.std.is_finite() && self.mean.is_finite()) {
            return Err(Error::Config(format!(
                "prior std must be finite and > 0, got {}",
                self.std
            )));
        }
        Ok(())
    }
}

/// Posterior means and pre-softplus scales of one weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalParameter {
    pub mu: Tensor<f32>,
    pub rho: Tensor<f32>,
}

impl VariationalParameter {
    pub fn new(mu: Tensor<f32>, rho: Tensor<f32>) -> Result<Self> {
        if mu.shape() != rho.shape() {
            return Err(Error::Dimension(format!(
                "mu shape {:?} differs from rho shape {:?}",
                mu.shape(),
                rho.shape()
            )));
        }
        Ok(Self { mu, rho })
    }

    /// `mu ~ N(0, mu_std^2)`, `rho` set so that `sigma = sigma0` everywhere.
    pub fn init<R: Rng>(shape: &[usize], mu_std: f64, sigma0: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let mu = normal_vec_f32(rng, n).into_iter().map(|e| e * mu_std as f32).collect();
        let rho0 = inverse_softplus(sigma0) as f32;
        Self {
            mu: Tensor::new(shape.to_vec(), mu).expect("shape product"),
            rho: Tensor::full(shape.to_vec(), rho0),
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Vec<f32> {
        self.rho.data().iter().map(|&r| softplus(r)).collect()
    }
}

/// Draws one weight sample; returns it together with the `eps` used.
pub fn sample_weights<R: Rng>(vp: &VariationalParameter, rng: &mut R) -> (Tensor<f32>, Vec<f32>) {
    let eps = normal_vec_f32(rng, vp.len());
    (sample_with_eps(vp, &eps), eps)
}

/// `mu + softplus(rho) * eps` element-wise.
pub fn sample_with_eps(vp: &VariationalParameter, eps: &[f32]) -> Tensor<f32> {
    let data = vp
        .mu
        .data()
        .iter()
        .zip(vp.rho.data())
        .zip(eps)
        .map(|((&m, &r), &e)| m + softplus(r) * e)
        .collect();
    Tensor::new(vp.mu.shape().to_vec(), data).expect("same shape")
}

/// `KL(N(mu, sigma^2) || N(m, s^2))` for one weight, in f64.
pub fn kl_gaussian(mu: f64, sigma: f64, prior: &PriorSpec) -> f64 {
    let s = prior.std;
    (s / sigma).ln() + (sigma * sigma + (mu - prior.mean).powi(2)) / (2.0 * s * s) - 0.5
}

/// Sum of per-weight KL divergences to `prior`.
pub fn kl_to_prior<F: Scalar>(mu: &[F], rho: &[F], prior: &PriorSpec) -> f64 {
    mu.iter()
        .zip(rho)
        .map(|(&m, &r)| kl_gaussian(m.as_f64(), softplus(r.as_f64()), prior))
        .sum()
}

/// Gradient of [`kl_to_prior`] with respect to `mu` and `rho`.
pub fn kl_gradient<F: Scalar>(mu: &[F], rho: &[F], prior: &PriorSpec) -> (Vec<F>, Vec<F>) {
    let s2 = prior.std * prior.std;
    mu.iter()
        .zip(rho)
        .map(|(&m, &r)| {
            let (m, r) = (m.as_f64(), r.as_f64());
            let sigma = softplus(r);
            let dmu = (m - prior.mean) / s2;
            let dsigma = -1.0 / sigma + sigma / s2;
            (F::from_f64_lossy(dmu), F::from_f64_lossy(dsigma * sigmoid(r)))
        })
        .unzip()
}

impl VariationalParameter {
    pub fn kl(&self, prior: &PriorSpec) -> f64 {
        kl_to_prior(self.mu.data(), self.rho.data(), prior)
    }
}

/// How a forward pass treats variational weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// Fresh `w = mu + sigma * eps` per pass.
    Sample,
    /// `w = mu`.
    Frozen,
}

/// Graph handles of one Bayesian layer's parameters for a recorded pass.
#[derive(Clone, Copy, Debug)]
pub struct BayesVars {
    pub weight_mu: Var,
    pub weight_rho: Option<Var>,
    pub bias_mu: Var,
    pub bias_rho: Option<Var>,
}

/// A 3-D convolution (or transposed convolution) with variational weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BayesConv3d {
    pub weight: VariationalParameter,
    pub bias: VariationalParameter,
    pub prior: PriorSpec,
    pub spec: ConvSpec,
    pub transposed: bool,
    /// Frozen layers always use `w = mu` and are left out of the KL sum.
    pub frozen: bool,
}

impl BayesConv3d {
    pub fn is_sampling(&self, mode: WeightMode) -> bool {
        mode == WeightMode::Sample && !self.frozen
    }

    /// Records the layer on `g`. `trainable` makes the parameters graph
    /// params (gradient tracked) instead of constants.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph<f32>,
        input: Var,
        mode: WeightMode,
        trainable: bool,
        rng: &mut R,
    ) -> Result<(Var, BayesVars)> {
        let leaf = |g: &mut Graph<f32>, t: &Tensor<f32>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let weight_mu = leaf(g, &self.weight.mu);
        let bias_mu = leaf(g, &self.bias.mu);
        let (w, b, weight_rho, bias_rho) = if self.is_sampling(mode) {
            let wr = leaf(g, &self.weight.rho);
            let br = leaf(g, &self.bias.rho);
            let weps = normal_vec_f32(rng, self.weight.len());
            let beps = normal_vec_f32(rng, self.bias.len());
            let w = g.reparameterize(weight_mu, wr, weps)?;
            let b = g.reparameterize(bias_mu, br, beps)?;
            (w, b, Some(wr), Some(br))
        } else {
            (weight_mu, bias_mu, None, None)
        };
        let out = if self.transposed {
            g.conv_transpose3d(input, w, Some(b), self.spec)?
        } else {
            g.conv3d(input, w, Some(b), self.spec)?
        };
        Ok((
            out,
            BayesVars {
                weight_mu,
                weight_rho,
                bias_mu,
                bias_rho,
            },
        ))
    }

    /// KL of weight and bias posteriors; 0 for a frozen layer.
    pub fn kl(&self) -> f64 {
        if self.frozen {
            0.0
        } else {
            self.weight.kl(&self.prior) + self.bias.kl(&self.prior)
        }
    }

    pub fn parameter_count(&self) -> usize {
        2 * (self.weight.len() + self.bias.len())
    }
}

/// One sampled forward pass of `layer` outside of training.
pub fn forward_bayes_conv<R: Rng>(layer: &BayesConv3d, input: &Tensor<f32>, rng: &mut R) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let (y, _) = layer.forward(&mut g, x, WeightMode::Sample, false, rng)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_function, GradCheckOptions};
    use crate::rng::stream;

    fn vp(mu: f32, rho: f32, n: usize) -> VariationalParameter {
        VariationalParameter::new(Tensor::full([n], mu), Tensor::full([n], rho)).unwrap()
    }

    #[test]
    fn zero_eps_gives_mean() {
        let p = vp(0.37, 0.5, 4);
        assert_eq!(sample_with_eps(&p, &[0.0; 4]), p.mu);
    }

    #[test]
    fn degenerate_scale_gives_mean() {
        let p = vp(1.25, -40.0, 3);
        let w = sample_with_eps(&p, &[3.0, -5.0, 10.0]);
        for &v in w.data() {
            assert!((v as f64 - 1.25).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_moments_match_posterior() {
        // Monte-Carlo moment oracle: mean 1, std ln 2.
        let p = vp(1.0, 0.0, 1_000_000);
        let mut rng = stream(42, &[0]);
        let (w, _) = sample_weights(&p, &mut rng);
        let n = w.len() as f64;
        let mean = w.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 1.0).abs() < 0.003, "mean {mean}");
        assert!((var.sqrt() - 2f64.ln()).abs() < 0.003, "std {}", var.sqrt());
    }

    #[test]
    fn kl_closed_form_examples() {
        let unit = PriorSpec { mean: 0.0, std: 1.0 };
        assert!(kl_gaussian(0.0, 1.0, &unit).abs() < 1e-15);
        assert!((kl_gaussian(1.0, 1.0, &unit) - 0.5).abs() < 1e-15);
        let expected = 2f64.ln() + 0.125 - 0.5;
        assert!((kl_gaussian(0.0, 0.5, &unit) - expected).abs() < 1e-15);
        assert!((expected - 0.3181).abs() < 1e-4);
    }

    #[test]
    fn kl_matches_monte_carlo_estimate() {
        // E_q[ln q(w) - ln p(w)] with 1e6 draws.
        let unit = PriorSpec { mean: 0.0, std: 1.0 };
        let mut rng = stream(3, &[1]);
        let n = 1_000_000;
        let eps = crate::rng::normal_vec(&mut rng, n);
        let (mu, s) = (0.0, 0.5);
        let est = eps
            .iter()
            .map(|e| {
                let w = mu + s * e;
                let lq = -(s as f64).ln() - 0.5 * e * e;
                let lp = -0.5 * w * w;
                lq - lp
            })
            .sum::<f64>()
            / n as f64;
        let exact = kl_gaussian(mu, s, &unit);
        assert!((est - exact).abs() / exact < 0.01, "{est} vs {exact}");
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let prior = PriorSpec { mean: 0.05, std: 0.1 };
        let x = [0.1, -0.3, 0.02, -2.5, 0.4, -4.0];
        let r = check_function(
            |v| kl_to_prior(&v[..3], &v[3..], &prior),
            |v| {
                let (a, b) = kl_gradient(&v[..3], &v[3..], &prior);
                a.into_iter().chain(b).collect()
            },
            &x,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn kl_is_zero_iff_posterior_equals_prior() {
        let prior = PriorSpec::default();
        let rho = inverse_softplus(prior.std) as f32;
        assert!(vp(0.0, rho, 10).kl(&prior).abs() < 1e-6);
        assert!(vp(0.01, rho, 10).kl(&prior) > 0.0);
    }

    fn layer() -> BayesConv3d {
        let mut rng = stream(1, &[2]);
        BayesConv3d {
            weight: VariationalParameter::init(&[2, 1, 3, 3, 3], 0.2, 0.05, &mut rng),
            bias: VariationalParameter::init(&[2], 0.0, 0.05, &mut rng),
            prior: PriorSpec::default(),
            spec: ConvSpec::same([3, 3, 3], [1, 1, 1]),
            transposed: false,
            frozen: false,
        }
    }

    #[test]
    fn frozen_layer_is_deterministic_and_kl_free() {
        let mut l = layer();
        l.frozen = true;
        let x = Tensor::from_fn([1, 1, 4, 4, 4], |i| (i as f32 * 0.37).sin());
        let a = forward_bayes_conv(&l, &x, &mut stream(1, &[0])).unwrap();
        let b = forward_bayes_conv(&l, &x, &mut stream(2, &[0])).unwrap();
        assert_eq!(a, b);
        assert_eq!(l.kl(), 0.0);
    }

    #[test]
    fn sampling_layer_varies_with_rng_and_repeats_with_seed() {
        let l = layer();
        let x = Tensor::from_fn([1, 1, 4, 4, 4], |i| (i as f32 * 0.37).sin());
        let a = forward_bayes_conv(&l, &x, &mut stream(1, &[0])).unwrap();
        let b = forward_bayes_conv(&l, &x, &mut stream(2, &[0])).unwrap();
        let c = forward_bayes_conv(&l, &x, &mut stream(1, &[0])).unwrap();
        let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
        assert!(diff > 0.0);
        assert_eq!(a, c);
    }

    #[test]
    fn prior_validation() {
        assert!(PriorSpec { mean: 0.0, std: 0.0 }.validate().is_err());
        assert!(PriorSpec::default().validate().is_ok());
    }
}
