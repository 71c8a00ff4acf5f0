//! Central finite-difference verification of analytic gradients (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Predicate marking points where the derivative is not defined, called
/// with (input index, element index, element value).
pub type SkipFn = fn(usize, usize, f64) -> bool;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Seed of the random projection that reduces the output to a scalar.
    pub seed: u64,
    pub skip: Option<SkipFn>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-3,
            seed: 0,
            skip: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// (input index, element index) pairs excluded by the skip policy.
    pub skipped: Vec<(usize, usize)>,
    /// Location of the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub passed: bool,
}

impl GradCheckReport {
    fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64, floor: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((input, elem));
        }
    }
}

fn finite_or_err(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            component: what.to_string(),
        })
    }
}

/// Checks every element of every input of `op`.
///
/// The op's output `y` is reduced to `L = sum(r * y)` with a fixed random
/// `r`, so one backward pass yields the full input gradient of `L`.
pub fn grad_check<Op>(op: Op, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    Op: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let run = |xs: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = op(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let (mut g, vars, out) = run(inputs)?;
    let out_shape = g.value(out).shape().to_vec();
    let out_len = g.value(out).len();
    if !g.value(out).all_finite() {
        return Err(Error::NonFinite {
            component: "grad_check forward output".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let proj: Vec<f64> = if out_len == 1 {
        vec![1.0]
    } else {
        (0..out_len).map(|_| rng.sample(StandardNormal)).collect()
    };
    let loss = |g: &Graph<f64>, out: Var| -> f64 {
        g.value(out).data().iter().zip(&proj).map(|(y, r)| y * r).sum()
    };
    let grads = g.backward(out, Tensor::new(out_shape, proj.clone())?)?;

    let mut report = GradCheckReport::default();
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; x.len()]);
        for j in 0..x.len() {
            if opts.skip.is_some_and(|s| s(i, j, x.data()[j])) {
                report.skipped.push((i, j));
                continue;
            }
            let mut probe = inputs.to_vec();
            probe[i].data_mut()[j] = x.data()[j] + opts.h;
            let (gp, _, op_) = run(&probe)?;
            let lp = finite_or_err(loss(&gp, op_), "grad_check probe (+h)")?;
            probe[i].data_mut()[j] = x.data()[j] - opts.h;
            let (gm, _, om) = run(&probe)?;
            let lm = finite_or_err(loss(&gm, om), "grad_check probe (-h)")?;
            let numeric = (lp - lm) / (2.0 * opts.h);
            let a = finite_or_err(analytic[j], "analytic gradient")?;
            report.record(i, j, a, numeric, opts.floor);
        }
    }
    report.passed = report.max_rel_error < opts.tol;
    Ok(report)
}

/// Same check for a plain scalar function with a hand-written gradient.
pub fn check_function<Fv, Fg>(value: Fv, gradient: Fg, x: &[f64], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    Fv: Fn(&[f64]) -> f64,
    Fg: Fn(&[f64]) -> Vec<f64>,
{
    let analytic = gradient(x);
    if analytic.len() != x.len() {
        return Err(Error::Dimension(format!(
            "gradient has {} entries for {} inputs",
            analytic.len(),
            x.len()
        )));
    }
    let mut report = GradCheckReport::default();
    let mut probe = x.to_vec();
    for j in 0..x.len() {
        if opts.skip.is_some_and(|s| s(0, j, x[j])) {
            report.skipped.push((0, j));
            continue;
        }
        probe[j] = x[j] + opts.h;
        let lp = finite_or_err(value(&probe), "function probe (+h)")?;
        probe[j] = x[j] - opts.h;
        let lm = finite_or_err(value(&probe), "function probe (-h)")?;
        probe[j] = x[j];
        let a = finite_or_err(analytic[j], "analytic gradient")?;
        report.record(0, j, a, (lp - lm) / (2.0 * opts.h), opts.floor);
    }
    report.passed = report.max_rel_error < opts.tol;
    Ok(report)
}
