//! Monte-Carlo prediction and the evaluation suite.

mod benchmark;
mod metrics;

pub use benchmark::{
    parse_report_text, run_uncertainty_benchmark, BenchmarkConfig, BenchmarkOutput, EvalClip,
    ScatterRow, UncertaintyReport,
};
pub use metrics::{
    accuracy_metrics, average_ranks, ci_coverage, correlation_p_value, coverage_at_z, pearson,
    spearman, z_value, Accuracy, Coverage, SpearmanResult,
};

use serde::{Deserialize, Serialize};

use crate::bayes::WeightMode;
use crate::error::{Error, Result};
use crate::network::RfBayesPhysNet;
use crate::rng::{purpose, stream};
use crate::signal::{estimate_hr, BandSpec, BvpTrace};
use crate::tensor::Tensor;

/// Default number of stochastic passes.
pub const DEFAULT_T_MC: usize = 20;

/// Monte-Carlo results for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct McPrediction {
    pub per_pass_bvp: Vec<Vec<f32>>,
    pub per_pass_hr: Vec<f64>,
    pub hr_mean: f64,
    /// Population variance (divisor `t_mc`) of `per_pass_hr`.
    pub hr_variance: f64,
    pub t_mc: usize,
}

impl McPrediction {
    pub fn from_passes(per_pass_bvp: Vec<Vec<f32>>, per_pass_hr: Vec<f64>) -> Result<Self> {
        let t_mc = per_pass_hr.len();
        if t_mc == 0 {
            return Err(Error::Input("need at least one Monte-Carlo pass".into()));
        }
        // sum / t_mc need not round back to a value repeated t_mc times
        let hr_mean = if per_pass_hr.iter().all(|&h| h == per_pass_hr[0]) {
            per_pass_hr[0]
        } else {
            per_pass_hr.iter().sum::<f64>() / t_mc as f64
        };
        let hr_variance = per_pass_hr.iter().map(|h| (h - hr_mean).powi(2)).sum::<f64>() / t_mc as f64;
        Ok(Self {
            per_pass_bvp,
            per_pass_hr,
            hr_mean,
            hr_variance,
            t_mc,
        })
    }

    /// Time-averaged population variance of the waveform across passes.
    pub fn waveform_variance(&self) -> f64 {
        let t = self.per_pass_bvp.first().map_or(0, Vec::len);
        if t == 0 {
            return 0.0;
        }
        let k = self.per_pass_bvp.len() as f64;
        (0..t)
            .map(|i| {
                let m = self.per_pass_bvp.iter().map(|b| b[i] as f64).sum::<f64>() / k;
                self.per_pass_bvp.iter().map(|b| (b[i] as f64 - m).powi(2)).sum::<f64>() / k
            })
            .sum::<f64>()
            / t as f64
    }

    /// Mean waveform across passes.
    pub fn mean_bvp(&self) -> Vec<f64> {
        let t = self.per_pass_bvp.first().map_or(0, Vec::len);
        let k = self.per_pass_bvp.len() as f64;
        (0..t)
            .map(|i| self.per_pass_bvp.iter().map(|b| b[i] as f64).sum::<f64>() / k)
            .collect()
    }
}

/// Which scalar summarizes a prediction's uncertainty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyKind {
    #[default]
    HrVariance,
    WaveformVariance,
}

impl UncertaintyKind {
    pub fn of(self, p: &McPrediction) -> f64 {
        match self {
            UncertaintyKind::HrVariance => p.hr_variance,
            UncertaintyKind::WaveformVariance => p.waveform_variance(),
        }
    }
}

/// Runs `t_mc` stochastic passes over a batch `[N, C, T, H, W]`. Pass `k`
/// draws its weights from the stream `(seed, MC_PASS, k)`, shared by every
/// clip of the batch, so a clip's result does not depend on its batch mates.
pub fn mc_predict(
    net: &RfBayesPhysNet,
    clips: &Tensor<f32>,
    t_mc: usize,
    seed: u64,
    fs: f64,
    band: &BandSpec,
) -> Result<Vec<McPrediction>> {
    if t_mc == 0 {
        return Err(Error::Input("t_mc must be >= 1".into()));
    }
    let prefix = net.prepare_sampling(clips, WeightMode::Sample)?;
    let outputs: Vec<Result<Tensor<f32>>> = crate::par::map_range(t_mc, |k| {
        net.forward_from_prefix(&prefix, &mut stream(seed, &[purpose::MC_PASS, k as u64]))
    });
    let outputs: Vec<Tensor<f32>> = outputs.into_iter().collect::<Result<_>>()?;
    let [n, t] = <[usize; 2]>::try_from(outputs[0].shape()).map_err(|_| Error::Dimension("network output is not [N, T]".into()))?;
    (0..n)
        .map(|i| {
            let bvp: Vec<Vec<f32>> = outputs.iter().map(|o| o.data()[i * t..(i + 1) * t].to_vec()).collect();
            let hr = bvp
                .iter()
                .map(|b| {
                    let trace = BvpTrace::new(b.iter().map(|&v| v as f64).collect(), fs)?;
                    estimate_hr(&trace, band)
                })
                .collect::<Result<Vec<f64>>>()?;
            McPrediction::from_passes(bvp, hr)
        })
        .collect()
}
