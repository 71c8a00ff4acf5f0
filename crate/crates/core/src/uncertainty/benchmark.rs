//! Noise sweep: accuracy, uncertainty/error rank correlation and coverage
//! per noise level, plus the per-sample scatter.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{accuracy_metrics, ci_coverage, spearman, z_value, Accuracy, Coverage, SpearmanResult};
use super::{mc_predict, McPrediction, UncertaintyKind, DEFAULT_T_MC};
use crate::error::{Error, Result};
use crate::network::{stack_clips, RfBayesPhysNet};
use crate::rng::{purpose, stream};
use crate::signal::{add_noise, BandSpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub noise_levels: Vec<f64>,
    pub t_mc: usize,
    pub seed: u64,
    pub confidence: f64,
    /// Clips per forward batch (does not affect results).
    pub batch_size: usize,
    pub band: BandSpec,
    pub fs: f64,
    pub uncertainty: UncertaintyKind,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            noise_levels: vec![0.0, 0.01, 0.05, 0.1],
            t_mc: DEFAULT_T_MC,
            seed: 0,
            confidence: 0.95,
            batch_size: 4,
            band: BandSpec::default(),
            fs: 30.0,
            uncertainty: UncertaintyKind::HrVariance,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_levels.is_empty() || self.noise_levels.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("noise_levels must be a non-empty list of finite values >= 0".into()));
        }
        if self.t_mc == 0 || self.batch_size == 0 {
            return Err(Error::Config("t_mc and batch_size must be >= 1".into()));
        }
        z_value(self.confidence)?;
        self.band.validate(self.fs)
    }
}

/// One test clip `[C, T, H, W]` with its reference heart rate.
#[derive(Clone, Debug)]
pub struct EvalClip {
    pub id: String,
    pub clip: Tensor<f32>,
    pub true_hr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub noise_level: f64,
    pub sample_id: String,
    pub uncertainty: f64,
    pub abs_error_bpm: f64,
}

/// Per-noise-level results; every list is aligned with `noise_levels`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintyReport {
    pub noise_levels: Vec<f64>,
    /// `None` with fewer than two clips.
    pub accuracy: Vec<Option<Accuracy>>,
    /// `None` when the correlation is undefined (e.g. all variances 0).
    pub spearman: Vec<Option<SpearmanResult>>,
    pub coverage: Vec<Coverage>,
}

#[derive(Clone, Debug)]
pub struct BenchmarkOutput {
    pub report: UncertaintyReport,
    pub scatter: Vec<ScatterRow>,
    /// Per level, per clip: the Monte-Carlo predictions.
    pub predictions: Vec<Vec<McPrediction>>,
    pub warnings: Vec<String>,
}

pub fn run_uncertainty_benchmark(
    net: &RfBayesPhysNet,
    clips: &[EvalClip],
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkOutput> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::Input("benchmark needs at least one test clip".into()));
    }
    let truth: Vec<f64> = clips.iter().map(|c| c.true_hr).collect();
    let mut report = UncertaintyReport {
        noise_levels: cfg.noise_levels.clone(),
        accuracy: Vec::new(),
        spearman: Vec::new(),
        coverage: Vec::new(),
    };
    let mut scatter = Vec::new();
    let mut predictions = Vec::new();
    let mut warnings = Vec::new();
    let mut warn = |msg: String| {
        log::warn!("{msg}");
        warnings.push(msg);
    };
    if cfg.t_mc == 1 {
        warn("t_mc = 1: every variance is 0, coverage is degenerate".into());
    }
    for (li, &level) in cfg.noise_levels.iter().enumerate() {
        let mut preds: Vec<McPrediction> = Vec::with_capacity(clips.len());
        for (bi, chunk) in clips.chunks(cfg.batch_size).enumerate() {
            let noisy: Vec<Tensor<f32>> = chunk
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    let idx = (bi * cfg.batch_size + j) as u64;
                    add_noise(&c.clip, level, &mut stream(cfg.seed, &[purpose::NOISE, li as u64, idx]))
                })
                .collect::<Result<_>>()?;
            let batch = stack_clips(&noisy.iter().collect::<Vec<_>>())?;
            preds.extend(mc_predict(net, &batch, cfg.t_mc, cfg.seed, cfg.fs, &cfg.band)?);
        }
        let means: Vec<f64> = preds.iter().map(|p| p.hr_mean).collect();
        let unc: Vec<f64> = preds.iter().map(|p| cfg.uncertainty.of(p)).collect();
        let abs_err: Vec<f64> = means.iter().zip(&truth).map(|(m, t)| (m - t).abs()).collect();

        report.accuracy.push(if clips.len() >= 2 {
            Some(accuracy_metrics(&means, &truth)?)
        } else {
            None
        });
        report.spearman.push(match spearman(&unc, &abs_err) {
            Ok(s) => Some(s),
            Err(e @ (Error::UndefinedCorrelation(_) | Error::Input(_))) => {
                warn(format!("noise {level}: spearman not reported ({e})"));
                None
            }
            Err(e) => return Err(e),
        });
        report.coverage.push(ci_coverage(&preds, &truth, cfg.confidence)?);
        for (c, (u, e)) in clips.iter().zip(unc.iter().zip(&abs_err)) {
            scatter.push(ScatterRow {
                noise_level: level,
                sample_id: c.id.clone(),
                uncertainty: *u,
                abs_error_bpm: *e,
            });
        }
        predictions.push(preds);
    }
    Ok(BenchmarkOutput {
        report,
        scatter,
        predictions,
        warnings,
    })
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
}

impl UncertaintyReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("report", e))
    }

    /// Aligned-column tables: accuracy, rank correlation, coverage.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# accuracy (bpm; mer in %)");
        let _ = writeln!(
            s,
            "{:>12} {:>12} {:>12} {:>12} {:>12} {:>12}",
            "noise", "std", "mae", "rmse", "mer", "pearson_r"
        );
        for (l, a) in self.noise_levels.iter().zip(&self.accuracy) {
            let cols: Vec<String> = match a {
                Some(a) => vec![
                    format!("{:.6}", a.std),
                    format!("{:.6}", a.mae),
                    format!("{:.6}", a.rmse),
                    format!("{:.6}", a.mer),
                    opt(a.pearson_r, 6),
                ],
                None => vec!["-".into(); 5],
            };
            let _ = writeln!(
                s,
                "{:>12.6} {:>12} {:>12} {:>12} {:>12} {:>12}",
                l, cols[0], cols[1], cols[2], cols[3], cols[4]
            );
        }
        let _ = writeln!(s, "\n# spearman (uncertainty vs |error|)");
        let _ = writeln!(s, "{:>12} {:>12} {:>14} {:>6}", "noise", "rho", "p_value", "n");
        for (l, sp) in self.noise_levels.iter().zip(&self.spearman) {
            match sp {
                Some(sp) => {
                    let _ = writeln!(s, "{:>12.6} {:>12.6} {:>14.6e} {:>6}", l, sp.rho, sp.p_value, sp.n);
                }
                None => {
                    let _ = writeln!(s, "{:>12.6} {:>12} {:>14} {:>6}", l, "-", "-", "-");
                }
            }
        }
        let _ = writeln!(s, "\n# coverage");
        let _ = writeln!(
            s,
            "{:>12} {:>12} {:>8} {:>14} {:>14}",
            "noise", "confidence", "z", "coverage_rate", "mean_ci_width"
        );
        for (l, c) in self.noise_levels.iter().zip(&self.coverage) {
            let _ = writeln!(
                s,
                "{:>12.6} {:>12.4} {:>8.4} {:>14.6} {:>14.6}",
                l, c.confidence, c.z, c.coverage_rate, c.mean_ci_width
            );
        }
        s
    }
}

/// Parses [`UncertaintyReport::to_text`] output back into a report.
pub fn parse_report_text(text: &str) -> Result<UncertaintyReport> {
    let bad = |msg: String| Error::Input(format!("report text: {msg}"));
    let num = |tok: &str| -> Result<Option<f64>> {
        if tok == "-" {
            Ok(None)
        } else {
            tok.parse::<f64>().map(Some).map_err(|_| bad(format!("bad number {tok:?}")))
        }
    };
    let mut section = "";
    let mut report = UncertaintyReport {
        noise_levels: Vec::new(),
        accuracy: Vec::new(),
        spearman: Vec::new(),
        coverage: Vec::new(),
    };
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(h) = line.strip_prefix('#') {
            section = h.split_whitespace().next().unwrap_or("");
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks[0] == "noise" {
            continue;
        }
        let level = num(toks[0])?.ok_or_else(|| bad("missing noise level".into()))?;
        match (section, toks.len()) {
            ("accuracy", 6) => {
                report.noise_levels.push(level);
                let v: Vec<Option<f64>> = toks[1..].iter().map(|t| num(t)).collect::<Result<_>>()?;
                report.accuracy.push(match v[..4] {
                    [Some(std), Some(mae), Some(rmse), Some(mer)] => Some(Accuracy {
                        std,
                        mae,
                        rmse,
                        mer,
                        pearson_r: v[4],
                    }),
                    _ => None,
                });
            }
            ("spearman", 4) => report.spearman.push(match (num(toks[1])?, num(toks[2])?, toks[3]) {
                (Some(rho), Some(p_value), n) => Some(SpearmanResult {
                    rho,
                    p_value,
                    n: n.parse().map_err(|_| bad(format!("bad count {n:?}")))?,
                }),
                _ => None,
            }),
            ("coverage", 5) => {
                let v: Vec<f64> = toks[1..]
                    .iter()
                    .map(|t| num(t)?.ok_or_else(|| bad("coverage cell is empty".into())))
                    .collect::<Result<_>>()?;
                report.coverage.push(Coverage {
                    confidence: v[0],
                    z: v[1],
                    coverage_rate: v[2],
                    mean_ci_width: v[3],
                });
            }
            _ => return Err(bad(format!("unexpected line {line:?} in section {section:?}"))),
        }
    }
    let n = report.noise_levels.len();
    if report.spearman.len() != n || report.coverage.len() != n {
        return Err(bad("sections have different row counts".into()));
    }
    Ok(report)
}

impl BenchmarkOutput {
    pub fn scatter_csv(&self) -> String {
        let mut s = String::from("noise_level,sample_id,uncertainty,abs_error_bpm\n");
        for r in &self.scatter {
            let _ = writeln!(s, "{},{},{},{}", r.noise_level, r.sample_id, r.uncertainty, r.abs_error_bpm);
        }
        s
    }

    /// Writes `report.json`, `report.txt` and `scatter.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("report.json", self.report.to_json()?),
            ("report.txt", self.report.to_text()),
            ("scatter.csv", self.scatter_csv()),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
