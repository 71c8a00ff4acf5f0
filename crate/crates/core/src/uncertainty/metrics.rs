//! Accuracy, rank correlation and interval coverage.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::McPrediction;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// Sample standard deviation of the signed error.
    pub std: f64,
    pub mae: f64,
    pub rmse: f64,
    /// Mean of `|error| / true`, in percent.
    pub mer: f64,
    /// `None` when either vector is constant.
    pub pearson_r: Option<f64>,
}

/// Pearson correlation; `None` for a constant input.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn accuracy_metrics(pred: &[f64], truth: &[f64]) -> Result<Accuracy> {
    let n = pred.len();
    if n != truth.len() {
        return Err(Error::Dimension(format!("{n} predictions for {} truths", truth.len())));
    }
    if n < 2 {
        return Err(Error::Input(format!("accuracy metrics need n >= 2, got {n}")));
    }
    if truth.contains(&0.0) {
        return Err(Error::Degenerate("MER is undefined when a true value is 0".into()));
    }
    let e: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
    let nf = n as f64;
    let mean_e = e.iter().sum::<f64>() / nf;
    Ok(Accuracy {
        std: (e.iter().map(|x| (x - mean_e).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt(),
        mae: e.iter().map(|x| x.abs()).sum::<f64>() / nf,
        rmse: (e.iter().map(|x| x * x).sum::<f64>() / nf).sqrt(),
        mer: 100.0 * e.iter().zip(truth).map(|(x, t)| x.abs() / t.abs()).sum::<f64>() / nf,
        pearson_r: pearson(pred, truth),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided p-value of a correlation `rho` over `n` pairs (t test, n - 2 dof).
pub fn correlation_p_value(rho: f64, n: usize) -> f64 {
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("dof >= 1");
    (2.0 * dist.cdf(-t.abs())).min(1.0)
}

/// Spearman rank correlation with average-rank ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<SpearmanResult> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::Dimension(format!("spearman: {n} vs {} values", y.len())));
    }
    if n < 3 {
        return Err(Error::Input(format!("spearman needs n >= 3, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            component: "spearman input".into(),
        });
    }
    let rho = pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| Error::UndefinedCorrelation("an input vector is constant".into()))?;
    Ok(SpearmanResult {
        rho,
        p_value: correlation_p_value(rho, n),
        n,
    })
}

/// Two-sided normal quantile for the supported confidence levels.
pub fn z_value(confidence: f64) -> Result<f64> {
    const TABLE: [(f64, f64); 3] = [(0.90, 1.6449), (0.95, 1.96), (0.99, 2.5758)];
    TABLE
        .iter()
        .find(|(c, _)| (c - confidence).abs() < 1e-9)
        .map(|&(_, z)| z)
        .ok_or_else(|| Error::Config(format!("unsupported confidence level {confidence}; use 0.90, 0.95 or 0.99")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub confidence: f64,
    pub z: f64,
    pub coverage_rate: f64,
    pub mean_ci_width: f64,
}

/// Coverage of `mean +- z * sigma` intervals (bounds inclusive).
pub fn coverage_at_z(means: &[f64], sigmas: &[f64], truth: &[f64], z: f64) -> Result<(f64, f64)> {
    let n = truth.len();
    if n == 0 || means.len() != n || sigmas.len() != n {
        return Err(Error::Dimension(format!(
            "coverage needs n >= 1 matching entries, got {} means, {} sigmas, {n} truths",
            means.len(),
            sigmas.len()
        )));
    }
    let mut covered = 0usize;
    let mut width = 0.0;
    for ((&m, &s), &t) in means.iter().zip(sigmas).zip(truth) {
        if m - z * s <= t && t <= m + z * s {
            covered += 1;
        }
        width += 2.0 * z * s;
    }
    Ok((covered as f64 / n as f64, width / n as f64))
}

pub fn ci_coverage(mc: &[McPrediction], truth: &[f64], confidence: f64) -> Result<Coverage> {
    let z = z_value(confidence)?;
    let means: Vec<f64> = mc.iter().map(|p| p.hr_mean).collect();
    let sigmas: Vec<f64> = mc.iter().map(|p| p.hr_variance.sqrt()).collect();
    let (coverage_rate, mean_ci_width) = coverage_at_z(&means, &sigmas, truth, z)?;
    Ok(Coverage {
        confidence,
        z,
        coverage_rate,
        mean_ci_width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let t = [80.0, 95.0, 60.0];
        let a = accuracy_metrics(&t, &t).unwrap();
        assert_eq!((a.mae, a.rmse, a.std, a.mer), (0.0, 0.0, 0.0, 0.0));
        assert!((a.pearson_r.unwrap() - 1.0).abs() < 1e-12);

        let shifted: Vec<f64> = t.iter().map(|v| v + 2.0).collect();
        let a = accuracy_metrics(&shifted, &t).unwrap();
        assert!((a.mae - 2.0).abs() < 1e-12 && (a.rmse - 2.0).abs() < 1e-12 && a.std.abs() < 1e-12);
        assert!((a.pearson_r.unwrap() - 1.0).abs() < 1e-12);

        let a = accuracy_metrics(&[90.0, 60.0], &[100.0, 50.0]).unwrap();
        assert!((a.mae - 10.0).abs() < 1e-12 && (a.rmse - 10.0).abs() < 1e-12);
        assert!((a.mer - 15.0).abs() < 1e-12);

        assert!(matches!(accuracy_metrics(&[1.0, 2.0], &[0.0, 2.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn spearman_monotone_and_constant() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [1.0, 4.0, 9.0, 16.0, 100.0];
        assert_eq!(spearman(&x, &y).unwrap().rho, 1.0);
        let rev: Vec<f64> = y.iter().rev().cloned().collect();
        assert_eq!(spearman(&x, &rev).unwrap().rho, -1.0);
        assert!(matches!(spearman(&x, &[2.0; 5]), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn z_table_and_coverage() {
        assert_eq!(z_value(0.95).unwrap(), 1.96);
        assert!(z_value(0.8).is_err());
        let (rate, width) = coverage_at_z(&[10.0, 20.0], &[0.0, 0.0], &[10.0, 20.0], 1.96).unwrap();
        assert_eq!((rate, width), (1.0, 0.0));
        let (rate, width) = coverage_at_z(&[10.0], &[0.0], &[11.0], 1.96).unwrap();
        assert_eq!((rate, width), (0.0, 0.0));
        let (rate, _) = coverage_at_z(&[10.0], &[0.5], &[11.0], 2.0).unwrap();
        assert_eq!(rate, 1.0, "bounds are inclusive");
    }
}
