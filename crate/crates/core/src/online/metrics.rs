//! Error and calibration summaries, and paired significance tests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::online::PredictionRecord;

/// Two-sided 95% standard normal quantile.
pub const Z95: f64 = 1.959964;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateMetrics {
    pub covariate: usize,
    pub n: usize,
    pub mae: f64,
    /// `None` when no record carries a variance.
    pub coverage95: Option<f64>,
}

/// Per-covariate MAE and 95% coverage, ordered by covariate. Records with a
/// `NaN` variance count toward MAE only.
pub fn metrics(records: &[PredictionRecord]) -> Vec<CovariateMetrics> {
    let mut groups: BTreeMap<usize, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.covariate).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(covariate, rs)| {
            let mae = rs.iter().map(|r| (r.predicted_mean - r.actual).abs()).sum::<f64>() / rs.len() as f64;
            let with_var: Vec<_> = rs.iter().filter(|r| !r.predicted_var.is_nan()).collect();
            let coverage95 = (!with_var.is_empty())
                .then(|| with_var.iter().filter(|r| r.in_95_region).count() as f64 / with_var.len() as f64);
            CovariateMetrics { covariate, n: rs.len(), mae, coverage95 }
        })
        .collect()
}

/// Mean absolute error of the records for one covariate, if any.
pub fn mae_for(records: &[PredictionRecord], covariate: usize) -> Option<f64> {
    metrics(records).into_iter().find(|m| m.covariate == covariate).map(|m| m.mae)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// `0.05 / n_comparisons`.
    pub threshold: f64,
    pub significant: bool,
    /// Differences were constant but not all zero, so `t` is infinite.
    pub degenerate: bool,
}

/// Paired two-sided t-test of `a - b` with a Bonferroni-corrected 5% level.
pub fn paired_t_test(a: &[f64], b: &[f64], n_comparisons: usize) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::domain("paired t-test needs two equal-length samples of size >= 2"));
    }
    if n_comparisons == 0 {
        return Err(Error::domain("n_comparisons must be at least 1"));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let threshold = 0.05 / n_comparisons as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0, threshold, significant: false, degenerate: false }
        } else {
            TTest { t: mean.signum() * f64::INFINITY, p: 0.0, threshold, significant: false, degenerate: true }
        });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::numeric(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest { t, p, threshold, significant: p < threshold, degenerate: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples() {
        let a = [1.0, 2.0, 3.0];
        let t = paired_t_test(&a, &a, 1).unwrap();
        assert_eq!((t.t, t.p, t.significant), (0.0, 1.0, false));
    }

    #[test]
    fn bonferroni_thresholds() {
        let a = [1.0, 2.0, 3.5];
        let b = [0.0, 1.5, 3.0];
        assert_eq!(paired_t_test(&a, &b, 2).unwrap().threshold, 0.025);
        assert!((paired_t_test(&a, &b, 10).unwrap().threshold - 0.005).abs() < 1e-15);
    }

    #[test]
    fn coverage_with_infinite_variance() {
        let r = PredictionRecord::new(0, 1.0, 0.0, f64::INFINITY, 1e9);
        let m = metrics(&[r]);
        assert_eq!(m[0].coverage95, Some(1.0));
        let naive = PredictionRecord::new(1, 1.0, 2.0, f64::NAN, 2.0);
        let m = metrics(&[naive]);
        assert_eq!((m[0].mae, m[0].coverage95), (0.0, None));
    }
}
