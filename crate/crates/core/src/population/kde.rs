//! Univariate Gaussian kernel density estimates with Silverman's bandwidth.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Kde {
    samples: Vec<f64>,
    bandwidth: f64,
}

impl Kde {
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / (self.samples.len() as f64 * h * (2.0 * PI).sqrt());
        norm * self.samples.iter().map(|s| (-0.5 * ((x - s) / h).powi(2)).exp()).sum::<f64>()
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Silverman's rule `0.9 min(sd, IQR/1.34) n^(-1/5)`. When one of the two
/// spread measures is zero the other is used; with no spread at all (or a
/// single sample) the bandwidth falls back to `max(1e-3 |x_1|, 1e-6)`.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::domain("bandwidth needs at least one sample"));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("KDE samples must be finite"));
    }
    let n = samples.len();
    let fallback = (1e-3 * samples[0].abs()).max(1e-6);
    if n == 1 {
        return Ok(fallback);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = (quantile(&sorted, 0.75) - quantile(&sorted, 0.25)) / 1.34;
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr),
        (true, false) => sd,
        (false, true) => iqr,
        (false, false) => return Ok(fallback),
    };
    Ok(0.9 * spread * (n as f64).powf(-0.2))
}

pub fn kde_silverman(samples: &[f64]) -> Result<Kde> {
    let bandwidth = silverman_bandwidth(samples)?;
    Ok(Kde { samples: samples.to_vec(), bandwidth })
}

/// Mean of the samples weighted by the KDE evaluated at each sample.
pub fn density_weighted_mean(samples: &[f64]) -> Result<f64> {
    let kde = kde_silverman(samples)?;
    let weights: Vec<f64> = samples.iter().map(|x| kde.density(*x)).collect();
    let total: f64 = weights.iter().sum();
    Ok(samples.iter().zip(&weights).map(|(x, w)| x * w).sum::<f64>() / total)
}

/// Abscissa of the highest KDE value on a uniform grid over the sample range.
/// The lower abscissa wins ties (values within a relative 1e-12).
pub fn grid_mode_search(samples: &[f64], grid: usize) -> Result<f64> {
    if grid < 2 {
        return Err(Error::domain("grid needs at least two points"));
    }
    let kde = kde_silverman(samples)?;
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(lo);
    }
    let step = (hi - lo) / (grid - 1) as f64;
    let mut best = (lo, kde.density(lo));
    for i in 1..grid {
        let x = if i == grid - 1 { hi } else { lo + i as f64 * step };
        let d = kde.density(x);
        if d > best.1 + 1e-12 * best.1.abs() {
            best = (x, d);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bandwidth_rule() {
        let s = [1.0, 2.0, 3.0, 4.0, 10.0];
        // sd = 3.5355, IQR = 2 / 1.34 = 1.4925
        let h = silverman_bandwidth(&s).unwrap();
        assert!((h - 0.9 * (2.0 / 1.34) * 5f64.powf(-0.2)).abs() < 1e-12);
        assert_eq!(silverman_bandwidth(&[5.0]).unwrap(), 5e-3);
        assert_eq!(silverman_bandwidth(&[0.0, 0.0]).unwrap(), 1e-6);
        assert!(silverman_bandwidth(&[]).is_err());
    }

    #[test]
    fn grid_mode_finds_interior_peak() {
        let s = [0.0, 4.9, 5.0, 5.0, 5.1, 10.0];
        let m = grid_mode_search(&s, 1001).unwrap();
        assert!((m - 5.0).abs() < 0.05, "{m}");
    }

    #[test]
    fn weighted_mean_examples() {
        assert_eq!(density_weighted_mean(&[2.5; 4]).unwrap(), 2.5);
        assert!(density_weighted_mean(&[-1.0, 0.0, 1.0]).unwrap().abs() < 1e-15);
        let mut bimodal = vec![0.0; 9];
        bimodal.push(10.0);
        assert!(density_weighted_mean(&bimodal).unwrap().abs() < 1.0);
    }

    #[test]
    fn mode_tie_goes_low() {
        let m = grid_mode_search(&[-1.0, 1.0], 201).unwrap();
        assert!(m < 0.0);
        assert_eq!(grid_mode_search(&[3.0; 5], 10).unwrap(), 3.0);
    }
}
