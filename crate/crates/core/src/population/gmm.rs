//! Gaussian mixture models fit by EM, with the component count chosen by BIC.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceType {
    #[default]
    Full,
    Diagonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmConfig {
    pub n_restarts: usize,
    pub max_iters: usize,
    /// EM stops when the mean per-sample log-likelihood moves less than this.
    pub tol: f64,
    /// Added to every covariance diagonal.
    pub reg_covar: f64,
    pub covariance: CovarianceType,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self { n_restarts: 10, max_iters: 2000, tol: 1e-3, reg_covar: 1e-6, covariance: CovarianceType::Full }
    }
}

/// A fitted mixture.
#[derive(Clone, Debug)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    /// Lower Cholesky factors of the component covariances.
    chol: Vec<DMatrix<f64>>,
    pub covariance: CovarianceType,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl Gmm {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn n_parameters(&self) -> usize {
        let k = self.n_components();
        let p = self.means.first().map_or(0, |m| m.len());
        let cov = match self.covariance {
            CovarianceType::Full => p * (p + 1) / 2,
            CovarianceType::Diagonal => p,
        };
        k * (p + cov) + k - 1
    }

    /// `-2 log L + n_params log n`.
    pub fn bic(&self, n: usize) -> f64 {
        -2.0 * self.log_likelihood + self.n_parameters() as f64 * (n as f64).ln()
    }

    fn log_gauss(&self, c: usize, x: &DVector<f64>) -> f64 {
        let l = &self.chol[c];
        let diff = x - &self.means[c];
        let z = l.solve_lower_triangular(&diff).expect("factor has positive diagonal");
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (x.len() as f64 * (2.0 * PI).ln() + log_det + z.norm_squared())
    }

    /// Per-sample log component densities plus log weights, and the sample
    /// log-likelihoods.
    fn e_step(&self, data: &[DVector<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
        data.iter()
            .map(|x| {
                let lp: Vec<f64> =
                    (0..self.n_components()).map(|c| self.weights[c].ln() + self.log_gauss(c, x)).collect();
                let m = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + lp.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                (lp.iter().map(|v| (v - lse).exp()).collect(), lse)
            })
            .unzip()
    }

    /// Index of the component with the highest responsibility; first wins ties.
    pub fn predict(&self, data: &[DVector<f64>]) -> Vec<usize> {
        let (resp, _) = self.e_step(data);
        resp.iter()
            .map(|r| {
                let mut best = 0;
                for (i, v) in r.iter().enumerate() {
                    if *v > r[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// Mixture weights, means and covariances.
type Components = (Vec<f64>, Vec<DVector<f64>>, Vec<DMatrix<f64>>);

fn m_step(data: &[DVector<f64>], resp: &[Vec<f64>], k: usize, cfg: &GmmConfig) -> Result<Components> {
    let n = data.len();
    let p = data[0].len();
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut chol = Vec::with_capacity(k);
    for c in 0..k {
        let nk: f64 = resp.iter().map(|r| r[c]).sum::<f64>() + 10.0 * f64::EPSILON;
        let mut mean = DVector::zeros(p);
        for (x, r) in data.iter().zip(resp) {
            mean.axpy(r[c], x, 1.0);
        }
        mean /= nk;
        let mut cov = DMatrix::zeros(p, p);
        match cfg.covariance {
            CovarianceType::Full => {
                for (x, r) in data.iter().zip(resp) {
                    let d = x - &mean;
                    cov.ger(r[c], &d, &d, 1.0);
                }
                cov /= nk;
            }
            CovarianceType::Diagonal => {
                for j in 0..p {
                    let s: f64 = data.iter().zip(resp).map(|(x, r)| r[c] * (x[j] - mean[j]).powi(2)).sum();
                    cov[(j, j)] = s / nk;
                }
            }
        }
        for j in 0..p {
            cov[(j, j)] += cfg.reg_covar;
        }
        let l = Cholesky::new(cov)
            .ok_or_else(|| Error::numeric("mixture covariance is not positive definite; increase reg_covar"))?
            .unpack();
        weights.push(nk / n as f64);
        means.push(mean);
        chol.push(l);
    }
    Ok((weights, means, chol))
}

/// k-means++ seeding followed by hard assignment to the nearest seed.
fn initial_responsibilities(data: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut centers = vec![data[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d2: Vec<f64> =
            data.iter().map(|x| centers.iter().map(|c| (x - c).norm_squared()).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(data[next].clone());
    }
    data.iter()
        .map(|x| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, c) in centers.iter().enumerate() {
                let d = (x - c).norm_squared();
                if d < best_d {
                    best = i;
                    best_d = d;
                }
            }
            let mut r = vec![0.0; k];
            r[best] = 1.0;
            r
        })
        .collect()
}

fn fit_once(data: &[DVector<f64>], k: usize, cfg: &GmmConfig, rng: &mut ChaCha8Rng) -> Result<Gmm> {
    let mut resp = initial_responsibilities(data, k, rng);
    let mut prev = f64::NEG_INFINITY;
    let mut gmm = None;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..cfg.max_iters.max(1) {
        iterations = it + 1;
        let (weights, means, chol) = m_step(data, &resp, k, cfg)?;
        let mut g = Gmm { weights, means, chol, covariance: cfg.covariance, log_likelihood: 0.0, iterations, converged: false };
        let (r, ll) = g.e_step(data);
        g.log_likelihood = ll.iter().sum();
        resp = r;
        let mean_ll = g.log_likelihood / data.len() as f64;
        gmm = Some(g);
        if (mean_ll - prev).abs() < cfg.tol {
            converged = true;
            break;
        }
        prev = mean_ll;
    }
    let mut g = gmm.expect("at least one EM iteration");
    g.converged = converged;
    g.iterations = iterations;
    if !g.log_likelihood.is_finite() {
        return Err(Error::numeric("mixture log-likelihood is not finite"));
    }
    Ok(g)
}

/// Best of `cfg.n_restarts` EM runs with `k` components. Restart `i` uses
/// stream `k * 1000 + i` of a ChaCha generator seeded with `seed`.
pub fn fit_gmm(data: &[DVector<f64>], k: usize, cfg: &GmmConfig, seed: u64) -> Result<Gmm> {
    if data.is_empty() || k == 0 || k > data.len() {
        return Err(Error::domain(format!("cannot fit {k} components to {} samples", data.len())));
    }
    let runs: Vec<Result<Gmm>> = (0..cfg.n_restarts.max(1))
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((k * 1000 + i) as u64);
            fit_once(data, k, cfg, &mut rng)
        })
        .collect();
    let mut best: Option<Gmm> = None;
    let mut last_err = None;
    for r in runs {
        match r {
            Ok(g) => {
                if best.as_ref().is_none_or(|b| g.log_likelihood > b.log_likelihood) {
                    best = Some(g);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.expect("every restart failed"))
}

/// Result of BIC model selection.
#[derive(Clone, Debug)]
pub struct Clustering {
    pub n_clusters: usize,
    /// Cluster index of every input feature, in input order.
    pub assignment: Vec<usize>,
    /// `(k, BIC)` for every k that could be fit.
    pub bic: Vec<(usize, f64)>,
}

/// Fits mixtures with 1..=`k_max` components and keeps the one with the
/// lowest BIC (smaller k on ties). Rows are put in lexicographic order before
/// fitting, so the partition does not depend on the input order.
pub fn gmm_cluster_bic(features: &[Vec<f64>], k_max: usize, cfg: &GmmConfig, seed: u64) -> Result<Clustering> {
    if features.is_empty() || k_max == 0 {
        return Err(Error::domain("clustering needs at least one feature and k_max >= 1"));
    }
    let p = features[0].len();
    if features.iter().any(|f| f.len() != p || f.iter().any(|v| !v.is_finite())) {
        return Err(Error::domain("features must be finite and of equal length"));
    }
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by(|&a, &b| {
        features[a].iter().zip(&features[b]).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let data: Vec<DVector<f64>> = order.iter().map(|&i| DVector::from_column_slice(&features[i])).collect();
    let n = data.len();

    let mut bic = Vec::new();
    let mut best: Option<(f64, Gmm)> = None;
    for k in 1..=k_max.min(n) {
        match fit_gmm(&data, k, cfg, seed) {
            Ok(g) => {
                let b = g.bic(n);
                bic.push((k, b));
                if best.as_ref().is_none_or(|(bb, _)| b < *bb) {
                    best = Some((b, g));
                }
            }
            Err(e) => log::warn!("skipping k = {k}: {e}"),
        }
    }
    let (_, gmm) = best.ok_or_else(|| Error::numeric("no mixture could be fit"))?;
    let sorted_labels = gmm.predict(&data);
    // relabel clusters by first appearance in the original order
    let mut labels = vec![0; n];
    for (pos, &orig) in order.iter().enumerate() {
        labels[orig] = sorted_labels[pos];
    }
    let mut remap = vec![usize::MAX; gmm.n_components()];
    let mut next = 0;
    for l in labels.iter_mut() {
        if remap[*l] == usize::MAX {
            remap[*l] = next;
            next += 1;
        }
        *l = remap[*l];
    }
    Ok(Clustering { n_clusters: next, assignment: labels, bic })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(centers: &[f64], per: usize, p: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        centers
            .iter()
            .flat_map(|c| (0..per).map(|_| (0..p).map(|_| c + noise.sample(&mut rng)).collect::<Vec<f64>>()).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn separates_blobs() {
        let f = blobs(&[0.0, 5.0], 30, 3, 1);
        let c = gmm_cluster_bic(&f, 4, &GmmConfig::default(), 7).unwrap();
        assert_eq!(c.n_clusters, 2);
        assert!(c.assignment[..30].iter().all(|&l| l == c.assignment[0]));
        assert!(c.assignment[30..].iter().all(|&l| l == c.assignment[30]));
        assert_ne!(c.assignment[0], c.assignment[30]);
    }

    #[test]
    fn identical_features_form_one_cluster() {
        let f = vec![vec![1.0, 2.0]; 10];
        let c = gmm_cluster_bic(&f, 3, &GmmConfig::default(), 0).unwrap();
        assert_eq!(c.n_clusters, 1);
        assert!(c.assignment.iter().all(|&l| l == 0));
    }

    #[test]
    fn bic_parameter_count() {
        let f = blobs(&[0.0], 10, 4, 3);
        let data: Vec<DVector<f64>> = f.iter().map(|v| DVector::from_column_slice(v)).collect();
        let g = fit_gmm(&data, 2, &GmmConfig::default(), 0).unwrap();
        assert_eq!(g.n_parameters(), 2 * (4 + 10) + 1);
        let d = fit_gmm(&data, 2, &GmmConfig { covariance: CovarianceType::Diagonal, ..Default::default() }, 0).unwrap();
        assert_eq!(d.n_parameters(), 2 * 8 + 1);
    }
}
