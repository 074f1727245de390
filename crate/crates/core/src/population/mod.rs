//! Population model: clusters per-patient basis kernels and summarizes each
//! cluster into one population basis kernel with an aggregated weight matrix.
//!
//! Pipeline: drop nearly-zero basis kernels, featurize the rest by their
//! values at lags 1..72 h, cluster the features with a BIC-selected Gaussian
//! mixture, then summarize each cluster with density-weighted means (B
//! entries, `mu`, `v`) and re-factor the aggregated B into `(A, lambda)`.

pub mod gmm;
pub mod kde;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::kernel::{build_b, sm_basis_kernel, BasisKernelParams, CoregionalizationWeights, StructuredKernel};
use crate::trainer::{FitResult, NEAR_ZERO};

pub use gmm::{fit_gmm, gmm_cluster_bic, Clustering, CovarianceType, Gmm, GmmConfig};
pub use kde::{density_weighted_mean, grid_mode_search, kde_silverman, silverman_bandwidth, Kde};

/// Number of hourly lags in a kernel feature.
pub const FEATURE_LAGS: usize = 72;

/// Kernel values at lags 1..=72 hours.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelFeature {
    pub values: Vec<f64>,
    pub patient_id: String,
    pub q: usize,
}

pub fn kernel_features(params: &BasisKernelParams) -> Vec<f64> {
    (1..=FEATURE_LAGS).map(|tau| sm_basis_kernel(tau as f64, params)).collect()
}

/// One basis kernel of one patient, as seen by the aggregation step.
#[derive(Clone, Debug)]
pub struct ClusterMember {
    pub patient_id: String,
    pub q: usize,
    pub b: DMatrix<f64>,
    pub params: BasisKernelParams,
}

/// Sums member B matrices within each patient, then takes entrywise
/// density-weighted means across patients. `mu` and `v` are density-weighted
/// means over all member values.
pub fn aggregate_cluster(members: &[ClusterMember]) -> Result<(DMatrix<f64>, BasisKernelParams)> {
    let first = members.first().ok_or_else(|| Error::domain("cannot aggregate an empty cluster"))?;
    let d = first.b.nrows();
    if members.iter().any(|m| m.b.shape() != (d, d)) {
        return Err(Error::domain("cluster members disagree on the covariate count"));
    }
    let mut per_patient: BTreeMap<&str, DMatrix<f64>> = BTreeMap::new();
    for m in members {
        *per_patient.entry(&m.patient_id).or_insert_with(|| DMatrix::zeros(d, d)) += &m.b;
    }
    let sums: Vec<&DMatrix<f64>> = per_patient.values().collect();
    let mut b = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let entries: Vec<f64> = sums.iter().map(|s| s[(i, j)]).collect();
            let v = density_weighted_mean(&entries)?;
            b[(i, j)] = v;
            b[(j, i)] = v;
        }
    }
    let mus: Vec<f64> = members.iter().map(|m| m.params.mu).collect();
    let vs: Vec<f64> = members.iter().map(|m| m.params.v).collect();
    let params = BasisKernelParams::new(density_weighted_mean(&mus)?, density_weighted_mean(&vs)?)?;
    Ok((b, params))
}

/// Factors a symmetric `B` as `A A^T + diag(lambda)` from its top-`r`
/// eigenpairs. Each column of `A` has its largest-magnitude entry positive;
/// `lambda` is the clipped diagonal residual.
pub fn decompose_b(b: &DMatrix<f64>, r: usize) -> Result<CoregionalizationWeights> {
    let d = b.nrows();
    if b.ncols() != d {
        return Err(Error::domain("B must be square"));
    }
    let scale = b.amax().max(1.0);
    if (b - b.transpose()).amax() > 1e-12 * scale {
        return Err(Error::domain("B must be symmetric"));
    }
    if r == 0 {
        return Err(Error::domain("R must be at least 1"));
    }
    let eig = SymmetricEigen::new(b.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mut a = DMatrix::zeros(d, r);
    for (col, &k) in order.iter().take(r).enumerate() {
        let s = eig.eigenvalues[k].max(0.0).sqrt();
        let mut u = eig.eigenvectors.column(k).into_owned();
        let pivot = u.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            u.neg_mut();
        }
        a.set_column(col, &(u * s));
    }
    let residual = b - &a * a.transpose();
    let lambda = DVector::from_fn(d, |i, _| residual[(i, i)].max(0.0));
    Ok(CoregionalizationWeights { a, lambda })
}

/// One population basis kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationCluster {
    pub basis: BasisKernelParams,
    /// Aggregated weight matrix before factoring.
    pub b: DMatrix<f64>,
    /// Factors of `b`; loadings at or below the near-zero threshold are exactly 0.
    pub weights: CoregionalizationWeights,
    pub member_count: usize,
    /// Fraction of patients with a member in this cluster.
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationConfig {
    /// Largest component count tried; `None` uses the per-patient Q.
    pub q_max: Option<usize>,
    /// Columns of every population `A`; `None` uses the widest patient `A`.
    pub r: Option<usize>,
    pub gmm: GmmConfig,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self { q_max: None, r: None, gmm: GmmConfig { covariance: CovarianceType::Diagonal, ..GmmConfig::default() } }
    }
}

/// Clustered population-level kernel prior.
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationModel {
    pub covariate_names: Vec<String>,
    pub clusters: Vec<PopulationCluster>,
    /// Per-covariate noise variance in standardized units.
    pub noise_var: DVector<f64>,
    /// Population-level standardization used when imputing.
    pub standardization: Standardization,
    pub n_patients: usize,
    pub config: PopulationConfig,
    pub seed: u64,
}

impl PopulationModel {
    /// Wraps a single kernel as a population model with full coverage.
    pub fn from_kernel(k: &StructuredKernel, standardization: Standardization, covariate_names: Vec<String>) -> Result<Self> {
        k.validate()?;
        if covariate_names.len() != k.n_covariates() || standardization.mean.len() != k.n_covariates() {
            return Err(Error::domain("covariate names and standardization must match the kernel"));
        }
        let clusters = k
            .basis
            .iter()
            .zip(&k.weights)
            .map(|(p, w)| PopulationCluster { basis: *p, b: build_b(w), weights: w.clone(), member_count: 1, coverage: 1.0 })
            .collect();
        Ok(Self {
            covariate_names,
            clusters,
            noise_var: k.noise_var.clone(),
            standardization,
            n_patients: 1,
            config: PopulationConfig::default(),
            seed: 0,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.noise_var.len()
    }

    /// The population kernel in standardized units.
    pub fn kernel(&self) -> Result<StructuredKernel> {
        StructuredKernel::new(
            self.clusters.iter().map(|c| c.basis).collect(),
            self.clusters.iter().map(|c| c.weights.clone()).collect(),
            self.noise_var.clone(),
        )
    }

    /// Per cluster, which loadings are exactly zero.
    pub fn frozen_mask(&self) -> Vec<DMatrix<bool>> {
        self.clusters.iter().map(|c| c.weights.a.map(|a| a == 0.0)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters.is_empty() {
            return Err(Error::Model("population model has no clusters".into()));
        }
        if self.covariate_names.len() != self.n_covariates() || self.standardization.mean.len() != self.n_covariates() {
            return Err(Error::Model("population model covariate counts disagree".into()));
        }
        self.kernel().map(|_| ()).map_err(|e| Error::Model(e.to_string()))
    }
}

/// Builds the population model from per-patient fits. Fits are processed in
/// patient-id order, so the result does not depend on their input order.
pub fn build_population_model(fits: &[FitResult], cfg: &PopulationConfig, seed: u64) -> Result<PopulationModel> {
    if fits.is_empty() {
        return Err(Error::domain("population model needs at least one fit"));
    }
    let mut fits: Vec<&FitResult> = fits.iter().collect();
    fits.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    let d = fits[0].kernel.n_covariates();
    if fits.iter().any(|f| f.kernel.n_covariates() != d) {
        return Err(Error::domain("fits disagree on the covariate count"));
    }
    let q_max = cfg.q_max.unwrap_or_else(|| fits.iter().map(|f| f.kernel.n_basis()).max().unwrap_or(1));
    let r = cfg.r.unwrap_or_else(|| fits.iter().flat_map(|f| f.kernel.weights.iter().map(|w| w.a.ncols())).max().unwrap_or(1));

    let members: Vec<ClusterMember> = fits
        .iter()
        .flat_map(|f| {
            f.kernel.basis.iter().zip(&f.kernel.weights).enumerate().filter_map(|(q, (p, w))| {
                let b = build_b(w);
                (b.norm() >= NEAR_ZERO).then(|| ClusterMember { patient_id: f.patient_id.clone(), q, b, params: *p })
            })
        })
        .collect();
    if members.is_empty() {
        return Err(Error::Model("every basis kernel is nearly zero".into()));
    }
    let features: Vec<Vec<f64>> = members.par_iter().map(|m| kernel_features(&m.params)).collect();
    let clustering = gmm_cluster_bic(&features, q_max, &cfg.gmm, seed)?;
    log::info!("selected {} clusters; BIC by k: {:?}", clustering.n_clusters, clustering.bic);

    let clusters = (0..clustering.n_clusters)
        .into_par_iter()
        .map(|c| {
            let group: Vec<ClusterMember> = members
                .iter()
                .zip(&clustering.assignment)
                .filter(|(_, &l)| l == c)
                .map(|(m, _)| m.clone())
                .collect();
            let (b, basis) = aggregate_cluster(&group)?;
            let mut weights = decompose_b(&b, r)?;
            weights.a.apply(|a| {
                if a.abs() <= NEAR_ZERO {
                    *a = 0.0
                }
            });
            let patients: std::collections::BTreeSet<&str> = group.iter().map(|m| m.patient_id.as_str()).collect();
            Ok(PopulationCluster {
                basis,
                b,
                weights,
                member_count: group.len(),
                coverage: patients.len() as f64 / fits.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut noise = Vec::with_capacity(d);
    let mut mean = Vec::with_capacity(d);
    let mut sd = Vec::with_capacity(d);
    for j in 0..d {
        let summarize = |f: &dyn Fn(&FitResult) -> f64| density_weighted_mean(&fits.iter().map(|x| f(x)).collect::<Vec<_>>());
        noise.push(summarize(&|f| f.kernel.noise_var[j])?);
        mean.push(summarize(&|f| f.standardization.mean[j])?);
        sd.push(summarize(&|f| f.standardization.sd[j])?);
    }
    Ok(PopulationModel {
        covariate_names: fits[0].covariate_names.clone(),
        clusters,
        noise_var: DVector::from_vec(noise),
        standardization: Standardization { mean, sd },
        n_patients: fits.len(),
        config: PopulationConfig { q_max: Some(q_max), r: Some(r), gmm: cfg.gmm.clone() },
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_examples() {
        assert!(kernel_features(&BasisKernelParams::new(0.0, 0.0).unwrap()).iter().all(|v| *v == 1.0));
        let daily = kernel_features(&BasisKernelParams::new(1.0 / 24.0, 0.0).unwrap());
        for lag in [24, 48, 72] {
            assert!((daily[lag - 1] - 1.0).abs() < 1e-12);
        }
        let short = kernel_features(&BasisKernelParams::from_period_length_scale(f64::INFINITY, 6.0).unwrap());
        assert!(short[23] < 0.01);
    }

    #[test]
    fn decompose_examples() {
        let eye = DMatrix::<f64>::identity(3, 3);
        let w = decompose_b(&eye, 3).unwrap();
        assert!((build_b(&w) - &eye).norm() < 1e-14);
        let v = DVector::from_vec(vec![0.5, -2.0, 1.0]);
        let w = decompose_b(&(&v * v.transpose()), 1).unwrap();
        assert!((w.a.column(0) + &v).norm() < 1e-12, "{}", w.a);
        assert!(w.lambda.iter().all(|l| l.abs() < 1e-12));
        assert!(decompose_b(&DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]), 2).is_err());
    }

    #[test]
    fn aggregation_sums_within_patient() {
        let p = BasisKernelParams::new(0.04, 0.001).unwrap();
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let m = |id: &str| ClusterMember { patient_id: id.into(), q: 0, b: b.clone(), params: p };
        let (agg, params) = aggregate_cluster(&[m("a"), m("a")]).unwrap();
        assert_eq!(agg, &b * 2.0);
        assert_eq!(params, p);
    }
}
