//! Comparison predictors: last-value carry-forward, a population kernel with
//! cross-covariate terms removed, and per-covariate univariate GPs.

use nalgebra::{DMatrix, DVector};

use crate::data::{ObservationSet, Standardization};
use crate::error::{Error, Result};
use crate::kernel::{BasisKernelParams, CoregionalizationWeights, StructuredKernel};
use crate::online::{run_online, OnlineConfig, PredictionRecord};
use crate::population::{density_weighted_mean, grid_mode_search, PopulationModel};
use crate::trainer::{fit_patient, FitResult, TrainConfig};

/// Predicts each observation by the previous observation of the same
/// covariate; the first one gets `prior_mean[d]`. Variances are `NaN`.
pub fn naive_one_lag(patient: &ObservationSet, prior_mean: &[f64]) -> Result<Vec<PredictionRecord>> {
    if prior_mean.len() != patient.n_covariates() {
        return Err(Error::domain("need one prior mean per covariate"));
    }
    let mut last: Vec<Option<f64>> = vec![None; patient.n_covariates()];
    Ok(patient
        .to_stream()
        .into_iter()
        .map(|o| {
            let pred = last[o.covariate].unwrap_or(prior_mean[o.covariate]);
            last[o.covariate] = Some(o.value);
            PredictionRecord::new(o.covariate, o.time, pred, f64::NAN, o.value)
        })
        .collect())
}

/// Same basis kernels, but every B keeps only its diagonal (moved into
/// `lambda`), so covariates are modeled independently.
pub fn independent_kernel(k: &StructuredKernel) -> Result<StructuredKernel> {
    let weights = k
        .weights
        .iter()
        .map(|w| {
            let diag = DVector::from_fn(w.a.nrows(), |d, _| w.a.row(d).norm_squared() + w.lambda[d]);
            CoregionalizationWeights::new(DMatrix::zeros(w.a.nrows(), w.a.ncols()), diag)
        })
        .collect::<Result<Vec<_>>>()?;
    StructuredKernel::new(k.basis.clone(), weights, k.noise_var.clone())
}

/// Population model for one covariate from single-kernel univariate fits:
/// every scalar is the grid mode of its KDE.
pub fn univariate_population(fits: &[FitResult], grid: usize, covariate_name: &str) -> Result<PopulationModel> {
    if fits.is_empty() {
        return Err(Error::domain("need at least one univariate fit"));
    }
    if fits.iter().any(|f| f.kernel.n_covariates() != 1 || f.kernel.n_basis() != 1) {
        return Err(Error::domain("univariate population needs D = 1, Q = 1 fits"));
    }
    let collect = |f: &dyn Fn(&FitResult) -> f64| fits.iter().map(f).collect::<Vec<f64>>();
    let mu = grid_mode_search(&collect(&|f| f.kernel.basis[0].mu), grid)?;
    let v = grid_mode_search(&collect(&|f| f.kernel.basis[0].v), grid)?;
    let b = grid_mode_search(&collect(&|f| f.kernel.prior_variance(0)), grid)?;
    let noise = grid_mode_search(&collect(&|f| f.kernel.noise_var[0]), grid)?;
    let mean = density_weighted_mean(&collect(&|f| f.standardization.mean[0]))?;
    let sd = density_weighted_mean(&collect(&|f| f.standardization.sd[0]))?;
    let kernel = StructuredKernel::new(
        vec![BasisKernelParams::new(mu, v)?],
        vec![CoregionalizationWeights::new(DMatrix::from_element(1, 1, b.max(0.0).sqrt()), DVector::zeros(1))?],
        DVector::from_element(1, noise.max(1e-8)),
    )?;
    PopulationModel::from_kernel(&kernel, Standardization { mean: vec![mean], sd: vec![sd] }, vec![covariate_name.into()])
}

/// Fits per-covariate univariate populations from training patients.
pub fn fit_univariate_populations(
    training: &[ObservationSet],
    cfg: &TrainConfig,
    grid: usize,
    seed: u64,
) -> Result<Vec<PopulationModel>> {
    let first = training.first().ok_or_else(|| Error::domain("need at least one training patient"))?;
    let ucfg = TrainConfig { q: 1, r: 1, ..cfg.clone() };
    (0..first.n_covariates())
        .map(|d| {
            let fits = training
                .iter()
                .enumerate()
                .filter(|(_, p)| !p.channels[d].is_empty())
                .map(|(i, p)| fit_patient(&p.select(d), &ucfg, seed.wrapping_add(i as u64)))
                .collect::<Result<Vec<_>>>()?;
            univariate_population(&fits, grid, &first.covariate_names[d])
        })
        .collect()
}

/// Runs one univariate imputer per covariate and merges the records in time order.
pub fn run_univariate(patient: &ObservationSet, models: &[PopulationModel], cfg: &OnlineConfig) -> Result<Vec<PredictionRecord>> {
    if models.len() != patient.n_covariates() {
        return Err(Error::domain("need one univariate model per covariate"));
    }
    let mut out = Vec::with_capacity(patient.len());
    for (d, m) in models.iter().enumerate() {
        out.extend(run_online(&patient.select(d), m, cfg)?.into_iter().map(|r| PredictionRecord { covariate: d, ..r }));
    }
    out.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.covariate.cmp(&b.covariate)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_lag_arithmetic() {
        let mut p = ObservationSet::new("p", vec!["a".into(), "b".into()]);
        for i in 0..5 {
            p.push(0, i as f64, 2.0 * i as f64).unwrap();
            p.push(1, i as f64 + 0.5, 7.0).unwrap();
        }
        let r = naive_one_lag(&p, &[0.0, 3.0]).unwrap();
        let a: Vec<_> = r.iter().filter(|x| x.covariate == 0).skip(1).map(|x| (x.predicted_mean - x.actual).abs()).collect();
        assert!(a.iter().all(|e| *e == 2.0));
        let b: Vec<_> = r.iter().filter(|x| x.covariate == 1).map(|x| x.predicted_mean).collect();
        assert_eq!(b, vec![3.0, 7.0, 7.0, 7.0, 7.0]);
    }

    #[test]
    fn independent_kernel_keeps_diagonal() {
        let k = StructuredKernel::new(
            vec![BasisKernelParams::new(0.05, 0.001).unwrap()],
            vec![CoregionalizationWeights::new(DMatrix::from_row_slice(2, 1, &[1.0, -0.5]), DVector::from_vec(vec![0.1, 0.2])).unwrap()],
            DVector::from_vec(vec![0.1, 0.1]),
        )
        .unwrap();
        let ind = independent_kernel(&k).unwrap();
        let b = ind.b_matrices().remove(0);
        assert_eq!(b, DMatrix::from_row_slice(2, 2, &[1.1, 0.0, 0.0, 0.45]));
    }
}
