//! Per-patient kernel fitting.
//!
//! A fit alternates two steps until the penalized objective stops moving:
//! closed-form updates of the shrinkage scales, then a scaled-conjugate-gradient
//! run over the kernel hyperparameters with the scales held fixed.

pub mod layout;
pub mod objective;
pub mod scg;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ObservationSet, Standardization};
use crate::error::{Error, Result};
use crate::kernel::{BasisKernelParams, CoregionalizationWeights, IndexedInput, StructuredKernel};
use crate::shrinkage::{PriorConfig, ShrinkageState};

pub use layout::{ParamId, ParamLayout};
pub use objective::{
    gradients, gradients_contracted, log_marginal_likelihood, objective, Evaluation, GpFit, GradientRoute, Problem,
};
pub use scg::{ScgOptions, ScgResult};

/// Threshold below which a weight counts as zero.
pub const NEAR_ZERO: f64 = 1e-3;

/// Knobs for [`fit_patient`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Number of basis kernels.
    pub q: usize,
    /// Columns of every `A_q`.
    pub r: usize,
    pub max_outer_iters: usize,
    /// Absolute change of the objective that ends the outer loop.
    pub convergence_tol: f64,
    pub n_random_init: usize,
    pub length_scale_init_range: (f64, f64),
    pub period_init_range: (f64, f64),
    pub a_init_range: (f64, f64),
    /// Initial noise variance in standardized units.
    pub noise_init: f64,
    /// Initial diagonal of every `B_q`; must be positive, since zero is a
    /// stationary point of the optimizer coordinates.
    pub lambda_init: f64,
    pub eta_grid: Vec<f64>,
    /// Use the hierarchical shrinkage prior; when off the objective is the
    /// plain marginal likelihood.
    pub sparse_prior: bool,
    pub prior: PriorConfig,
    pub scg_max_iters: usize,
    pub scg_grad_tol: f64,
    pub gradient_route: GradientRoute,
    /// z-score each covariate before fitting.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            q: 5,
            r: 8,
            max_outer_iters: 30,
            convergence_tol: 0.005,
            n_random_init: 1000,
            length_scale_init_range: (6.0, 72.0),
            period_init_range: (24.0, 72.0),
            a_init_range: (-1.5, 1.5),
            noise_init: 0.1,
            lambda_init: 0.01,
            eta_grid: vec![0.01, 0.1, 1.0],
            sparse_prior: true,
            prior: PriorConfig::default(),
            scg_max_iters: 50,
            scg_grad_tol: 1e-4,
            gradient_route: GradientRoute::Contracted,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo < hi;
        if self.q == 0 || self.r == 0 || self.max_outer_iters == 0 || self.n_random_init == 0 {
            return Err(Error::domain("q, r, max_outer_iters and n_random_init must be at least 1"));
        }
        if !range_ok(self.length_scale_init_range) || self.length_scale_init_range.0 <= 0.0 {
            return Err(Error::domain("length-scale init range must be positive and non-degenerate"));
        }
        if !range_ok(self.period_init_range) || self.period_init_range.0 <= 0.0 {
            return Err(Error::domain("period init range must be positive and non-degenerate"));
        }
        if !range_ok(self.a_init_range) {
            return Err(Error::domain("A init range must be non-degenerate"));
        }
        if !(self.noise_init > 0.0) || !(self.lambda_init > 0.0) || !(self.convergence_tol > 0.0) {
            return Err(Error::domain("noise_init, lambda_init and convergence_tol must be positive"));
        }
        self.prior.validate()
    }
}

/// Outcome of fitting one patient. The kernel lives in standardized units.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub patient_id: String,
    pub covariate_names: Vec<String>,
    pub kernel: StructuredKernel,
    /// Latent prior scales; `None` for fits without the shrinkage prior.
    pub shrinkage: Option<ShrinkageState>,
    /// Objective after every outer iteration.
    pub objective_trace: Vec<f64>,
    pub log_marginal: f64,
    pub converged: bool,
    pub standardization: Standardization,
    pub n_observations: usize,
    pub seed: u64,
}

impl FitResult {
    pub fn iterations(&self) -> usize {
        self.objective_trace.len()
    }
}

/// Draws candidate kernels and returns the one with the highest marginal
/// likelihood on `obs`; the first index wins ties.
pub fn random_restart_init(obs: &ObservationSet, cfg: &TrainConfig, seed: u64) -> Result<StructuredKernel> {
    let candidates = random_candidates(obs.n_covariates(), cfg, seed)?;
    let inputs = obs.inputs();
    let y = obs.targets();
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|k| GpFit::new(inputs.clone(), &y, k).map(|f| f.log_marginal).unwrap_or(f64::NEG_INFINITY))
        .collect();
    let mut best = None;
    for (i, s) in scores.iter().enumerate() {
        if s.is_finite() && best.is_none_or(|(_, b)| *s > b) {
            best = Some((i, *s));
        }
    }
    let (idx, _) = best.ok_or_else(|| Error::numeric("no random initial kernel could be evaluated"))?;
    Ok(candidates.into_iter().nth(idx).expect("index in range"))
}

/// The candidate pool used by [`random_restart_init`], in draw order.
pub fn random_candidates(n_covariates: usize, cfg: &TrainConfig, seed: u64) -> Result<Vec<StructuredKernel>> {
    cfg.validate()?;
    if n_covariates == 0 {
        return Err(Error::domain("need at least one covariate"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ls_lo, ls_hi) = cfg.length_scale_init_range;
    let (p_lo, p_hi) = cfg.period_init_range;
    let (a_lo, a_hi) = cfg.a_init_range;
    (0..cfg.n_random_init)
        .map(|_| {
            let mut basis = Vec::with_capacity(cfg.q);
            let mut weights = Vec::with_capacity(cfg.q);
            for _ in 0..cfg.q {
                let ls = rng.random_range(ls_lo..ls_hi);
                let period = rng.random_range(p_lo..p_hi);
                basis.push(BasisKernelParams::from_period_length_scale(period, ls)?);
                let a = DMatrix::from_fn(n_covariates, cfg.r, |_, _| rng.random_range(a_lo..a_hi));
                weights.push(CoregionalizationWeights::new(a, DVector::from_element(n_covariates, cfg.lambda_init))?);
            }
            StructuredKernel::new(basis, weights, DVector::from_element(n_covariates, cfg.noise_init))
        })
        .collect()
}

/// Optimizer coordinates: the parameter layout with `mu` and `v` on a log
/// scale and each `lambda` written as the square of a free coordinate. Negative
/// `lambda` lets the Gram matrix approach singularity, where the log
/// determinant term grows without bound.
#[derive(Clone, Debug)]
pub(crate) struct OptimizerSpace {
    pub layout: ParamLayout,
}

const LOG_BOUND: f64 = 60.0;
const NOISE_FLOOR: f64 = 1e-8;

impl OptimizerSpace {
    pub fn new(layout: &ParamLayout) -> Self {
        Self { layout: layout.clone() }
    }

    fn n_log(&self) -> usize {
        2 * self.layout.n_basis()
    }

    fn lambda_range(&self) -> std::ops::Range<usize> {
        let n = self.layout.n_basis() * self.layout.n_covariates();
        if n == 0 {
            return 0..0;
        }
        let start = self.layout.index(ParamId::Lambda { q: 0, d: 0 });
        start..start + n
    }

    pub fn to_coords(&self, k: &StructuredKernel) -> DVector<f64> {
        let mut z = self.layout.pack(k);
        for i in 0..self.n_log() {
            z[i] = z[i].max(1e-20).ln();
        }
        for i in self.lambda_range() {
            z[i] = z[i].max(0.0).sqrt();
        }
        z
    }

    pub fn kernel(&self, z: &DVector<f64>) -> Result<StructuredKernel> {
        let mut x = z.clone();
        for i in 0..self.n_log() {
            if !(z[i].abs() < LOG_BOUND) {
                return Err(Error::numeric("spectral parameter left the supported range"));
            }
            x[i] = z[i].exp();
        }
        for i in self.lambda_range() {
            x[i] = z[i] * z[i];
        }
        let k = self.layout.unpack(x.as_slice())?;
        if k.noise_var.iter().any(|s| *s < NOISE_FLOOR || *s > 1e8) {
            return Err(Error::numeric("noise variance left the supported range"));
        }
        Ok(k)
    }

    /// Converts a gradient in layout coordinates to optimizer coordinates.
    pub fn chain(&self, k: &StructuredKernel, g: &DVector<f64>) -> DVector<f64> {
        let mut out = g.clone();
        for q in 0..self.layout.n_basis() {
            out[self.layout.index(ParamId::Mu(q))] *= k.basis[q].mu;
            out[self.layout.index(ParamId::V(q))] *= k.basis[q].v;
            for d in 0..self.layout.n_covariates() {
                let i = self.layout.index(ParamId::Lambda { q, d });
                out[i] *= 2.0 * k.weights[q].lambda[d].max(0.0).sqrt();
            }
        }
        out
    }
}

/// Maximizes the objective of `problem` over the kernel hyperparameters with
/// SCG, starting from `start`.
pub fn optimize_kernel(
    problem: &Problem<'_>,
    start: &StructuredKernel,
    route: GradientRoute,
    opts: &ScgOptions,
) -> Result<(StructuredKernel, Evaluation, ScgResult)> {
    let space = OptimizerSpace::new(&ParamLayout::for_kernel(start));
    let z0 = space.to_coords(start);
    let res = scg::minimize(
        |z| {
            let k = space.kernel(z)?;
            let ev = problem.evaluate(&k, Some(route))?;
            let g = space.chain(&k, ev.gradient.as_ref().expect("requested"));
            Ok((-ev.objective, -g))
        },
        z0,
        opts,
    )?;
    let kernel = space.kernel(&res.x)?;
    let ev = problem.evaluate(&kernel, None)?;
    Ok((kernel, ev, res))
}

/// Fits a structured kernel to one patient.
pub fn fit_patient(obs: &ObservationSet, cfg: &TrainConfig, seed: u64) -> Result<FitResult> {
    cfg.validate()?;
    obs.validate()?;
    if obs.is_empty() {
        return Err(Error::domain(format!("patient {} has no observations", obs.patient_id)));
    }
    let standardization =
        if cfg.standardize { Standardization::fit(obs) } else { Standardization::identity(obs.n_covariates()) };
    let data = standardization.apply(obs);
    let mut kernel = random_restart_init(&data, cfg, seed).map_err(|e| Error::Fit { iteration: 0, source: Box::new(e) })?;
    let mut shrinkage = cfg.sparse_prior.then(|| ShrinkageState::new(&kernel));
    let opts = ScgOptions { max_iters: cfg.scg_max_iters, grad_tol: cfg.scg_grad_tol, ..Default::default() };

    let mut trace = Vec::with_capacity(cfg.max_outer_iters);
    let mut converged = false;
    let mut log_marginal = f64::NAN;
    for iteration in 0..cfg.max_outer_iters {
        let wrap = |e: Error| Error::Fit { iteration, source: Box::new(e) };
        if let Some(s) = shrinkage.as_mut() {
            s.update(&kernel, &cfg.prior);
        }
        let problem = Problem::new(&data, shrinkage.as_ref().map(|s| (s, &cfg.prior)));
        let (next, ev, _) = optimize_kernel(&problem, &kernel, cfg.gradient_route, &opts).map_err(wrap)?;
        kernel = next;
        log_marginal = ev.log_marginal;
        let prev = trace.last().copied();
        trace.push(ev.objective);
        log::debug!("patient {} outer {iteration}: objective {:.6}", obs.patient_id, ev.objective);
        if let Some(prev) = prev {
            if (ev.objective - prev).abs() < cfg.convergence_tol {
                converged = true;
                break;
            }
        }
    }
    Ok(FitResult {
        patient_id: obs.patient_id.clone(),
        covariate_names: obs.covariate_names.clone(),
        kernel,
        shrinkage,
        objective_trace: trace,
        log_marginal,
        converged,
        standardization,
        n_observations: obs.len(),
        seed,
    })
}

/// Number of hyperparameters that are not nearly zero: `|a| > 1e-3`,
/// `|lambda| > 1e-3`, plus `mu` and `v` of each basis kernel whose weight
/// matrix is not nearly zero.
pub fn count_nonzero_params(k: &StructuredKernel) -> usize {
    k.weights
        .iter()
        .map(|w| {
            let b = w.b();
            let active = if b.norm() >= NEAR_ZERO { 2 } else { 0 };
            active
                + w.a.iter().filter(|a| a.abs() > NEAR_ZERO).count()
                + w.lambda.iter().filter(|l| l.abs() > NEAR_ZERO).count()
        })
        .sum()
}

/// `(log marginal likelihood, BIC)` with `BIC = k log T - 2 log L`.
pub fn model_selection_scores(result: &FitResult, n_params_nonzero: usize, n_observations: usize) -> Result<(f64, f64)> {
    if n_observations == 0 {
        return Err(Error::domain("BIC needs at least one observation"));
    }
    let bic = n_params_nonzero as f64 * (n_observations as f64).ln() - 2.0 * result.log_marginal;
    Ok((result.log_marginal, bic))
}

/// Chooses the global shrinkage rate from `cfg.eta_grid` by held-out error:
/// each patient is fit on its first `train_fraction` of time and scored by
/// the mean absolute error of the posterior mean on the rest (standardized
/// units). Ties go to the earlier grid entry.
pub fn select_eta(patients: &[ObservationSet], cfg: &TrainConfig, train_fraction: f64, seed: u64) -> Result<(f64, Vec<f64>)> {
    if cfg.eta_grid.is_empty() || patients.is_empty() {
        return Err(Error::domain("eta selection needs a grid and at least one patient"));
    }
    let mut scores = Vec::with_capacity(cfg.eta_grid.len());
    for &eta in &cfg.eta_grid {
        let mut c = cfg.clone();
        c.prior.eta = eta;
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, p) in patients.iter().enumerate() {
            let stream = p.to_stream();
            if stream.len() < 2 {
                continue;
            }
            let (t0, t1) = (stream[0].time, stream[stream.len() - 1].time);
            let cut = t0 + train_fraction * (t1 - t0);
            let train = p.window(f64::NEG_INFINITY, cut);
            if train.is_empty() {
                continue;
            }
            let fit = fit_patient(&train, &c, seed.wrapping_add(i as u64))?;
            let history = fit.standardization.apply(&train);
            let targets: Vec<IndexedInput> =
                stream.iter().filter(|o| o.time > cut).map(|o| IndexedInput::new(o.covariate, o.time)).collect();
            let (means, _) = crate::online::posterior_predict_batch(&history, &fit.kernel, &targets)?;
            for (o, m) in stream.iter().filter(|o| o.time > cut).zip(means.iter()) {
                total += (m - fit.standardization.forward(o.covariate, o.value)).abs();
                count += 1;
            }
        }
        scores.push(if count > 0 { total / count as f64 } else { f64::INFINITY });
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = i;
        }
    }
    Ok((cfg.eta_grid[best], scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidates_respect_ranges_and_seed() {
        let cfg = TrainConfig { q: 3, r: 2, n_random_init: 50, ..Default::default() };
        let a = random_candidates(2, &cfg, 9).unwrap();
        let b = random_candidates(2, &cfg, 9).unwrap();
        assert_eq!(a, b);
        for k in &a {
            for p in &k.basis {
                let (period, ls) = p.features();
                assert!((24.0 - 1e-9..=72.0 + 1e-9).contains(&period));
                assert!((6.0 - 1e-9..=72.0 + 1e-9).contains(&ls));
            }
            for w in &k.weights {
                assert!(w.a.iter().all(|x| (-1.5..=1.5).contains(x)));
            }
        }
    }

    #[test]
    fn bic_formula() {
        let k = random_candidates(1, &TrainConfig { q: 1, r: 1, n_random_init: 1, ..Default::default() }, 1)
            .unwrap()
            .remove(0);
        let fit = FitResult {
            patient_id: "p".into(),
            covariate_names: vec!["c0".into()],
            kernel: k,
            shrinkage: None,
            objective_trace: vec![],
            log_marginal: -10.0,
            converged: true,
            standardization: Standardization::identity(1),
            n_observations: 1,
            seed: 0,
        };
        assert_eq!(model_selection_scores(&fit, 5, 1).unwrap().1, 20.0);
        let (_, b3) = model_selection_scores(&fit, 3, 50).unwrap();
        let (_, b5) = model_selection_scores(&fit, 5, 50).unwrap();
        assert!(b3 < b5);
        assert!(model_selection_scores(&fit, 3, 0).is_err());
    }

    #[test]
    fn nonzero_count() {
        let k = StructuredKernel::new(
            vec![BasisKernelParams::new(0.1, 0.1).unwrap(), BasisKernelParams::new(0.2, 0.1).unwrap()],
            vec![
                CoregionalizationWeights::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1e-4]), DVector::from_vec(vec![0.0, 0.2])).unwrap(),
                CoregionalizationWeights::new(DMatrix::from_row_slice(2, 2, &[1e-5, 0.0, 0.0, 0.0]), DVector::zeros(2)).unwrap(),
            ],
            DVector::from_element(2, 0.1),
        )
        .unwrap();
        // first block: mu, v, two loadings, one lambda; second block nearly zero
        assert_eq!(count_nonzero_params(&k), 5);
    }
}
