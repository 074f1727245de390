//! Online one-step-ahead imputation.
//!
//! Each arriving observation is first predicted from the data available at
//! its timestamp (everything strictly earlier plus other covariates measured
//! at the same time), then added to the history. The patient kernel starts
//! from the population model and takes one momentum step per observation on
//! the penalized objective of the trailing window. Steps are taken in the
//! trainer's optimizer coordinates (`log mu`, `log v`, `sqrt lambda`, raw
//! loadings), where a fixed learning rate means the same thing for every
//! basis kernel. Loadings that are zero in the population model stay zero,
//! and noise variances are held fixed.

pub mod baselines;
pub mod metrics;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Observation, ObservationSet, Standardization};
use crate::error::{Error, Result};
use crate::kernel::{cross_gram, gram_matrix, IndexedInput, StructuredKernel};
use crate::linalg::SpdFactor;
use crate::population::PopulationModel;
use crate::shrinkage::{PriorConfig, ShrinkageState};
use crate::trainer::{GradientRoute, OptimizerSpace, ParamId, ParamLayout, Problem};

pub use baselines::{independent_kernel, naive_one_lag, univariate_population};
pub use metrics::{mae_for, metrics, paired_t_test, CovariateMetrics, TTest, Z95};

/// Which history conditions a prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionHistory {
    /// Everything observed so far (up to `history_limit` most recent points).
    #[default]
    Full,
    /// Only the trailing update window.
    Window,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineConfig {
    pub window_hours: f64,
    pub momentum: f64,
    pub learning_rate: f64,
    /// Cap on the number of history points used for a prediction.
    pub history_limit: usize,
    pub prediction_history: PredictionHistory,
    /// Turn off to keep the population kernel fixed.
    pub update_kernel: bool,
    pub prior: PriorConfig,
    /// Sweeps of the closed-form scale updates used to set the prior state
    /// from the population loadings.
    pub shrinkage_sweeps: usize,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            window_hours: 72.0,
            momentum: 0.9,
            learning_rate: 1e-5,
            history_limit: 1000,
            prediction_history: PredictionHistory::Full,
            update_kernel: true,
            prior: PriorConfig::default(),
            shrinkage_sweeps: 10,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_hours > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.learning_rate >= 0.0) {
            return Err(Error::domain("window must be positive, momentum in [0, 1), learning rate non-negative"));
        }
        if self.history_limit == 0 {
            return Err(Error::domain("history_limit must be at least 1"));
        }
        self.prior.validate()
    }
}

/// One emitted prediction, in original units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub covariate: usize,
    pub time: f64,
    pub predicted_mean: f64,
    /// `NaN` for predictors without a variance.
    pub predicted_var: f64,
    pub actual: f64,
    pub in_95_region: bool,
}

impl PredictionRecord {
    pub fn new(covariate: usize, time: f64, mean: f64, var: f64, actual: f64) -> Self {
        let in_95_region = var == f64::INFINITY || (var.is_finite() && (actual - mean).abs() <= Z95 * var.sqrt());
        Self { covariate, time, predicted_mean: mean, predicted_var: var, actual, in_95_region }
    }
}

/// GP predictive mean and variance (noise included) at several query points.
/// With no history this is the prior: mean 0, variance `sum_q B_q[d,d] + sigma_d^2`.
pub fn condition(
    inputs: &[IndexedInput],
    y: &DVector<f64>,
    k: &StructuredKernel,
    queries: &[IndexedInput],
) -> Result<(DVector<f64>, DVector<f64>)> {
    let prior_var = DVector::from_fn(queries.len(), |i, _| {
        let d = queries[i].covariate;
        k.prior_variance(d) + k.noise_var[d]
    });
    if inputs.is_empty() {
        return Ok((DVector::zeros(queries.len()), prior_var));
    }
    let factor = SpdFactor::new(&gram_matrix(inputs, k, true))?;
    let alpha = factor.solve_vec(y);
    let ks: DMatrix<f64> = cross_gram(inputs, queries, k);
    let mean = ks.tr_mul(&alpha);
    let mut var = prior_var;
    for j in 0..queries.len() {
        let v = factor.solve_lower(&ks.column(j).into_owned());
        var[j] = (var[j] - v.norm_squared()).max(k.noise_var[queries[j].covariate] * 1e-12);
    }
    Ok((mean, var))
}

/// Predictive mean and variance at `query` given `history`, in the units of
/// `history` (standardized, when the kernel was fit on standardized data).
pub fn posterior_predict(history: &ObservationSet, k: &StructuredKernel, query: IndexedInput) -> Result<(f64, f64)> {
    let (m, v) = posterior_predict_batch(history, k, &[query])?;
    Ok((m[0], v[0]))
}

pub fn posterior_predict_batch(
    history: &ObservationSet,
    k: &StructuredKernel,
    queries: &[IndexedInput],
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_covariates(history.n_covariates(), k)?;
    if queries.iter().any(|q| q.covariate >= k.n_covariates()) {
        return Err(Error::domain("query covariate out of range"));
    }
    condition(&history.inputs(), &history.targets(), k, queries)
}

fn check_covariates(n: usize, k: &StructuredKernel) -> Result<()> {
    if n != k.n_covariates() {
        return Err(Error::domain(format!("data has {n} covariates, kernel has {}", k.n_covariates())));
    }
    Ok(())
}

/// Mutable per-patient state.
#[derive(Clone, Debug)]
pub struct OnlineState {
    pub kernel: StructuredKernel,
    /// Momentum buffer in optimizer coordinates, parameter-layout order.
    pub velocity: DVector<f64>,
    /// Standardized observations inside the trailing window.
    pub window: Vec<Observation>,
    /// Per basis kernel, loadings that never move.
    pub frozen_mask: Vec<DMatrix<bool>>,
}

/// What one prediction was allowed to see, for causality audits.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditEntry {
    pub query: Observation,
    pub conditioning: Vec<Observation>,
    /// Window contents used by the update that followed this observation.
    pub update_window: Vec<Observation>,
}

/// Streaming imputer for one patient.
#[derive(Clone, Debug)]
pub struct OnlineImputer {
    state: OnlineState,
    space: OptimizerSpace,
    /// Parameter indices the momentum step may change.
    trainable: Vec<bool>,
    shrinkage: ShrinkageState,
    standardization: Standardization,
    cfg: OnlineConfig,
    /// Standardized history in arrival order.
    history: Vec<Observation>,
    skipped_updates: usize,
}

impl OnlineImputer {
    pub fn new(model: &PopulationModel, cfg: &OnlineConfig) -> Result<Self> {
        let kernel = model.kernel()?;
        Self::from_kernel(kernel, model.standardization.clone(), cfg)
    }

    /// Starts from `kernel`; loadings that are exactly zero are frozen.
    pub fn from_kernel(kernel: StructuredKernel, standardization: Standardization, cfg: &OnlineConfig) -> Result<Self> {
        cfg.validate()?;
        kernel.validate()?;
        if standardization.mean.len() != kernel.n_covariates() {
            return Err(Error::domain("standardization does not match the kernel"));
        }
        let layout = ParamLayout::for_kernel(&kernel);
        let frozen_mask: Vec<DMatrix<bool>> = kernel.weights.iter().map(|w| w.a.map(|a| a == 0.0)).collect();
        let trainable = layout
            .ids()
            .iter()
            .map(|id| match *id {
                ParamId::A { q, d, r } => !frozen_mask[q][(d, r)],
                ParamId::LogNoise(_) => false,
                _ => true,
            })
            .collect();
        let mut shrinkage = ShrinkageState::new(&kernel);
        for _ in 0..cfg.shrinkage_sweeps {
            shrinkage.update(&kernel, &cfg.prior);
        }
        let state =
            OnlineState { velocity: DVector::zeros(layout.len()), kernel, window: Vec::new(), frozen_mask };
        Ok(Self {
            state,
            space: OptimizerSpace::new(&layout),
            trainable,
            shrinkage,
            standardization,
            cfg: cfg.clone(),
            history: Vec::new(),
            skipped_updates: 0,
        })
    }

    pub fn state(&self) -> &OnlineState {
        &self.state
    }

    pub fn kernel(&self) -> &StructuredKernel {
        &self.state.kernel
    }

    pub fn skipped_updates(&self) -> usize {
        self.skipped_updates
    }

    /// Standardized observations a prediction at `time` for `covariate` may
    /// condition on, given the other members of its timestamp group.
    fn conditioning_set(&self, query: &Observation, group: &[Observation]) -> Vec<Observation> {
        let earlier: Vec<Observation> = match self.cfg.prediction_history {
            PredictionHistory::Full => {
                let start = self.history.len().saturating_sub(self.cfg.history_limit);
                self.history[start..].to_vec()
            }
            PredictionHistory::Window => {
                self.history.iter().filter(|o| o.time >= query.time - self.cfg.window_hours).copied().collect()
            }
        };
        let mut out = earlier;
        out.extend(group.iter().filter(|o| o.covariate != query.covariate).copied());
        if out.len() > self.cfg.history_limit {
            out.drain(..out.len() - self.cfg.history_limit);
        }
        out
    }

    fn predict_standardized(&self, cond: &[Observation], query: &Observation) -> Result<(f64, f64)> {
        let inputs: Vec<IndexedInput> = cond.iter().map(|o| IndexedInput::new(o.covariate, o.time)).collect();
        let y = DVector::from_iterator(cond.len(), cond.iter().map(|o| o.value));
        let (m, v) = condition(&inputs, &y, &self.state.kernel, &[IndexedInput::new(query.covariate, query.time)])?;
        Ok((m[0], v[0]))
    }

    /// Processes all observations that share one timestamp (at most one per
    /// covariate): predicts each, then appends them and updates the kernel
    /// once per observation.
    pub fn observe_group(&mut self, group: &[Observation]) -> Result<Vec<PredictionRecord>> {
        self.observe_group_inner(group, None)
    }

    fn observe_group_inner(&mut self, group: &[Observation], mut audit: Option<&mut Vec<AuditEntry>>) -> Result<Vec<PredictionRecord>> {
        let Some(first) = group.first() else { return Ok(Vec::new()) };
        let t = first.time;
        let d = self.state.kernel.n_covariates();
        for (i, o) in group.iter().enumerate() {
            if o.time != t || o.covariate >= d || !o.value.is_finite() {
                return Err(Error::domain("timestamp group must share one time and have valid covariates"));
            }
            if group[..i].iter().any(|p| p.covariate == o.covariate) {
                return Err(Error::domain("duplicate covariate within one timestamp"));
            }
        }
        if let Some(last) = self.history.last() {
            if t <= last.time {
                return Err(Error::domain(format!("stream is not time-ordered at t = {t}")));
            }
        }
        let std_group: Vec<Observation> = group
            .iter()
            .map(|o| Observation { value: self.standardization.forward(o.covariate, o.value), ..*o })
            .collect();

        let mut records = Vec::with_capacity(group.len());
        let mut conds = Vec::with_capacity(group.len());
        for (o, z) in group.iter().zip(&std_group) {
            let cond = self.conditioning_set(z, &std_group);
            let (m, v) = self.predict_standardized(&cond, z)?;
            let mean = self.standardization.inverse_mean(o.covariate, m);
            let var = self.standardization.inverse_var(o.covariate, v);
            records.push(PredictionRecord::new(o.covariate, o.time, mean, var, o.value));
            if audit.is_some() {
                conds.push(cond);
            }
        }
        for (i, z) in std_group.iter().enumerate() {
            self.history.push(*z);
            self.state.window.push(*z);
            let cutoff = t - self.cfg.window_hours;
            self.state.window.retain(|o| o.time >= cutoff);
            if self.cfg.update_kernel {
                self.momentum_update();
            }
            if let Some(a) = audit.as_deref_mut() {
                a.push(AuditEntry {
                    query: group[i],
                    conditioning: std::mem::take(&mut conds[i]),
                    update_window: self.state.window.clone(),
                });
            }
        }
        Ok(records)
    }

    /// Gradient of the penalized objective on the current window, in
    /// optimizer coordinates.
    pub fn window_gradient(&self) -> Result<DVector<f64>> {
        if self.state.window.is_empty() {
            return Err(Error::domain("update window is empty"));
        }
        let mut channels = ObservationSet::new("window", vec![String::new(); self.state.kernel.n_covariates()]);
        let mut sorted = self.state.window.clone();
        sorted.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.covariate.cmp(&b.covariate)));
        for o in &sorted {
            channels.push(o.covariate, o.time, o.value)?;
        }
        let problem = Problem::new(&channels, Some((&self.shrinkage, &self.cfg.prior)));
        let ev = problem.evaluate(&self.state.kernel, Some(GradientRoute::Contracted))?;
        Ok(self.space.chain(&self.state.kernel, ev.gradient.as_ref().expect("gradient requested")))
    }

    /// One momentum ascent step: `v <- m v + lr g`, `theta <- theta + v` on
    /// trainable entries. On failure the state is left unchanged.
    pub fn momentum_update(&mut self) -> bool {
        match self.window_gradient().and_then(|g| self.apply_gradient(&g)) {
            Ok(()) => true,
            Err(e) => {
                self.skipped_updates += 1;
                log::debug!("online update skipped: {e}");
                false
            }
        }
    }

    /// Applies one momentum step with a gradient in optimizer coordinates.
    pub fn apply_gradient(&mut self, g: &DVector<f64>) -> Result<()> {
        if g.len() != self.space.layout.len() {
            return Err(Error::domain("gradient length does not match the parameter layout"));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("non-finite gradient"));
        }
        let mut velocity = self.state.velocity.clone();
        let mut z = self.space.to_coords(&self.state.kernel);
        for i in 0..z.len() {
            if self.trainable[i] {
                velocity[i] = self.cfg.momentum * velocity[i] + self.cfg.learning_rate * g[i];
                z[i] += velocity[i];
            } else {
                velocity[i] = 0.0;
            }
        }
        let mut kernel = self.space.kernel(&z)?;
        // keep frozen loadings and the noise bitwise identical
        for (q, w) in kernel.weights.iter_mut().enumerate() {
            for (a, frozen) in w.a.iter_mut().zip(self.state.frozen_mask[q].iter()) {
                if *frozen {
                    *a = 0.0;
                }
            }
        }
        kernel.noise_var = self.state.kernel.noise_var.clone();
        self.state.kernel = kernel;
        self.state.velocity = velocity;
        Ok(())
    }
}

/// Splits a time-ordered stream into groups sharing a timestamp.
fn timestamp_groups(stream: &[Observation]) -> Result<Vec<&[Observation]>> {
    for w in stream.windows(2) {
        if w[1].time < w[0].time {
            return Err(Error::domain(format!("stream is not sorted by time at t = {}", w[1].time)));
        }
    }
    Ok(stream.chunk_by(|a, b| a.time == b.time).collect())
}

/// Runs the imputer over a stream sorted by time.
pub fn run_online_stream(stream: &[Observation], model: &PopulationModel, cfg: &OnlineConfig) -> Result<Vec<PredictionRecord>> {
    let mut imputer = OnlineImputer::new(model, cfg)?;
    let mut records = Vec::with_capacity(stream.len());
    for group in timestamp_groups(stream)? {
        records.extend(imputer.observe_group(group)?);
    }
    Ok(records)
}

/// Runs the imputer over all observations of one patient.
pub fn run_online(patient: &ObservationSet, model: &PopulationModel, cfg: &OnlineConfig) -> Result<Vec<PredictionRecord>> {
    patient.validate()?;
    if patient.n_covariates() != model.n_covariates() {
        return Err(Error::domain("patient and population model disagree on the covariate count"));
    }
    run_online_stream(&patient.to_stream(), model, cfg)
}

/// [`run_online_stream`] that also returns what every prediction conditioned
/// on and the window each update used.
pub fn run_online_audited(
    stream: &[Observation],
    model: &PopulationModel,
    cfg: &OnlineConfig,
) -> Result<(Vec<PredictionRecord>, Vec<AuditEntry>, OnlineState)> {
    let mut imputer = OnlineImputer::new(model, cfg)?;
    let mut records = Vec::with_capacity(stream.len());
    let mut audit = Vec::with_capacity(stream.len());
    for group in timestamp_groups(stream)? {
        records.extend(imputer.observe_group_inner(group, Some(&mut audit))?);
    }
    Ok((records, audit, imputer.state))
}
