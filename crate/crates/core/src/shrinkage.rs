//! Hierarchical-gamma shrinkage prior on the coregionalization loadings.
//!
//! Each loading `a[q](d, r)` has a Gaussian prior whose variance `psi` sits on a
//! four-layer gamma hierarchy (`psi <- delta <- phi <- tau`, shape/rate
//! convention). `phi` and `tau` are shared by a column of `A_q`, giving
//! column-wise shrinkage on top of the element-wise layer. The diagonal
//! weights `lambda` get a Laplace prior.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::kernel::StructuredKernel;

/// Lower bound applied to the `psi` and `phi` updates.
pub const SCALE_FLOOR: f64 = 1e-10;

/// Fixed hyperparameters of the shrinkage prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Shape of the top-level gamma on `tau`.
    pub d: f64,
    /// Rate of the top-level gamma; controls global shrinkage.
    pub eta: f64,
    /// Laplace scale for the diagonal weights.
    pub beta_lambda: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.5, gamma: 0.5, d: 0.5, eta: 0.1, beta_lambda: 0.01 }
    }
}

impl PriorConfig {
    pub fn with_eta(eta: f64) -> Self {
        Self { eta, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.d, self.eta, self.beta_lambda];
        if all.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(Error::domain(format!("prior parameters must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Latent scales of the hierarchy, one block per basis kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct ShrinkageState {
    /// Element variances, D x R per basis kernel.
    pub psi: Vec<DMatrix<f64>>,
    /// Element rates, D x R per basis kernel.
    pub delta: Vec<DMatrix<f64>>,
    /// Column scales, length R per basis kernel.
    pub phi: Vec<DVector<f64>>,
    /// Column rates, length R per basis kernel.
    pub tau: Vec<DVector<f64>>,
}

/// Mode of the conditional of `psi` given the loading `a` and its rate `delta`.
pub fn update_psi(a: f64, delta: f64, cfg: &PriorConfig) -> f64 {
    let c = 2.0 * cfg.alpha - 3.0;
    let psi = (c + (c * c + 8.0 * a * a * delta).sqrt()) / (4.0 * delta);
    psi.max(SCALE_FLOOR)
}

/// Conditional mean of `delta` given `psi` and the column scale `phi`.
pub fn update_delta(psi: f64, phi: f64, cfg: &PriorConfig) -> f64 {
    (cfg.alpha + cfg.beta) / (psi + phi)
}

/// Conditional mode of the column scale `phi`; `delta_sum` is the sum of the
/// column's element rates over the `n_covariates` rows.
pub fn update_phi(delta_sum: f64, tau: f64, n_covariates: usize, cfg: &PriorConfig) -> f64 {
    let phi = (n_covariates as f64 * cfg.beta + cfg.gamma - 1.0) / (delta_sum + tau);
    phi.max(SCALE_FLOOR)
}

/// Conditional mean of the column rate `tau`.
pub fn update_tau(phi: f64, cfg: &PriorConfig) -> f64 {
    (cfg.gamma + cfg.d) / (phi + cfg.eta)
}

impl ShrinkageState {
    /// Unit scales shaped to match `kernel`.
    pub fn new(kernel: &StructuredKernel) -> Self {
        let mut s = Self { psi: vec![], delta: vec![], phi: vec![], tau: vec![] };
        for w in &kernel.weights {
            let (d, r) = w.a.shape();
            s.psi.push(DMatrix::from_element(d, r, 1.0));
            s.delta.push(DMatrix::from_element(d, r, 1.0));
            s.phi.push(DVector::from_element(r, 1.0));
            s.tau.push(DVector::from_element(r, 1.0));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self
            .psi
            .iter()
            .chain(&self.delta)
            .flat_map(|m| m.iter())
            .chain(self.phi.iter().chain(&self.tau).flat_map(|v| v.iter()))
            .all(|x| *x > 0.0 && x.is_finite());
        if !positive {
            return Err(Error::domain("shrinkage scales must be strictly positive"));
        }
        Ok(())
    }

    pub fn matches(&self, kernel: &StructuredKernel) -> bool {
        self.psi.len() == kernel.n_basis()
            && kernel.weights.iter().enumerate().all(|(q, w)| {
                self.psi[q].shape() == w.a.shape()
                    && self.delta[q].shape() == w.a.shape()
                    && self.phi[q].len() == w.a.ncols()
                    && self.tau[q].len() == w.a.ncols()
            })
    }

    /// One sweep of the closed-form updates in the order psi, delta, phi, tau.
    /// Each cell only depends on its own column, so blocks are independent.
    pub fn update(&mut self, kernel: &StructuredKernel, cfg: &PriorConfig) {
        for (q, w) in kernel.weights.iter().enumerate() {
            let (n_cov, n_col) = w.a.shape();
            for r in 0..n_col {
                for d in 0..n_cov {
                    self.psi[q][(d, r)] = update_psi(w.a[(d, r)], self.delta[q][(d, r)], cfg);
                }
                for d in 0..n_cov {
                    self.delta[q][(d, r)] = update_delta(self.psi[q][(d, r)], self.phi[q][r], cfg);
                }
                let delta_sum: f64 = self.delta[q].column(r).sum();
                self.phi[q][r] = update_phi(delta_sum, self.tau[q][r], n_cov, cfg);
                self.tau[q][r] = update_tau(self.phi[q][r], cfg);
            }
        }
    }
}

/// Sum of the prior log-density terms of the training objective: the Gaussian
/// on loadings, the gamma layers, and the Laplace on `lambda` (additive
/// constants as in the objective; no `log(2 pi)` term on the loadings).
pub fn log_prior(kernel: &StructuredKernel, state: &ShrinkageState, cfg: &PriorConfig) -> Result<f64> {
    state.validate()?;
    if !state.matches(kernel) {
        return Err(Error::domain("shrinkage state does not match the kernel shape"));
    }
    let mut total = 0.0;
    for (q, w) in kernel.weights.iter().enumerate() {
        let (n_cov, n_col) = w.a.shape();
        for r in 0..n_col {
            let phi = state.phi[q][r];
            let tau = state.tau[q][r];
            for d in 0..n_cov {
                let a = w.a[(d, r)];
                let psi = state.psi[q][(d, r)];
                let delta = state.delta[q][(d, r)];
                total += -0.5 * psi.ln() - a * a / (2.0 * psi);
                total += cfg.alpha * delta.ln() + (cfg.alpha - 1.0) * psi.ln() - delta * psi;
                total += cfg.beta * phi.ln() + (cfg.beta - 1.0) * delta.ln() - phi * delta;
            }
            total += cfg.gamma * tau.ln() + (cfg.gamma - 1.0) * phi.ln() - tau * phi;
            total += cfg.d * cfg.eta.ln() + (cfg.d - 1.0) * tau.ln() - cfg.eta * tau;
        }
        for l in w.lambda.iter() {
            total += -(2.0 * cfg.beta_lambda).ln() - l.abs() / cfg.beta_lambda;
        }
    }
    Ok(total)
}

/// Density of the three-parameter beta distribution TPB(alpha, beta, nu).
pub fn tpb_density(rho: f64, alpha: f64, beta: f64, nu: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::domain(format!("rho must lie in (0, 1), got {rho}")));
    }
    if !(alpha > 0.0 && beta > 0.0 && nu > 0.0) {
        return Err(Error::domain("TPB parameters must be positive"));
    }
    let log_norm = ln_gamma(alpha + beta) - ln_gamma(alpha) - ln_gamma(beta);
    let log_f = log_norm + beta * nu.ln() + (beta - 1.0) * rho.ln() + (alpha - 1.0) * (1.0 - rho).ln()
        - (alpha + beta) * (1.0 + (nu - 1.0) * rho).ln();
    Ok(log_f.exp())
}

/// One draw from the two-layer gamma scale mixture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoLayerDraw {
    pub x: f64,
    pub psi: f64,
    pub delta: f64,
}

impl TwoLayerDraw {
    /// Shrinkage coefficient `1 / (1 + psi)`.
    pub fn shrinkage(&self) -> f64 {
        1.0 / (1.0 + self.psi)
    }
}

/// Draws `x ~ N(0, psi)`, `psi ~ Gamma(alpha, delta)`, `delta ~ Gamma(beta, nu)`
/// (shape/rate).
pub fn sample_two_layer(alpha: f64, beta: f64, nu: f64, n: usize, seed: u64) -> Result<Vec<TwoLayerDraw>> {
    if n == 0 {
        return Err(Error::domain("need at least one sample"));
    }
    if !(alpha > 0.0 && beta > 0.0 && nu > 0.0) {
        return Err(Error::domain("gamma parameters must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = Gamma::new(beta, 1.0 / nu).map_err(|e| Error::domain(e.to_string()))?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let delta: f64 = top.sample(&mut rng);
        let psi: f64 = Gamma::new(alpha, 1.0 / delta)
            .map_err(|e| Error::domain(e.to_string()))?
            .sample(&mut rng);
        let x = if psi > 0.0 {
            Normal::new(0.0, psi.sqrt()).map_err(|e| Error::domain(e.to_string()))?.sample(&mut rng)
        } else {
            0.0
        };
        out.push(TwoLayerDraw { x, psi, delta });
    }
    Ok(out)
}
