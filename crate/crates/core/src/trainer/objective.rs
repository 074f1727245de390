//! Marginal likelihood, the penalized training objective, and its gradient.
//!
//! Gradients use the trace identity
//! `d/dtheta log p(y) = 1/2 tr((alpha alpha^T - K^-1) dK/dtheta)` with
//! `alpha = K^-1 y`. Because `dK/dtheta` always has the Kronecker-like form
//! `P[c_i, c_j] * g(|t_i - t_j|)` for a D x D pattern `P` and a scalar kernel
//! `g`, two routes are available:
//!
//! * [`GradientRoute::PerParameter`] evaluates the trace separately for every
//!   parameter (O(T^2) each, parallel over parameters);
//! * [`GradientRoute::Contracted`] first contracts `W = alpha alpha^T - K^-1`
//!   against each basis kernel into D x D covariate blocks (O(Q T^2) overall)
//!   and applies the patterns to those blocks.
//!
//! Both give the same numbers up to rounding; the second is what the trainer
//! uses by default.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ObservationSet;
use crate::error::{Error, Result};
use crate::kernel::{
    basis_gram, gram_matrix, pairwise, sm_basis_kernel_dmu, sm_basis_kernel_dv, IndexedInput, StructuredKernel,
};
use crate::linalg::SpdFactor;
use crate::shrinkage::{log_prior, PriorConfig, ShrinkageState};
use crate::trainer::layout::{ParamId, ParamLayout};

/// How the marginal-likelihood gradient is assembled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientRoute {
    PerParameter,
    #[default]
    Contracted,
}

/// Rows per block when accumulating covariate contractions; fixed so the
/// reduction order does not depend on the worker count.
const ROW_BLOCK: usize = 32;

/// Cholesky-based pieces of one marginal-likelihood evaluation.
pub struct GpFit {
    pub inputs: Vec<IndexedInput>,
    pub factor: SpdFactor,
    /// `K^-1 y`.
    pub alpha: DVector<f64>,
    pub log_marginal: f64,
}

impl GpFit {
    pub fn new(inputs: Vec<IndexedInput>, y: &DVector<f64>, k: &StructuredKernel) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::domain("marginal likelihood needs at least one observation"));
        }
        let gram = gram_matrix(&inputs, k, true);
        let factor = SpdFactor::new(&gram)?;
        let alpha = factor.solve_vec(y);
        let n = inputs.len() as f64;
        let log_marginal = -0.5 * y.dot(&alpha) - 0.5 * factor.log_det() - 0.5 * n * (2.0 * PI).ln();
        if !log_marginal.is_finite() {
            return Err(Error::numeric("marginal likelihood is not finite"));
        }
        Ok(Self { inputs, factor, alpha, log_marginal })
    }

    /// `alpha alpha^T - K^-1`.
    pub fn trace_weights(&self) -> DMatrix<f64> {
        let mut w = self.factor.inverse();
        w.neg_mut();
        w.ger(1.0, &self.alpha, &self.alpha, 1.0);
        w
    }
}

/// Log marginal likelihood of the observations under `k` (noise included).
pub fn log_marginal_likelihood(obs: &ObservationSet, k: &StructuredKernel) -> Result<f64> {
    Ok(GpFit::new(obs.inputs(), &obs.targets(), k)?.log_marginal)
}

/// Penalized objective: log marginal likelihood plus the shrinkage log prior.
pub fn objective(obs: &ObservationSet, k: &StructuredKernel, shrinkage: &ShrinkageState, cfg: &PriorConfig) -> Result<f64> {
    Ok(log_marginal_likelihood(obs, k)? + log_prior(k, shrinkage, cfg)?)
}

/// Gradient of [`objective`] in [`ParamLayout`] order, evaluated one parameter
/// at a time.
pub fn gradients(obs: &ObservationSet, k: &StructuredKernel, shrinkage: &ShrinkageState, cfg: &PriorConfig) -> Result<DVector<f64>> {
    let problem = Problem::new(obs, Some((shrinkage, cfg)));
    Ok(problem.evaluate(k, Some(GradientRoute::PerParameter))?.gradient.expect("requested"))
}

/// Same as [`gradients`] via covariate-block contractions.
pub fn gradients_contracted(
    obs: &ObservationSet,
    k: &StructuredKernel,
    shrinkage: &ShrinkageState,
    cfg: &PriorConfig,
) -> Result<DVector<f64>> {
    let problem = Problem::new(obs, Some((shrinkage, cfg)));
    Ok(problem.evaluate(k, Some(GradientRoute::Contracted))?.gradient.expect("requested"))
}

/// Objective value and, optionally, gradient for one kernel.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub log_marginal: f64,
    pub log_prior: f64,
    pub objective: f64,
    pub gradient: Option<DVector<f64>>,
}

/// Fixed data and prior against which kernels are scored.
pub struct Problem<'a> {
    pub inputs: Vec<IndexedInput>,
    pub y: DVector<f64>,
    pub prior: Option<(&'a ShrinkageState, &'a PriorConfig)>,
}

impl<'a> Problem<'a> {
    pub fn new(obs: &ObservationSet, prior: Option<(&'a ShrinkageState, &'a PriorConfig)>) -> Self {
        Self { inputs: obs.inputs(), y: obs.targets(), prior }
    }

    pub fn evaluate(&self, k: &StructuredKernel, route: Option<GradientRoute>) -> Result<Evaluation> {
        let fit = GpFit::new(self.inputs.clone(), &self.y, k)?;
        let lp = match self.prior {
            Some((s, cfg)) => log_prior(k, s, cfg)?,
            None => 0.0,
        };
        let gradient = match route {
            None => None,
            Some(route) => {
                let w = fit.trace_weights();
                let mut g = match route {
                    GradientRoute::PerParameter => per_parameter_gradient(&self.inputs, &w, k),
                    GradientRoute::Contracted => contracted_gradient(&self.inputs, &w, k),
                };
                if let Some((s, cfg)) = self.prior {
                    add_prior_gradient(&mut g, k, s, cfg);
                }
                Some(g)
            }
        };
        Ok(Evaluation { log_marginal: fit.log_marginal, log_prior: lp, objective: fit.log_marginal + lp, gradient })
    }
}

/// Adds `-a/psi` to the loading entries and `-sign(lambda)/beta_lambda` to
/// the diagonal weights.
pub(crate) fn add_prior_gradient(g: &mut DVector<f64>, k: &StructuredKernel, s: &ShrinkageState, cfg: &PriorConfig) {
    let layout = ParamLayout::for_kernel(k);
    for (q, w) in k.weights.iter().enumerate() {
        for d in 0..w.a.nrows() {
            for r in 0..w.a.ncols() {
                g[layout.index(ParamId::A { q, d, r })] -= w.a[(d, r)] / s.psi[q][(d, r)];
            }
            let l = w.lambda[d];
            let sign = if l > 0.0 { 1.0 } else if l < 0.0 { -1.0 } else { 0.0 };
            g[layout.index(ParamId::Lambda { q, d })] -= sign / cfg.beta_lambda;
        }
    }
}

/// `1/2 sum_ij W_ij * m_ij * P[c_i, c_j]` over the full symmetric sum.
fn half_trace(w: &DMatrix<f64>, m: &DMatrix<f64>, cov: &[usize], pattern: &DMatrix<f64>) -> f64 {
    let n = cov.len();
    let (ws, ms) = (w.as_slice(), m.as_slice());
    let mut diag = 0.0;
    let mut off = 0.0;
    for j in 0..n {
        let col = j * n;
        let cj = cov[j];
        diag += ws[col + j] * ms[col + j] * pattern[(cj, cj)];
        for i in (j + 1)..n {
            off += ws[col + i] * ms[col + i] * pattern[(cov[i], cj)];
        }
    }
    0.5 * diag + off
}

/// Marginal-likelihood gradient, one trace per parameter.
pub fn per_parameter_gradient(inputs: &[IndexedInput], w: &DMatrix<f64>, k: &StructuredKernel) -> DVector<f64> {
    let layout = ParamLayout::for_kernel(k);
    let cov: Vec<usize> = inputs.iter().map(|x| x.covariate).collect();
    let n_cov = k.n_covariates();
    let bs = k.b_matrices();
    let kq: Vec<DMatrix<f64>> = k.basis.iter().map(|p| basis_gram(inputs, p)).collect();
    let ids = layout.ids();
    let values: Vec<f64> = ids
        .par_iter()
        .map(|id| match *id {
            ParamId::Mu(q) => {
                let p = k.basis[q];
                let dk = pairwise(inputs, |tau| sm_basis_kernel_dmu(tau, &p));
                half_trace(w, &dk, &cov, &bs[q])
            }
            ParamId::V(q) => {
                let p = k.basis[q];
                let dk = pairwise(inputs, |tau| sm_basis_kernel_dv(tau, &p));
                half_trace(w, &dk, &cov, &bs[q])
            }
            ParamId::A { q, d, r } => {
                let a = &k.weights[q].a;
                let mut pattern = DMatrix::zeros(n_cov, n_cov);
                for j in 0..n_cov {
                    pattern[(d, j)] = a[(j, r)];
                    pattern[(j, d)] = a[(j, r)];
                }
                pattern[(d, d)] = 2.0 * a[(d, r)];
                half_trace(w, &kq[q], &cov, &pattern)
            }
            ParamId::Lambda { q, d } => {
                let mut pattern = DMatrix::zeros(n_cov, n_cov);
                pattern[(d, d)] = 1.0;
                half_trace(w, &kq[q], &cov, &pattern)
            }
            ParamId::LogNoise(d) => noise_term(w, &cov, d, k.noise_var[d]),
        })
        .collect();
    DVector::from_vec(values)
}

fn noise_term(w: &DMatrix<f64>, cov: &[usize], d: usize, noise: f64) -> f64 {
    0.5 * noise * cov.iter().enumerate().filter(|(_, c)| **c == d).map(|(i, _)| w[(i, i)]).sum::<f64>()
}

/// Covariate-block contractions of `W` with `k_q`, `dk_q/dmu`, `dk_q/dv`.
struct Contractions {
    kernel: DMatrix<f64>,
    dmu: DMatrix<f64>,
    dv: DMatrix<f64>,
}

fn contract(inputs: &[IndexedInput], w: &DMatrix<f64>, p: &crate::kernel::BasisKernelParams, n_cov: usize) -> Contractions {
    let n = inputs.len();
    let n_blocks = n.div_ceil(ROW_BLOCK);
    let partials: Vec<[Vec<f64>; 3]> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = [vec![0.0; n_cov * n_cov], vec![0.0; n_cov * n_cov], vec![0.0; n_cov * n_cov]];
            let two_pi2_v = 2.0 * PI * PI * p.v;
            let two_pi_mu = 2.0 * PI * p.mu;
            for i in (b * ROW_BLOCK)..((b + 1) * ROW_BLOCK).min(n) {
                let ci = inputs[i].covariate;
                for j in 0..=i {
                    let tau = (inputs[i].time - inputs[j].time).abs();
                    let e = (-two_pi2_v * tau * tau).exp();
                    let (s, c) = (two_pi_mu * tau).sin_cos();
                    let scale = if i == j { 1.0 } else { 2.0 } * w[(i, j)];
                    let cj = inputs[j].covariate;
                    // symmetric accumulation: store under the ordered pair (min, max)
                    let slot = if ci <= cj { ci * n_cov + cj } else { cj * n_cov + ci };
                    acc[0][slot] += scale * e * c;
                    acc[1][slot] += scale * (-2.0 * PI * tau * e * s);
                    acc[2][slot] += scale * (-2.0 * PI * PI * tau * tau * e * c);
                }
            }
            acc
        })
        .collect();
    let mut out = [DMatrix::zeros(n_cov, n_cov), DMatrix::zeros(n_cov, n_cov), DMatrix::zeros(n_cov, n_cov)];
    for part in &partials {
        for (m, src) in out.iter_mut().zip(part.iter()) {
            for a in 0..n_cov {
                for b in a..n_cov {
                    m[(a, b)] += src[a * n_cov + b];
                }
            }
        }
    }
    // Off-diagonal slots hold the sum over both orderings; split it evenly.
    for m in out.iter_mut() {
        for a in 0..n_cov {
            for b in (a + 1)..n_cov {
                let half = 0.5 * m[(a, b)];
                m[(a, b)] = half;
                m[(b, a)] = half;
            }
        }
    }
    let [kernel, dmu, dv] = out;
    Contractions { kernel, dmu, dv }
}

/// Marginal-likelihood gradient via covariate-block contractions.
pub fn contracted_gradient(inputs: &[IndexedInput], w: &DMatrix<f64>, k: &StructuredKernel) -> DVector<f64> {
    let layout = ParamLayout::for_kernel(k);
    let n_cov = k.n_covariates();
    let cov: Vec<usize> = inputs.iter().map(|x| x.covariate).collect();
    let mut g = DVector::zeros(layout.len());
    for (q, (p, wq)) in k.basis.iter().zip(&k.weights).enumerate() {
        let c = contract(inputs, w, p, n_cov);
        let b = crate::kernel::build_b(wq);
        // entries of c.* already hold the full (i, j) + (j, i) sums per block
        g[layout.index(ParamId::Mu(q))] = 0.5 * b.component_mul(&c.dmu).sum();
        g[layout.index(ParamId::V(q))] = 0.5 * b.component_mul(&c.dv).sum();
        // d/dA = 1/2 (M + M^T) A = M A for symmetric M
        let ga = &c.kernel * &wq.a;
        for d in 0..n_cov {
            for r in 0..wq.a.ncols() {
                g[layout.index(ParamId::A { q, d, r })] = ga[(d, r)];
            }
            g[layout.index(ParamId::Lambda { q, d })] = 0.5 * c.kernel[(d, d)];
        }
    }
    for d in 0..n_cov {
        g[layout.index(ParamId::LogNoise(d))] = noise_term(w, &cov, d, k.noise_var[d]);
    }
    g
}
