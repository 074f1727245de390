//! Per-iteration timing of the three training phases (Gram assembly, Gram
//! inversion, gradient evaluation) at several sizes and worker counts.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{gram_matrix, BasisKernelParams, CoregionalizationWeights, IndexedInput, StructuredKernel};
use crate::linalg::SpdFactor;
use crate::trainer::objective::{contracted_gradient, per_parameter_gradient};
use crate::trainer::GradientRoute;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub t: usize,
    pub workers: usize,
    pub gram_s: f64,
    pub inversion_s: f64,
    pub gradients_s: f64,
    pub total_s: f64,
    pub log_marginal: f64,
    pub gradient_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub q: usize,
    pub d: usize,
    pub r: usize,
    pub route: GradientRoute,
    pub rows: Vec<BenchRow>,
    /// Largest |difference| of the log marginal likelihood between worker
    /// counts at the same size.
    pub max_objective_diff: f64,
    /// Largest |difference| of any gradient entry between worker counts.
    pub max_gradient_diff: f64,
}

impl BenchReport {
    pub fn row(&self, t: usize, workers: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.t == t && r.workers == workers)
    }

    /// Least-squares slope of log(inversion time) against log(T) for one
    /// worker count.
    pub fn inversion_slope(&self, workers: usize) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.workers == workers && r.inversion_s > 0.0)
            .map(|r| ((r.t as f64).ln(), r.inversion_s.ln()))
            .collect();
        log_log_slope(&pts)
    }

    /// Tab-separated table with one line per (size, workers).
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("t\tworkers\tgram_s\tinversion_s\tgradients_s\ttotal_s\tlog_marginal\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.10e}\n",
                r.t, r.workers, r.gram_s, r.inversion_s, r.gradients_s, r.total_s, r.log_marginal
            ));
        }
        s
    }
}

pub fn log_log_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// A random kernel of the given size with periods in [24, 72] h and length
/// scales in [6, 72] h.
pub fn random_kernel(q: usize, d: usize, r: usize, seed: u64) -> Result<StructuredKernel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis = Vec::with_capacity(q);
    let mut weights = Vec::with_capacity(q);
    for _ in 0..q {
        basis.push(BasisKernelParams::from_period_length_scale(rng.random_range(24.0..72.0), rng.random_range(6.0..72.0))?);
        let a = DMatrix::from_fn(d, r, |_, _| rng.random_range(-1.0..1.0));
        let lambda = DVector::from_fn(d, |_, _| rng.random_range(0.0..0.1));
        weights.push(CoregionalizationWeights::new(a, lambda)?);
    }
    StructuredKernel::new(basis, weights, DVector::from_element(d, 0.1))
}

/// `t` observations spread round-robin over the covariates at random times,
/// with standard normal targets.
pub fn random_inputs(t: usize, d: usize, seed: u64) -> (Vec<IndexedInput>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = (t / d.max(1)).max(1) as f64 * 2.0;
    let inputs = (0..t).map(|i| IndexedInput::new(i % d, rng.random::<f64>() * horizon)).collect();
    let y = DVector::from_fn(t, |_, _| rng.sample(StandardNormal));
    (inputs, y)
}

struct Phase {
    gram_s: f64,
    inversion_s: f64,
    gradients_s: f64,
    log_marginal: f64,
    gradient: DVector<f64>,
}

fn one_iteration(inputs: &[IndexedInput], y: &DVector<f64>, k: &StructuredKernel, route: GradientRoute) -> Result<Phase> {
    let t0 = Instant::now();
    let gram = gram_matrix(inputs, k, true);
    let t1 = Instant::now();
    let factor = SpdFactor::new(&gram)?;
    let inv = factor.inverse();
    let alpha = factor.solve_vec(y);
    let t2 = Instant::now();
    let log_marginal =
        -0.5 * y.dot(&alpha) - 0.5 * factor.log_det() - 0.5 * inputs.len() as f64 * (2.0 * std::f64::consts::PI).ln();
    let mut w = -inv;
    w.ger(1.0, &alpha, &alpha, 1.0);
    let gradient = match route {
        GradientRoute::PerParameter => per_parameter_gradient(inputs, &w, k),
        GradientRoute::Contracted => contracted_gradient(inputs, &w, k),
    };
    let t3 = Instant::now();
    Ok(Phase {
        gram_s: (t1 - t0).as_secs_f64(),
        inversion_s: (t2 - t1).as_secs_f64(),
        gradients_s: (t3 - t2).as_secs_f64(),
        log_marginal,
        gradient,
    })
}

/// Times one training iteration for every size and worker count. Each worker
/// count runs inside its own thread pool.
pub fn bench(sizes: &[usize], k: &StructuredKernel, workers: &[usize], route: GradientRoute, seed: u64) -> Result<BenchReport> {
    if sizes.is_empty() || workers.is_empty() || workers.contains(&0) {
        return Err(Error::domain("bench needs sizes and positive worker counts"));
    }
    let d = k.n_covariates();
    let mut rows = Vec::new();
    let mut max_objective_diff = 0.0f64;
    let mut max_gradient_diff = 0.0f64;
    for &t in sizes {
        let (inputs, y) = random_inputs(t, d, seed ^ t as u64);
        let mut reference: Option<(f64, DVector<f64>)> = None;
        for &n in workers {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::numeric(format!("thread pool: {e}")))?;
            let phase = pool.install(|| one_iteration(&inputs, &y, k, route))?;
            if let Some((lml, g)) = &reference {
                max_objective_diff = max_objective_diff.max((lml - phase.log_marginal).abs());
                max_gradient_diff = max_gradient_diff.max((g - &phase.gradient).amax());
            } else {
                reference = Some((phase.log_marginal, phase.gradient.clone()));
            }
            log::info!("bench T={t} workers={n}: gradients {:.3}s", phase.gradients_s);
            rows.push(BenchRow {
                t,
                workers: n,
                gram_s: phase.gram_s,
                inversion_s: phase.inversion_s,
                gradients_s: phase.gradients_s,
                total_s: phase.gram_s + phase.inversion_s + phase.gradients_s,
                log_marginal: phase.log_marginal,
                gradient_norm: phase.gradient.norm(),
            });
        }
    }
    Ok(BenchReport {
        q: k.n_basis(),
        d,
        r: k.weights.iter().map(|w| w.a.ncols()).max().unwrap_or(0),
        route,
        rows,
        max_objective_diff,
        max_gradient_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_cubic() {
        let pts: Vec<(f64, f64)> = [1.0f64, 2.0, 4.0].iter().map(|x| (x.ln(), 3.0 * x.ln() + 1.0)).collect();
        assert!((log_log_slope(&pts).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn workers_agree() {
        let k = random_kernel(2, 3, 2, 1).unwrap();
        let rep = bench(&[60], &k, &[1, 3], GradientRoute::PerParameter, 2).unwrap();
        assert_eq!(rep.rows.len(), 2);
        assert!(rep.max_objective_diff <= 1e-8);
        assert!(rep.max_gradient_diff <= 1e-8);
    }
}
