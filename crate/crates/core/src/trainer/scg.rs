//! Scaled conjugate gradient (Møller 1993) for unconstrained minimization.
//!
//! Curvature along the search direction comes from a finite difference of
//! gradients, and a Levenberg-Marquardt style scale keeps the local quadratic
//! model positive definite, so no line search is needed. Points where the
//! objective cannot be evaluated are treated as failed steps.

use nalgebra::DVector;

use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct ScgOptions {
    pub max_iters: usize,
    /// Stop when the gradient norm falls below this.
    pub grad_tol: f64,
    /// Stop when an accepted step changes the objective by less than this.
    pub f_tol: f64,
    /// Step used for the finite-difference curvature probe.
    pub sigma0: f64,
    /// Initial scale of the regularizing term.
    pub lambda0: f64,
}

impl Default for ScgOptions {
    fn default() -> Self {
        Self { max_iters: 50, grad_tol: 1e-4, f_tol: 0.0, sigma0: 1e-4, lambda0: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct ScgResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub grad: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `f`, which returns the value and gradient at a point. The start
/// point must be evaluable.
pub fn minimize<F>(mut f: F, x0: DVector<f64>, opts: &ScgOptions) -> Result<ScgResult>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    const BETA_MIN: f64 = 1e-15;
    const BETA_MAX: f64 = 1e100;
    let n = x0.len();
    let (mut f_old, mut grad) = f(&x0)?;
    let mut x = x0;
    if n == 0 || grad.norm() < opts.grad_tol {
        return Ok(ScgResult { x, f: f_old, grad, iterations: 0, converged: true });
    }
    let mut d = -&grad;
    let mut beta = opts.lambda0;
    let mut success = true;
    let mut n_success = 0usize;
    let (mut mu, mut kappa, mut gamma) = (0.0, 0.0, 0.0);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        iterations += 1;
        if success {
            mu = d.dot(&grad);
            if mu >= 0.0 {
                d = -&grad;
                mu = d.dot(&grad);
            }
            kappa = d.norm_squared();
            if !(kappa > f64::EPSILON) {
                converged = true;
                break;
            }
            // curvature along d from a gradient difference; shrink the probe
            // if it lands outside the feasible region
            let mut sigma = opts.sigma0 / kappa.sqrt();
            gamma = f64::NAN;
            for _ in 0..4 {
                if let Ok((_, g_probe)) = f(&(&x + sigma * &d)) {
                    if g_probe.iter().all(|v| v.is_finite()) {
                        gamma = d.dot(&(g_probe - &grad)) / sigma;
                        break;
                    }
                }
                sigma *= 0.1;
            }
            if !gamma.is_finite() {
                gamma = 0.0;
            }
        }
        let mut delta = gamma + beta * kappa;
        if delta <= 0.0 {
            delta = beta * kappa;
            beta -= gamma / kappa;
        }
        let alpha = -mu / delta;
        let trial = &x + alpha * &d;
        let evaluated = f(&trial).ok().filter(|(ft, g)| ft.is_finite() && g.iter().all(|v| v.is_finite()));
        let comparison = match &evaluated {
            Some((ft, _)) => 2.0 * (ft - f_old) / (alpha * mu),
            None => -1.0,
        };
        let grad_old = grad.clone();
        if comparison >= 0.0 {
            let (ft, gt) = evaluated.expect("accepted step was evaluated");
            let improvement = f_old - ft;
            success = true;
            n_success += 1;
            x = trial;
            f_old = ft;
            grad = gt;
            if grad.norm() < opts.grad_tol || (opts.f_tol > 0.0 && improvement.abs() < opts.f_tol) {
                converged = true;
                break;
            }
        } else {
            success = false;
        }
        if comparison < 0.25 {
            beta = (4.0 * beta).min(BETA_MAX);
        }
        if comparison > 0.75 {
            beta = (0.5 * beta).max(BETA_MIN);
        }
        if beta >= BETA_MAX {
            break;
        }
        if n_success == n {
            d = -&grad;
            n_success = 0;
        } else if success {
            let pr = (&grad_old - &grad).dot(&grad) / mu;
            d = pr * &d - &grad;
        }
    }
    Ok(ScgResult { x, f: f_old, grad, iterations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn minimizes_quadratic() {
        let opts = ScgOptions { max_iters: 100, grad_tol: 1e-10, ..Default::default() };
        let res = minimize(
            |x| {
                let f = (x[0] - 1.0).powi(2) + 10.0 * (x[1] + 2.0).powi(2) + 0.5 * x[0] * x[1];
                let g = DVector::from_vec(vec![2.0 * (x[0] - 1.0) + 0.5 * x[1], 20.0 * (x[1] + 2.0) + 0.5 * x[0]]);
                Ok((f, g))
            },
            DVector::from_vec(vec![5.0, 5.0]),
            &opts,
        )
        .unwrap();
        assert!(res.converged);
        // stationary point: [2 0.5; 0.5 20] x = [2; -40]
        let det = 2.0 * 20.0 - 0.25;
        let x0 = (2.0 * 20.0 + 0.5 * 40.0) / det;
        let x1 = (-40.0 * 2.0 - 0.5 * 2.0) / det;
        assert!((res.x[0] - x0).abs() < 1e-8 && (res.x[1] - x1).abs() < 1e-8, "{:?}", res.x);
    }

    #[test]
    fn minimizes_rosenbrock() {
        let opts = ScgOptions { max_iters: 5000, grad_tol: 1e-8, ..Default::default() };
        let res = minimize(
            |x| {
                let (a, b) = (x[0], x[1]);
                let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                let g = DVector::from_vec(vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
                Ok((f, g))
            },
            DVector::from_vec(vec![-1.2, 1.0]),
            &opts,
        )
        .unwrap();
        assert!((res.x[0] - 1.0).abs() < 1e-5 && (res.x[1] - 1.0).abs() < 1e-5, "{:?}", res.x);
    }

    #[test]
    fn respects_infeasible_region() {
        // minimum of (x - 3)^2 restricted to x < 2 by failing evaluations
        let opts = ScgOptions { max_iters: 200, ..Default::default() };
        let res = minimize(
            |x| {
                if x[0] >= 2.0 {
                    return Err(Error::numeric("outside"));
                }
                Ok(((x[0] - 3.0).powi(2), DVector::from_vec(vec![2.0 * (x[0] - 3.0)])))
            },
            DVector::from_vec(vec![0.0]),
            &opts,
        )
        .unwrap();
        assert!(res.x[0] < 2.0 && res.x[0] > 1.9, "{}", res.x[0]);
    }

    #[test]
    fn objective_never_increases() {
        let mut history = vec![];
        let opts = ScgOptions { max_iters: 50, ..Default::default() };
        let res = minimize(
            |x| {
                let f = x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v.powi(4) + v * v).sum::<f64>();
                let g = DVector::from_fn(x.len(), |i, _| 4.0 * (i as f64 + 1.0) * x[i].powi(3) + 2.0 * x[i]);
                history.push(f);
                Ok((f, g))
            },
            DVector::from_vec(vec![1.0, -2.0, 0.5]),
            &opts,
        )
        .unwrap();
        assert!(res.f <= history[0]);
        assert!(res.f < 1e-6);
    }
}
