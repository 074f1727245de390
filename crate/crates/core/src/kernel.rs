//! Basis kernels and the block-structured multi-output covariance.
//!
//! The multi-output prior is a linear model of coregionalization: for two
//! observations `(d, t)` and `(d', t')` the covariance is
//! `sum_q B_q[d, d'] * k_q(|t - t'|)`, where each `k_q` is a one-dimensional
//! spectral-mixture component and `B_q = A_q A_q^T + diag(lambda_q)`.
//!
//! Time is measured in hours everywhere.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Squared-exponential kernel `scale^2 * exp(-(x - x2)^2 / (2 l^2))`.
pub fn se_kernel(x: f64, x2: f64, length_scale: f64, scale: f64) -> Result<f64> {
    if !(length_scale > 0.0) {
        return Err(Error::domain(format!(
            "squared-exponential length scale must be positive, got {length_scale}"
        )));
    }
    let r = (x - x2).abs() / length_scale;
    Ok(scale * scale * (-0.5 * r * r).exp())
}

/// Periodic kernel `scale^2 * exp(-4 sin^2(pi |x - x2| / p) / l^2)`.
pub fn periodic_kernel(x: f64, x2: f64, length_scale: f64, scale: f64, period: f64) -> Result<f64> {
    if !(length_scale > 0.0) || !(period > 0.0) {
        return Err(Error::domain(format!(
            "periodic kernel needs positive length scale and period, got l={length_scale}, p={period}"
        )));
    }
    let s = (PI * (x - x2).abs() / period).sin();
    Ok(scale * scale * (-4.0 * s * s / (length_scale * length_scale)).exp())
}

/// Parameters of one spectral-mixture basis kernel.
///
/// `mu` is the spectral frequency (1/h) and `v` the spectral variance (1/h^2).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisKernelParams {
    pub mu: f64,
    pub v: f64,
}

impl BasisKernelParams {
    pub fn new(mu: f64, v: f64) -> Result<Self> {
        if !(mu >= 0.0 && mu.is_finite()) || !(v >= 0.0 && v.is_finite()) {
            return Err(Error::domain(format!(
                "basis kernel needs finite mu >= 0 and v >= 0, got mu={mu}, v={v}"
            )));
        }
        Ok(Self { mu, v })
    }

    /// Builds parameters from a characteristic period and length scale, both in
    /// hours. An infinite period gives `mu = 0`, an infinite length scale `v = 0`.
    pub fn from_period_length_scale(period: f64, length_scale: f64) -> Result<Self> {
        if !(period > 0.0) || !(length_scale > 0.0) {
            return Err(Error::domain("period and length scale must be positive"));
        }
        let mu = if period.is_infinite() { 0.0 } else { 1.0 / period };
        let v = if length_scale.is_infinite() {
            0.0
        } else {
            let w = 2.0 * PI * length_scale;
            1.0 / (w * w)
        };
        Self::new(mu, v)
    }

    #[inline]
    pub fn eval(&self, tau: f64) -> f64 {
        sm_basis_kernel(tau, self)
    }

    /// Characteristic period and length scale; see [`characteristic_features`].
    pub fn features(&self) -> (f64, f64) {
        characteristic_features(self)
    }
}

/// Spectral-mixture basis kernel `exp(-2 pi^2 tau^2 v) cos(2 pi tau mu)`.
#[inline]
pub fn sm_basis_kernel(tau: f64, params: &BasisKernelParams) -> f64 {
    let tau = tau.abs();
    (-2.0 * PI * PI * tau * tau * params.v).exp() * (2.0 * PI * tau * params.mu).cos()
}

/// Derivative of [`sm_basis_kernel`] with respect to `v`.
#[inline]
pub fn sm_basis_kernel_dv(tau: f64, params: &BasisKernelParams) -> f64 {
    let t2 = tau * tau;
    -2.0 * PI * PI * t2 * (-2.0 * PI * PI * t2 * params.v).exp() * (2.0 * PI * tau * params.mu).cos()
}

/// Derivative of [`sm_basis_kernel`] with respect to `mu`.
#[inline]
pub fn sm_basis_kernel_dmu(tau: f64, params: &BasisKernelParams) -> f64 {
    let tau = tau.abs();
    -2.0 * PI * tau * (-2.0 * PI * PI * tau * tau * params.v).exp() * (2.0 * PI * tau * params.mu).sin()
}

/// Characteristic `(period, length_scale)` in hours, with `f64::INFINITY`
/// standing in for a zero frequency or zero spectral variance.
pub fn characteristic_features(params: &BasisKernelParams) -> (f64, f64) {
    let period = if params.mu > 0.0 { 1.0 / params.mu } else { f64::INFINITY };
    let length_scale = if params.v > 0.0 {
        1.0 / (2.0 * PI * params.v.sqrt())
    } else {
        f64::INFINITY
    };
    (period, length_scale)
}

/// Coregionalization factors of one basis kernel: `B = A A^T + diag(lambda)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoregionalizationWeights {
    /// D x R loading matrix.
    pub a: DMatrix<f64>,
    /// Per-covariate diagonal weights.
    pub lambda: DVector<f64>,
}

impl CoregionalizationWeights {
    pub fn new(a: DMatrix<f64>, lambda: DVector<f64>) -> Result<Self> {
        if a.nrows() != lambda.len() {
            return Err(Error::domain(format!(
                "A has {} rows but lambda has {} entries",
                a.nrows(),
                lambda.len()
            )));
        }
        Ok(Self { a, lambda })
    }

    pub fn zeros(d: usize, r: usize) -> Self {
        Self { a: DMatrix::zeros(d, r), lambda: DVector::zeros(d) }
    }

    pub fn n_covariates(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_columns(&self) -> usize {
        self.a.ncols()
    }

    pub fn b(&self) -> DMatrix<f64> {
        build_b(self)
    }
}

/// `A A^T + diag(lambda)`.
pub fn build_b(weights: &CoregionalizationWeights) -> DMatrix<f64> {
    let mut b = &weights.a * weights.a.transpose();
    for (d, l) in weights.lambda.iter().enumerate() {
        b[(d, d)] += l;
    }
    // AA^T is symmetric in exact arithmetic; copy the upper triangle so it is bitwise too.
    for i in 0..b.nrows() {
        for j in 0..i {
            b[(i, j)] = b[(j, i)];
        }
    }
    b
}

/// One observation location: a covariate index and a time in hours.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexedInput {
    pub covariate: usize,
    pub time: f64,
}

impl IndexedInput {
    pub fn new(covariate: usize, time: f64) -> Self {
        Self { covariate, time }
    }
}

/// The full multi-output prior: Q basis kernels, their coregionalization
/// weights, and per-covariate observation noise variances.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredKernel {
    pub basis: Vec<BasisKernelParams>,
    pub weights: Vec<CoregionalizationWeights>,
    pub noise_var: DVector<f64>,
}

impl StructuredKernel {
    pub fn new(
        basis: Vec<BasisKernelParams>,
        weights: Vec<CoregionalizationWeights>,
        noise_var: DVector<f64>,
    ) -> Result<Self> {
        let k = Self { basis, weights, noise_var };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.basis.is_empty() {
            return Err(Error::domain("structured kernel needs at least one basis kernel"));
        }
        if self.basis.len() != self.weights.len() {
            return Err(Error::domain(format!(
                "{} basis kernels but {} weight blocks",
                self.basis.len(),
                self.weights.len()
            )));
        }
        let d = self.noise_var.len();
        if d == 0 {
            return Err(Error::domain("structured kernel needs at least one covariate"));
        }
        for (q, w) in self.weights.iter().enumerate() {
            if w.a.nrows() != d || w.lambda.len() != d {
                return Err(Error::domain(format!(
                    "weight block {q} has {} rows, expected {d}",
                    w.a.nrows()
                )));
            }
            if w.a.iter().chain(w.lambda.iter()).any(|x| !x.is_finite()) {
                return Err(Error::domain(format!("weight block {q} has non-finite entries")));
            }
        }
        for p in &self.basis {
            if !(p.mu.is_finite() && p.v.is_finite() && p.v >= 0.0) {
                return Err(Error::domain(format!("invalid basis kernel {p:?}")));
            }
        }
        if self.noise_var.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::domain("noise variances must be positive and finite"));
        }
        Ok(())
    }

    pub fn n_basis(&self) -> usize {
        self.basis.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.noise_var.len()
    }

    pub fn b_matrices(&self) -> Vec<DMatrix<f64>> {
        self.weights.iter().map(build_b).collect()
    }

    /// Prior covariance between `(d, t)` and `(d2, t2)`, noise excluded.
    pub fn cross_cov(&self, d: usize, d2: usize, t: f64, t2: f64) -> f64 {
        cross_cov(d, d2, t, t2, self)
    }

    /// `sum_q B_q[d, d]`, the noise-free prior variance of covariate `d`.
    pub fn prior_variance(&self, d: usize) -> f64 {
        self.weights
            .iter()
            .map(|w| w.a.row(d).norm_squared() + w.lambda[d])
            .sum()
    }
}

/// `sum_q B_q[d, d2] * k_q(|t - t2|)`.
pub fn cross_cov(d: usize, d2: usize, t: f64, t2: f64, k: &StructuredKernel) -> f64 {
    let tau = (t - t2).abs();
    k.weights
        .iter()
        .zip(&k.basis)
        .map(|(w, p)| {
            let b = w.a.row(d).dot(&w.a.row(d2)) + if d == d2 { w.lambda[d] } else { 0.0 };
            b * sm_basis_kernel(tau, p)
        })
        .sum()
}

/// Gram matrix of the structured kernel over `inputs`, optionally with the
/// per-covariate noise variance added to the diagonal.
///
/// Rows are computed independently, so the result does not depend on the
/// number of rayon workers.
pub fn gram_matrix(inputs: &[IndexedInput], k: &StructuredKernel, with_noise: bool) -> DMatrix<f64> {
    let bs = k.b_matrices();
    let n = inputs.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = inputs[i];
            (0..=i)
                .map(|j| {
                    let xj = inputs[j];
                    let tau = (xi.time - xj.time).abs();
                    let mut acc = 0.0;
                    for (b, p) in bs.iter().zip(&k.basis) {
                        let w = b[(xi.covariate, xj.covariate)];
                        if w != 0.0 {
                            acc += w * sm_basis_kernel(tau, p);
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect();
    let mut g = DMatrix::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (j, val) in row.into_iter().enumerate() {
            g[(i, j)] = val;
            g[(j, i)] = val;
        }
    }
    if with_noise {
        for (i, x) in inputs.iter().enumerate() {
            g[(i, i)] += k.noise_var[x.covariate];
        }
    }
    g
}

/// Matrix of one basis kernel's values `k_q(|t_i - t_j|)` over all input pairs.
pub fn basis_gram(inputs: &[IndexedInput], params: &BasisKernelParams) -> DMatrix<f64> {
    pairwise(inputs, |tau| sm_basis_kernel(tau, params))
}

/// Symmetric matrix `f(|t_i - t_j|)`, filled row-parallel.
pub(crate) fn pairwise<F>(inputs: &[IndexedInput], f: F) -> DMatrix<f64>
where
    F: Fn(f64) -> f64 + Sync,
{
    let n = inputs.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..=i).map(|j| f((inputs[i].time - inputs[j].time).abs())).collect())
        .collect();
    let mut g = DMatrix::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (j, val) in row.into_iter().enumerate() {
            g[(i, j)] = val;
            g[(j, i)] = val;
        }
    }
    g
}

/// Cross-covariance matrix between two input sets (noise excluded).
pub fn cross_gram(rows: &[IndexedInput], cols: &[IndexedInput], k: &StructuredKernel) -> DMatrix<f64> {
    let bs = k.b_matrices();
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        let (a, b) = (rows[i], cols[j]);
        let tau = (a.time - b.time).abs();
        bs.iter()
            .zip(&k.basis)
            .map(|(bm, p)| bm[(a.covariate, b.covariate)] * sm_basis_kernel(tau, p))
            .sum()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_cov_kernel() -> StructuredKernel {
        StructuredKernel::new(
            vec![BasisKernelParams::new(1.0 / 24.0, 1e-5).unwrap(), BasisKernelParams::new(0.0, 3e-5).unwrap()],
            vec![
                CoregionalizationWeights::new(
                    DMatrix::from_row_slice(2, 1, &[0.8, -0.5]),
                    DVector::from_vec(vec![0.1, 0.2]),
                )
                .unwrap(),
                CoregionalizationWeights::new(
                    DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.2, 0.7]),
                    DVector::from_vec(vec![0.0, 0.05]),
                )
                .unwrap(),
            ],
            DVector::from_vec(vec![0.1, 0.3]),
        )
        .unwrap()
    }

    #[test]
    fn se_kernel_values() {
        assert_eq!(se_kernel(3.0, 3.0, 1.0, 2.0).unwrap(), 4.0);
        assert_abs_diff_eq!(se_kernel(0.0, 1.0, 1.0, 1.0).unwrap(), (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(se_kernel(0.0, 1.0, 1.0, 1.0).unwrap(), 0.60653, epsilon = 1e-5);
        let far = se_kernel(0.0, 1e6, 1.0, 1.0).unwrap();
        assert!((0.0..1e-300).contains(&far));
        assert_eq!(se_kernel(1.0, 2.0, 1.0, 1.0).unwrap(), se_kernel(2.0, 1.0, 1.0, 1.0).unwrap());
        assert!(se_kernel(0.0, 1.0, 0.0, 1.0).is_err());
        assert!(se_kernel(0.0, 1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn periodic_kernel_values() {
        assert_eq!(periodic_kernel(5.0, 5.0, 1.0, 1.5, 24.0).unwrap(), 2.25);
        assert_abs_diff_eq!(periodic_kernel(0.0, 24.0, 1.0, 1.0, 24.0).unwrap(), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(periodic_kernel(0.0, 72.0, 1.0, 1.0, 24.0).unwrap(), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(periodic_kernel(0.0, 12.0, 2.0, 1.0, 24.0).unwrap(), (-1.0f64).exp(), epsilon = 1e-15);
        assert!(periodic_kernel(0.0, 1.0, 1.0, 1.0, 0.0).is_err());
        assert!(periodic_kernel(0.0, 1.0, 0.0, 1.0, 24.0).is_err());
    }

    #[test]
    fn sm_basis_values() {
        let p = BasisKernelParams::new(0.3, 0.7).unwrap();
        assert_eq!(sm_basis_kernel(0.0, &p), 1.0);
        let p = BasisKernelParams::new(0.0, 1.0 / (2.0 * PI * PI)).unwrap();
        assert_abs_diff_eq!(sm_basis_kernel(1.0, &p), (-1.0f64).exp(), epsilon = 1e-15);
        let p = BasisKernelParams::new(1.0 / 24.0, 0.0).unwrap();
        assert_abs_diff_eq!(sm_basis_kernel(24.0, &p), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn sm_basis_derivatives_match_finite_differences() {
        let p = BasisKernelParams::new(0.031, 2e-4).unwrap();
        for &tau in &[0.0, 1.5, 13.0, 40.0] {
            let h = 1e-7;
            let fd_v = (sm_basis_kernel(tau, &BasisKernelParams { v: p.v + h, ..p })
                - sm_basis_kernel(tau, &BasisKernelParams { v: p.v - h, ..p }))
                / (2.0 * h);
            let fd_mu = (sm_basis_kernel(tau, &BasisKernelParams { mu: p.mu + h, ..p })
                - sm_basis_kernel(tau, &BasisKernelParams { mu: p.mu - h, ..p }))
                / (2.0 * h);
            assert_abs_diff_eq!(sm_basis_kernel_dv(tau, &p), fd_v, epsilon = 1e-4 * (1.0 + fd_v.abs()));
            assert_abs_diff_eq!(sm_basis_kernel_dmu(tau, &p), fd_mu, epsilon = 1e-6 * (1.0 + fd_mu.abs()));
        }
    }

    #[test]
    fn build_b_cases() {
        let w = CoregionalizationWeights::new(DMatrix::zeros(3, 2), DVector::from_element(3, 1.0)).unwrap();
        assert_eq!(build_b(&w), DMatrix::identity(3, 3));
        let w = CoregionalizationWeights::new(DMatrix::from_row_slice(2, 1, &[1.0, 1.0]), DVector::zeros(2)).unwrap();
        assert_eq!(build_b(&w), DMatrix::from_element(2, 2, 1.0));
        assert!(CoregionalizationWeights::new(DMatrix::zeros(3, 1), DVector::zeros(2)).is_err());
    }

    #[test]
    fn build_b_eigenvalues_bounded_below_by_min_lambda() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let d = rng.random_range(1..6);
            let r = rng.random_range(1..4);
            let a = DMatrix::from_fn(d, r, |_, _| rng.random_range(-2.0..2.0));
            let lambda = DVector::from_fn(d, |_, _| rng.random_range(0.0..1.0));
            let min_l = lambda.min();
            let b = build_b(&CoregionalizationWeights::new(a, lambda).unwrap());
            assert_eq!(b, b.transpose());
            let eig = b.symmetric_eigenvalues();
            assert!(eig.min() >= min_l - 1e-12);
        }
    }

    #[test]
    fn cross_cov_cases() {
        let k = two_cov_kernel();
        let bs = k.b_matrices();
        for d in 0..2 {
            assert_abs_diff_eq!(k.cross_cov(d, d, 5.0, 5.0), bs[0][(d, d)] + bs[1][(d, d)], epsilon = 1e-15);
            assert_abs_diff_eq!(k.cross_cov(d, d, 5.0, 5.0), k.prior_variance(d), epsilon = 1e-15);
        }
        let ident = StructuredKernel::new(
            vec![BasisKernelParams::new(0.1, 0.01).unwrap()],
            vec![CoregionalizationWeights::new(DMatrix::zeros(2, 1), DVector::from_element(2, 1.0)).unwrap()],
            DVector::from_element(2, 0.1),
        )
        .unwrap();
        for &(t, t2) in &[(0.0, 0.0), (1.0, 7.0), (3.0, -2.0)] {
            assert_eq!(ident.cross_cov(0, 1, t, t2), 0.0);
        }
        // term-by-term oracle
        let (d, d2, t, t2) = (0usize, 1usize, 3.0, 17.5);
        let tau: f64 = 14.5;
        let mut expected = 0.0;
        for q in 0..2 {
            let p = k.basis[q];
            let kq = (-2.0 * PI * PI * tau * tau * p.v).exp() * (2.0 * PI * tau * p.mu).cos();
            let a = &k.weights[q].a;
            let mut b = 0.0;
            for r in 0..a.ncols() {
                b += a[(d, r)] * a[(d2, r)];
            }
            expected += b * kq;
        }
        assert_abs_diff_eq!(k.cross_cov(d, d2, t, t2), expected, epsilon = 1e-14);
        assert_abs_diff_eq!(k.cross_cov(d, d2, t, t2), k.cross_cov(d2, d, t2, t), epsilon = 0.0);
    }

    #[test]
    fn gram_single_input() {
        let k = two_cov_kernel();
        let g = gram_matrix(&[IndexedInput::new(1, 4.0)], &k, true);
        assert_abs_diff_eq!(g[(0, 0)], k.prior_variance(1) + 0.3, epsilon = 1e-15);
    }

    #[test]
    fn gram_permutation_conjugates() {
        let k = two_cov_kernel();
        let inputs: Vec<_> = (0..7).map(|i| IndexedInput::new(i % 2, i as f64 * 3.3)).collect();
        let perm = [3usize, 6, 0, 2, 5, 1, 4];
        let permuted: Vec<_> = perm.iter().map(|&i| inputs[i]).collect();
        let g = gram_matrix(&inputs, &k, true);
        let gp = gram_matrix(&permuted, &k, true);
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(gp[(i, j)], g[(perm[i], perm[j])]);
            }
        }
    }

    #[test]
    fn characteristic_feature_values() {
        let (p, _) = characteristic_features(&BasisKernelParams::new(1.0 / 24.0, 0.3).unwrap());
        assert_abs_diff_eq!(p, 24.0, epsilon = 1e-12);
        let (p, l) = characteristic_features(&BasisKernelParams::new(0.0, 0.0).unwrap());
        assert!(p.is_infinite() && l.is_infinite());
        let v = 1.0 / (4.0 * PI * PI * 36.0);
        let (_, l) = characteristic_features(&BasisKernelParams::new(0.1, v).unwrap());
        assert_abs_diff_eq!(l, 6.0, epsilon = 1e-12);
        let back = BasisKernelParams::from_period_length_scale(30.0, 6.0).unwrap();
        assert_abs_diff_eq!(back.v, v, epsilon = 1e-18);
    }

    #[test]
    fn kernel_validation() {
        assert!(BasisKernelParams::new(-0.1, 0.0).is_err());
        assert!(BasisKernelParams::new(0.1, -1.0).is_err());
        let mut k = two_cov_kernel();
        k.noise_var[0] = 0.0;
        assert!(k.validate().is_err());
        let mut k = two_cov_kernel();
        k.weights.pop();
        assert!(k.validate().is_err());
    }
}
