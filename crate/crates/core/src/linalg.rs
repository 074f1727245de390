//! Dense symmetric positive-definite factorization with a jitter fallback.

use faer::linalg::solvers::{DenseSolveCore, Llt, Solve};
use faer::{Mat, MatRef, Side};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative jitter added on the first retry, as a fraction of the mean diagonal.
pub const JITTER_START: f64 = 1e-8;
/// Number of jittered retries before giving up.
pub const JITTER_RETRIES: usize = 3;

/// Cholesky factor of `K + jitter * I`.
pub struct SpdFactor {
    llt: Llt<f64>,
    n: usize,
    /// Absolute jitter that was added to the diagonal (0 when none was needed).
    pub jitter: f64,
}

fn as_faer(m: &DMatrix<f64>) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(m.as_slice(), m.nrows(), m.ncols())
}

fn to_nalgebra(m: MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

impl SpdFactor {
    /// Factorizes `k`. On failure adds `1e-8 * mean(diag)` to the diagonal and
    /// retries, escalating the jitter tenfold, up to three times.
    pub fn new(k: &DMatrix<f64>) -> Result<Self> {
        let n = k.nrows();
        if n == 0 || k.ncols() != n {
            return Err(Error::numeric(format!("cannot factor a {}x{} matrix", k.nrows(), k.ncols())));
        }
        if k.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("matrix has non-finite entries"));
        }
        if let Ok(llt) = as_faer(k).llt(Side::Lower) {
            return Ok(Self { llt, n, jitter: 0.0 });
        }
        let mean_diag = (k.diagonal().sum() / n as f64).abs().max(f64::MIN_POSITIVE);
        let mut jitter = JITTER_START * mean_diag;
        for _ in 0..JITTER_RETRIES {
            let mut kj = k.clone();
            for i in 0..n {
                kj[(i, i)] += jitter;
            }
            if let Ok(llt) = as_faer(&kj).llt(Side::Lower) {
                log::debug!("cholesky needed jitter {jitter:e} (n = {n})");
                return Ok(Self { llt, n, jitter });
            }
            jitter *= 10.0;
        }
        Err(Error::numeric(format!(
            "cholesky failed for a {n}x{n} gram matrix after {JITTER_RETRIES} jitter retries"
        )))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn log_det(&self) -> f64 {
        let l = self.llt.L();
        2.0 * (0..self.n).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve_vec(&self, y: &DVector<f64>) -> DVector<f64> {
        let rhs = MatRef::from_column_major_slice(y.as_slice(), y.len(), 1);
        let sol = self.llt.solve(rhs);
        DVector::from_fn(self.n, |i, _| sol[(i, 0)])
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let sol: Mat<f64> = self.llt.solve(as_faer(b));
        to_nalgebra(sol.as_ref())
    }

    /// Solves `L x = b` (forward substitution only).
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let l = self.llt.L();
        let mut x = b.clone();
        for i in 0..self.n {
            let mut s = x[i];
            for j in 0..i {
                s -= l[(i, j)] * x[j];
            }
            x[i] = s / l[(i, i)];
        }
        x
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.llt.inverse();
        let mut out = to_nalgebra(inv.as_ref());
        for i in 0..self.n {
            for j in 0..i {
                let s = 0.5 * (out[(i, j)] + out[(j, i)]);
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }

    /// Lower-triangular factor as a nalgebra matrix.
    pub fn lower(&self) -> DMatrix<f64> {
        let l = self.llt.L();
        DMatrix::from_fn(self.n, self.n, |i, j| if j <= i { l[(i, j)] } else { 0.0 })
    }
}
