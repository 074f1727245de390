//! Flat parameter-vector layout shared by the gradients, the optimizer and
//! serialized models.
//!
//! Blocks appear in this order:
//!
//! 1. `mu[q]` for every basis kernel,
//! 2. `v[q]` for every basis kernel,
//! 3. `A_q` row-major (`d` outer, `r` inner), for `q = 0..Q`,
//! 4. `lambda_q` (length D), for `q = 0..Q`,
//! 5. `log sigma^2_d` for every covariate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{BasisKernelParams, CoregionalizationWeights, StructuredKernel};

/// Identifies one entry of the parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamId {
    Mu(usize),
    V(usize),
    A { q: usize, d: usize, r: usize },
    Lambda { q: usize, d: usize },
    LogNoise(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    n_covariates: usize,
    columns: Vec<usize>,
    a_offsets: Vec<usize>,
    lambda_offset: usize,
    noise_offset: usize,
    len: usize,
}

impl ParamLayout {
    pub fn new(n_covariates: usize, columns: Vec<usize>) -> Self {
        let q = columns.len();
        let mut a_offsets = Vec::with_capacity(q);
        let mut off = 2 * q;
        for &r in &columns {
            a_offsets.push(off);
            off += n_covariates * r;
        }
        let lambda_offset = off;
        let noise_offset = lambda_offset + q * n_covariates;
        let len = noise_offset + n_covariates;
        Self { n_covariates, columns, a_offsets, lambda_offset, noise_offset, len }
    }

    pub fn for_kernel(k: &StructuredKernel) -> Self {
        Self::new(k.n_covariates(), k.weights.iter().map(|w| w.a.ncols()).collect())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_basis(&self) -> usize {
        self.columns.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    pub fn index(&self, id: ParamId) -> usize {
        let q_total = self.columns.len();
        match id {
            ParamId::Mu(q) => q,
            ParamId::V(q) => q_total + q,
            ParamId::A { q, d, r } => self.a_offsets[q] + d * self.columns[q] + r,
            ParamId::Lambda { q, d } => self.lambda_offset + q * self.n_covariates + d,
            ParamId::LogNoise(d) => self.noise_offset + d,
        }
    }

    /// Every parameter in layout order.
    pub fn ids(&self) -> Vec<ParamId> {
        let q_total = self.columns.len();
        let mut ids = Vec::with_capacity(self.len);
        ids.extend((0..q_total).map(ParamId::Mu));
        ids.extend((0..q_total).map(ParamId::V));
        for (q, &r_q) in self.columns.iter().enumerate() {
            for d in 0..self.n_covariates {
                for r in 0..r_q {
                    ids.push(ParamId::A { q, d, r });
                }
            }
        }
        for q in 0..q_total {
            for d in 0..self.n_covariates {
                ids.push(ParamId::Lambda { q, d });
            }
        }
        ids.extend((0..self.n_covariates).map(ParamId::LogNoise));
        ids
    }

    pub fn pack(&self, k: &StructuredKernel) -> DVector<f64> {
        let mut x = DVector::zeros(self.len);
        for (q, (p, w)) in k.basis.iter().zip(&k.weights).enumerate() {
            x[self.index(ParamId::Mu(q))] = p.mu;
            x[self.index(ParamId::V(q))] = p.v;
            for d in 0..self.n_covariates {
                for r in 0..self.columns[q] {
                    x[self.index(ParamId::A { q, d, r })] = w.a[(d, r)];
                }
                x[self.index(ParamId::Lambda { q, d })] = w.lambda[d];
            }
        }
        for d in 0..self.n_covariates {
            x[self.index(ParamId::LogNoise(d))] = k.noise_var[d].ln();
        }
        x
    }

    /// Inverse of [`ParamLayout::pack`]; fails if the result is not a valid kernel.
    pub fn unpack(&self, x: &[f64]) -> Result<StructuredKernel> {
        if x.len() != self.len {
            return Err(Error::domain(format!("parameter vector has {} entries, expected {}", x.len(), self.len)));
        }
        let mut basis = Vec::with_capacity(self.n_basis());
        let mut weights = Vec::with_capacity(self.n_basis());
        for q in 0..self.n_basis() {
            basis.push(BasisKernelParams { mu: x[self.index(ParamId::Mu(q))], v: x[self.index(ParamId::V(q))] });
            let a = DMatrix::from_fn(self.n_covariates, self.columns[q], |d, r| x[self.index(ParamId::A { q, d, r })]);
            let lambda = DVector::from_fn(self.n_covariates, |d, _| x[self.index(ParamId::Lambda { q, d })]);
            weights.push(CoregionalizationWeights { a, lambda });
        }
        let noise_var = DVector::from_fn(self.n_covariates, |d, _| x[self.index(ParamId::LogNoise(d))].exp());
        StructuredKernel::new(basis, weights, noise_var)
    }
}
