//! Versioned JSON model files. Matrices are stored as named arrays with an
//! explicit `shape` and row-major `data`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::kernel::{BasisKernelParams, CoregionalizationWeights, StructuredKernel};
use crate::population::{PopulationCluster, PopulationConfig, PopulationModel};
use crate::shrinkage::ShrinkageState;
use crate::trainer::{FitResult, TrainConfig};

pub const FORMAT_VERSION: &str = "1.0.0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
        Self { shape: vec![m.nrows(), m.ncols()], data }
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        Self { shape: vec![v.len()], data: v.iter().copied().collect() }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self.shape[..] {
            [r, c] if r * c == self.data.len() => Ok(DMatrix::from_row_slice(r, c, &self.data)),
            _ => Err(Error::Serialization(format!("array of shape {:?} is not a matrix", self.shape))),
        }
    }

    pub fn to_vector(&self) -> Result<DVector<f64>> {
        match self.shape[..] {
            [n] if n == self.data.len() => Ok(DVector::from_column_slice(&self.data)),
            _ => Err(Error::Serialization(format!("array of shape {:?} is not a vector", self.shape))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelDoc {
    pub basis: Vec<BasisKernelParams>,
    pub a: Vec<Array>,
    pub lambda: Vec<Array>,
    pub noise_var: Array,
}

impl KernelDoc {
    pub fn new(k: &StructuredKernel) -> Self {
        Self {
            basis: k.basis.clone(),
            a: k.weights.iter().map(|w| Array::from_matrix(&w.a)).collect(),
            lambda: k.weights.iter().map(|w| Array::from_vector(&w.lambda)).collect(),
            noise_var: Array::from_vector(&k.noise_var),
        }
    }

    pub fn kernel(&self) -> Result<StructuredKernel> {
        if self.a.len() != self.basis.len() || self.lambda.len() != self.basis.len() {
            return Err(Error::Serialization("kernel arrays disagree on the basis count".into()));
        }
        let weights = self
            .a
            .iter()
            .zip(&self.lambda)
            .map(|(a, l)| Ok(CoregionalizationWeights { a: a.to_matrix()?, lambda: l.to_vector()? }))
            .collect::<Result<Vec<_>>>()?;
        StructuredKernel::new(self.basis.clone(), weights, self.noise_var.to_vector()?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageDoc {
    pub psi: Vec<Array>,
    pub delta: Vec<Array>,
    pub phi: Vec<Array>,
    pub tau: Vec<Array>,
}

impl ShrinkageDoc {
    fn new(s: &ShrinkageState) -> Self {
        Self {
            psi: s.psi.iter().map(Array::from_matrix).collect(),
            delta: s.delta.iter().map(Array::from_matrix).collect(),
            phi: s.phi.iter().map(Array::from_vector).collect(),
            tau: s.tau.iter().map(Array::from_vector).collect(),
        }
    }

    fn state(&self) -> Result<ShrinkageState> {
        let s = ShrinkageState {
            psi: self.psi.iter().map(Array::to_matrix).collect::<Result<_>>()?,
            delta: self.delta.iter().map(Array::to_matrix).collect::<Result<_>>()?,
            phi: self.phi.iter().map(Array::to_vector).collect::<Result<_>>()?,
            tau: self.tau.iter().map(Array::to_vector).collect::<Result<_>>()?,
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientModelDoc {
    pub format_version: String,
    pub kind: String,
    pub patient_id: String,
    pub covariate_names: Vec<String>,
    pub seed: u64,
    pub config: TrainConfig,
    pub kernel: KernelDoc,
    pub shrinkage: Option<ShrinkageDoc>,
    pub standardization: Standardization,
    pub objective_trace: Vec<f64>,
    pub log_marginal: f64,
    pub converged: bool,
    pub n_observations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterDoc {
    pub basis: BasisKernelParams,
    pub b: Array,
    pub a: Array,
    pub lambda: Array,
    /// 1 where a loading is exactly zero and stays frozen online.
    pub sparsity_mask: Array,
    pub member_count: usize,
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationModelDoc {
    pub format_version: String,
    pub kind: String,
    pub covariate_names: Vec<String>,
    pub seed: u64,
    pub config: PopulationConfig,
    pub clusters: Vec<ClusterDoc>,
    pub noise_var: Array,
    pub standardization: Standardization,
    pub n_patients: usize,
}

/// A loaded model file of either kind.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum ModelFile {
    Patient { fit: FitResult, config: TrainConfig },
    Population(PopulationModel),
}

pub fn patient_doc(fit: &FitResult, config: &TrainConfig) -> PatientModelDoc {
    PatientModelDoc {
        format_version: FORMAT_VERSION.into(),
        kind: "patient".into(),
        patient_id: fit.patient_id.clone(),
        covariate_names: fit.covariate_names.clone(),
        seed: fit.seed,
        config: config.clone(),
        kernel: KernelDoc::new(&fit.kernel),
        shrinkage: fit.shrinkage.as_ref().map(ShrinkageDoc::new),
        standardization: fit.standardization.clone(),
        objective_trace: fit.objective_trace.clone(),
        log_marginal: fit.log_marginal,
        converged: fit.converged,
        n_observations: fit.n_observations,
    }
}

pub fn population_doc(model: &PopulationModel) -> PopulationModelDoc {
    PopulationModelDoc {
        format_version: FORMAT_VERSION.into(),
        kind: "population".into(),
        covariate_names: model.covariate_names.clone(),
        seed: model.seed,
        config: model.config.clone(),
        clusters: model
            .clusters
            .iter()
            .map(|c| ClusterDoc {
                basis: c.basis,
                b: Array::from_matrix(&c.b),
                a: Array::from_matrix(&c.weights.a),
                lambda: Array::from_vector(&c.weights.lambda),
                sparsity_mask: Array::from_matrix(&c.weights.a.map(|a| if a == 0.0 { 1.0 } else { 0.0 })),
                member_count: c.member_count,
                coverage: c.coverage,
            })
            .collect(),
        noise_var: Array::from_vector(&model.noise_var),
        standardization: model.standardization.clone(),
        n_patients: model.n_patients,
    }
}

fn check_version(found: &str) -> Result<()> {
    let major = |v: &str| v.split('.').next().and_then(|m| m.parse::<u64>().ok());
    match (major(found), major(FORMAT_VERSION)) {
        (Some(a), Some(b)) if a == b => Ok(()),
        _ => Err(Error::Version { found: found.into(), expected: FORMAT_VERSION.into() }),
    }
}

pub fn model_to_string(model: &ModelFile) -> Result<String> {
    Ok(match model {
        ModelFile::Patient { fit, config } => serde_json::to_string_pretty(&patient_doc(fit, config))?,
        ModelFile::Population(p) => serde_json::to_string_pretty(&population_doc(p))?,
    })
}

pub fn model_from_str(text: &str) -> Result<ModelFile> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Serialization("missing format_version".into()))?;
    check_version(version)?;
    match value.get("kind").and_then(|v| v.as_str()) {
        Some("patient") => {
            let doc: PatientModelDoc = serde_json::from_value(value)?;
            let kernel = doc.kernel.kernel()?;
            let shrinkage = doc.shrinkage.as_ref().map(ShrinkageDoc::state).transpose()?;
            if let Some(s) = &shrinkage {
                if !s.matches(&kernel) {
                    return Err(Error::Serialization("shrinkage state does not match the kernel".into()));
                }
            }
            let fit = FitResult {
                patient_id: doc.patient_id,
                covariate_names: doc.covariate_names,
                kernel,
                shrinkage,
                objective_trace: doc.objective_trace,
                log_marginal: doc.log_marginal,
                converged: doc.converged,
                standardization: doc.standardization,
                n_observations: doc.n_observations,
                seed: doc.seed,
            };
            Ok(ModelFile::Patient { fit, config: doc.config })
        }
        Some("population") => {
            let doc: PopulationModelDoc = serde_json::from_value(value)?;
            let clusters = doc
                .clusters
                .iter()
                .map(|c| {
                    let weights = CoregionalizationWeights { a: c.a.to_matrix()?, lambda: c.lambda.to_vector()? };
                    let mask = c.sparsity_mask.to_matrix()?;
                    if mask.shape() != weights.a.shape()
                        || mask.iter().zip(weights.a.iter()).any(|(m, a)| (*m == 1.0) != (*a == 0.0))
                    {
                        return Err(Error::Serialization("sparsity mask does not match the loadings".into()));
                    }
                    Ok(PopulationCluster {
                        basis: c.basis,
                        b: c.b.to_matrix()?,
                        weights,
                        member_count: c.member_count,
                        coverage: c.coverage,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let model = PopulationModel {
                covariate_names: doc.covariate_names,
                clusters,
                noise_var: doc.noise_var.to_vector()?,
                standardization: doc.standardization,
                n_patients: doc.n_patients,
                config: doc.config,
                seed: doc.seed,
            };
            model.validate()?;
            Ok(ModelFile::Population(model))
        }
        other => Err(Error::Serialization(format!("unknown model kind {other:?}"))),
    }
}

pub fn save_model(path: impl AsRef<Path>, model: &ModelFile) -> Result<()> {
    std::fs::write(path, model_to_string(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    model_from_str(&std::fs::read_to_string(path)?)
}

pub fn load_population(path: impl AsRef<Path>) -> Result<PopulationModel> {
    match load_model(path)? {
        ModelFile::Population(p) => Ok(p),
        ModelFile::Patient { .. } => Err(Error::Model("expected a population model, found a patient model".into())),
    }
}

pub fn load_fit(path: impl AsRef<Path>) -> Result<(FitResult, TrainConfig)> {
    match load_model(path)? {
        ModelFile::Patient { fit, config } => Ok((fit, config)),
        ModelFile::Population(_) => Err(Error::Model("expected a patient model, found a population model".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_rules() {
        assert!(check_version("1.4.2").is_ok());
        assert!(matches!(check_version("2.0.0"), Err(Error::Version { .. })));
        assert!(check_version("x").is_err());
    }

    #[test]
    fn array_layout_is_row_major() {
        let m = DMatrix::from_row_slice(2, 3, &[1., 2., 3., 4., 5., 6.]);
        let a = Array::from_matrix(&m);
        assert_eq!(a.data, vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(a.to_matrix().unwrap(), m);
        assert!(a.to_vector().is_err());
    }
}
