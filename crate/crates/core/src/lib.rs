//! Multi-output Gaussian processes with sparse spectral-mixture
//! coregionalization kernels for irregularly sampled multi-channel series.
//!
//! * [`kernel`]: basis kernels, coregionalization weights, Gram matrices.
//! * [`shrinkage`]: hierarchical gamma prior on the loadings.
//! * [`trainer`]: per-patient fitting.
//! * [`population`]: clustering of fitted kernels into a population prior.
//! * [`online`]: streaming one-step-ahead imputation.
//! * [`data`]: files, synthetic cohorts, benchmarks.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod online;
pub mod population;
pub mod shrinkage;
pub mod trainer;

pub use data::{Observation, ObservationSet, Standardization};
pub use error::{Error, Result};
pub use kernel::{BasisKernelParams, CoregionalizationWeights, IndexedInput, StructuredKernel};
pub use population::PopulationModel;
pub use shrinkage::{PriorConfig, ShrinkageState};
pub use trainer::{fit_patient, FitResult, TrainConfig};
