//! Observation containers, cohort and model files, synthetic cohorts and the
//! timing harness.

pub mod bench;
pub mod dataset;
pub mod model_io;
mod observation;
pub mod synth;

pub use dataset::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use model_io::{load_fit, load_model, load_population, save_model, ModelFile, FORMAT_VERSION};
pub use observation::{Channel, Observation, ObservationSet, Standardization};
pub use synth::{default_spec, synth_generate, SyntheticSpec};
