//! Fixtures shared by the benchmarks.

use drim_core::synth::{generate, GeneratorConfig, PatientBatch};
use drim_core::{DrimModel, FusionKind, TrainConfig};

/// Default-shaped synthetic cohort of `n` patients.
pub fn cohort(n: usize) -> PatientBatch {
    generate(&GeneratorConfig {
        n_patients: n,
        ..GeneratorConfig::default()
    })
    .expect("default generator config is valid")
}

/// Untrained model at desk scale for `batch`.
pub fn model(batch: &PatientBatch, fusion: FusionKind) -> DrimModel {
    let cfg = TrainConfig {
        fusion,
        ..TrainConfig::default()
    };
    DrimModel::new(cfg.model_config(batch.feature_dims(), 10.0), 0).expect("valid model config")
}
