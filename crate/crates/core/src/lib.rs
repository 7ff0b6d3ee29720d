//! Disentangled shared/unique multimodal representation learning for
//! survival prediction on incomplete multimodal cohorts.

pub mod autodiff;
pub mod checkpoint;
pub mod cohort;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod probe;
pub mod synth;
pub mod training;

pub use autodiff::{Precision, Tape, Var};
pub use error::{DrimError, Result};
pub use experiment::ExperimentSpec;
pub use fusion::{BaselineKind, MaFusionConfig};
pub use losses::IntervalGrid;
pub use metrics::{MetricReport, RiskScore};
pub use model::{DrimModel, FusionKind, ModelConfig};
pub use synth::{GeneratorConfig, GroundTruth, PatientBatch};
pub use training::{Regime, TrainConfig};
