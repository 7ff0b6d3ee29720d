//! The full network: per-modality encoders, discriminators and decoders,
//! a fusion stack and the survival heads, all in one parameter store.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Forward, ParamId, ParamStore, Tape, Var};
use crate::encoders::{Decoder, Discriminator, EncoderPair, Encoding, SurvivalHead};
use crate::error::{DrimError, Result};
use crate::fusion::{fuse_shared, fuse_unique, BaselineFusion, BaselineKind, MaFusionBlock, MaFusionConfig};
use crate::losses::IntervalGrid;
use crate::synth::PatientBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    /// Two-scale masked attention fusion of shared and unique streams.
    #[default]
    MaFusion,
    Mean,
    Sum,
    Max,
    Concat,
    Tensor,
}

impl FusionKind {
    pub const ALL: [FusionKind; 6] = [
        Self::MaFusion,
        Self::Mean,
        Self::Sum,
        Self::Max,
        Self::Concat,
        Self::Tensor,
    ];

    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            Self::MaFusion => None,
            Self::Mean => Some(BaselineKind::Mean),
            Self::Sum => Some(BaselineKind::Sum),
            Self::Max => Some(BaselineKind::Max),
            Self::Concat => Some(BaselineKind::Concat),
            Self::Tensor => Some(BaselineKind::Tensor),
        }
    }

    pub fn name(self) -> &'static str {
        self.baseline().map_or("mafusion", BaselineKind::name)
    }
}

impl std::str::FromStr for FusionKind {
    type Err = DrimError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mafusion" {
            Ok(Self::MaFusion)
        } else {
            s.parse::<BaselineKind>().map(|b| match b {
                BaselineKind::Mean => Self::Mean,
                BaselineKind::Sum => Self::Sum,
                BaselineKind::Max => Self::Max,
                BaselineKind::Concat => Self::Concat,
                BaselineKind::Tensor => Self::Tensor,
            })
        }
    }
}

impl std::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture of a model. Stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dims: Vec<usize>,
    pub d: usize,
    /// Encoder hidden width.
    pub hidden: usize,
    pub dropout: f64,
    pub intervals: usize,
    pub t_max: f64,
    pub normalize_shared: bool,
    pub fusion: FusionKind,
    pub mafusion: MaFusionConfig,
    pub aux_unique_heads: bool,
    pub decoders: bool,
    pub tensor_budget: u64,
}

impl ModelConfig {
    pub fn modalities(&self) -> usize {
        self.feature_dims.len()
    }

    pub fn grid(&self) -> Result<IntervalGrid> {
        IntervalGrid::new(self.intervals, self.t_max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dims.is_empty() || self.feature_dims.contains(&0) {
            return Err(DrimError::Config("every modality needs at least one feature".into()));
        }
        if self.d == 0 || self.hidden == 0 || self.intervals == 0 {
            return Err(DrimError::Config("d, hidden and intervals must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DrimError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.t_max > 0.0) {
            return Err(DrimError::Config(format!("t_max must be positive, got {}", self.t_max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum FusionLayers {
    Drim {
        shared: MaFusionBlock,
        unique: MaFusionBlock,
    },
    Baseline(BaselineFusion),
}

/// Every network of one model and the store holding their parameters.
#[derive(Debug, Clone)]
pub struct DrimModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoders: Vec<EncoderPair>,
    pub discriminators: Vec<Discriminator>,
    pub decoders: Vec<Decoder>,
    pub fusion: FusionLayers,
    pub head: SurvivalHead,
    pub aux_heads: Vec<SurvivalHead>,
}

/// Output of one full forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput<'t> {
    pub inputs: Vec<Var<'t>>,
    pub encodings: Vec<Encoding<'t>>,
    pub hazards: Var<'t>,
}

/// Parameter-name fragment owned by the discriminators.
pub const DISC_TAG: &str = ".disc.";

struct TaskLayers {
    fusion: FusionLayers,
    head: SurvivalHead,
    aux_heads: Vec<SurvivalHead>,
}

fn build_task_layers(store: &mut ParamStore, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<TaskLayers> {
    let (d, m) = (config.d, config.modalities());
    let fusion = match config.fusion.baseline() {
        None => FusionLayers::Drim {
            shared: MaFusionBlock::new(store, "fusion.shared", d, m, config.mafusion, rng)?,
            unique: MaFusionBlock::new(store, "fusion.unique", d, m + 1, config.mafusion, rng)?,
        },
        Some(kind) => FusionLayers::Baseline(BaselineFusion::new(store, kind, m, d, d, config.tensor_budget, rng)?),
    };
    let head_in = match &fusion {
        FusionLayers::Drim { .. } => d,
        FusionLayers::Baseline(b) => b.out_dim(),
    };
    let head = SurvivalHead::new(store, "head", head_in, d, config.intervals, config.dropout, rng);
    let aux_heads = if config.aux_unique_heads && config.fusion == FusionKind::MaFusion {
        (0..m)
            .map(|k| SurvivalHead::new(store, &format!("mod{k}.aux_head"), d, d, config.intervals, config.dropout, rng))
            .collect()
    } else {
        Vec::new()
    };
    Ok(TaskLayers { fusion, head, aux_heads })
}

impl DrimModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let encoders = config
            .feature_dims
            .iter()
            .enumerate()
            .map(|(m, &dm)| {
                EncoderPair::new(&mut store, m, dm, d, config.hidden, config.dropout, config.normalize_shared, &mut rng)
            })
            .collect();
        let discriminators = (0..config.modalities())
            .map(|m| Discriminator::new(&mut store, m, d, &mut rng))
            .collect();
        let decoders = if config.decoders {
            config
                .feature_dims
                .iter()
                .enumerate()
                .map(|(m, &dm)| Decoder::new(&mut store, m, d, config.hidden, dm, config.dropout, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        let task = build_task_layers(&mut store, &config, &mut rng)?;
        Ok(Self {
            config,
            store,
            encoders,
            discriminators,
            decoders,
            fusion: task.fusion,
            head: task.head,
            aux_heads: task.aux_heads,
        })
    }

    pub fn grid(&self) -> Result<IntervalGrid> {
        self.config.grid()
    }

    pub fn modalities(&self) -> usize {
        self.config.modalities()
    }

    /// Draw fresh fusion and head parameters, leaving encoders untouched.
    pub fn reinit_task_layers(&mut self, seed: u64) -> Result<()> {
        let mut scratch = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_task_layers(&mut scratch, &self.config, &mut rng)?;
        for (_, p) in scratch.iter() {
            let id = self
                .store
                .id(&p.name)
                .ok_or_else(|| DrimError::Config(format!("missing parameter {}", p.name)))?;
            self.store.get_mut(id).value = p.value.clone();
        }
        Ok(())
    }

    pub fn set_encoders_trainable(&mut self, trainable: bool) {
        for m in 0..self.modalities() {
            self.store.set_trainable(&format!("mod{m}.shared."), trainable);
            self.store.set_trainable(&format!("mod{m}.unique."), trainable);
        }
    }

    pub fn is_encoder_param(&self, id: ParamId) -> bool {
        let name = &self.store.get(id).name;
        name.contains(".shared.layer") || name.contains(".unique.layer")
    }

    pub fn is_disc_param(&self, id: ParamId) -> bool {
        self.store.get(id).name.contains(DISC_TAG)
    }

    /// Feature matrices of `batch` as tape constants.
    pub fn inputs<'t>(&self, tape: &'t Tape, batch: &PatientBatch) -> Result<Vec<Var<'t>>> {
        if batch.feature_dims() != self.config.feature_dims {
            return Err(DrimError::Data(format!(
                "cohort feature sizes {:?} do not match the model's {:?}",
                batch.feature_dims(),
                self.config.feature_dims
            )));
        }
        Ok(batch
            .features
            .iter()
            .map(|f| tape.constant(f.clone().into_dyn()))
            .collect())
    }

    pub fn encode<'t>(
        &self,
        fw: &mut Forward<'t, '_>,
        inputs: &[Var<'t>],
        present: &[Vec<bool>],
    ) -> Result<Vec<Encoding<'t>>> {
        // Frozen encoders feed the rest of the graph detached, even when their
        // parameters are bound as tracked leaves for auditing.
        let frozen = !self.encoders_trainable();
        let train = fw.train;
        if frozen {
            fw.train = false;
        }
        let out = self
            .encoders
            .iter()
            .zip(inputs)
            .zip(present)
            .map(|((enc, x), p)| {
                let e = enc.encode(fw, *x, p)?;
                Ok(if frozen {
                    Encoding {
                        shared: e.shared.detach(),
                        unique: e.unique.detach(),
                    }
                } else {
                    e
                })
            })
            .collect();
        fw.train = train;
        out
    }

    fn encoders_trainable(&self) -> bool {
        self.store
            .iter()
            .filter(|(id, _)| self.is_encoder_param(*id))
            .any(|(_, p)| p.trainable)
    }

    /// Fusion and survival head on top of existing encodings. Returns the
    /// hazards.
    pub fn fuse_and_predict<'t>(
        &self,
        fw: &mut Forward<'t, '_>,
        encodings: &[Encoding<'t>],
        present: &[Vec<bool>],
    ) -> Result<Var<'t>> {
        let fused = match &self.fusion {
            FusionLayers::Drim { shared, unique } => {
                let s: Vec<Var<'t>> = encodings.iter().map(|e| e.shared).collect();
                let u: Vec<Var<'t>> = encodings.iter().map(|e| e.unique).collect();
                let global = fuse_shared(shared, fw, &s, present)?.fused;
                fuse_unique(unique, fw, &u, global, present)?.fused
            }
            FusionLayers::Baseline(b) => {
                let s: Vec<Var<'t>> = encodings.iter().map(|e| e.shared).collect();
                b.forward(fw, &s, present)?
            }
        };
        self.head.forward(fw, fused)
    }

    pub fn forward<'t>(&self, fw: &mut Forward<'t, '_>, batch: &PatientBatch) -> Result<ModelOutput<'t>> {
        let inputs = self.inputs(fw.tape, batch)?;
        let encodings = self.encode(fw, &inputs, &batch.present)?;
        let hazards = self.fuse_and_predict(fw, &encodings, &batch.present)?;
        Ok(ModelOutput {
            inputs,
            encodings,
            hazards,
        })
    }

    /// Eval-mode hazards, N×P.
    pub fn predict(&self, batch: &PatientBatch) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let mut fw = Forward::new(&tape, &self.store, false, ChaCha8Rng::seed_from_u64(0));
        let out = self.forward(&mut fw, batch)?;
        to_matrix(out.hazards.value())
    }

    /// Eval-mode shared and unique representations per modality.
    pub fn representations(&self, batch: &PatientBatch) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
        let tape = Tape::new();
        let mut fw = Forward::new(&tape, &self.store, false, ChaCha8Rng::seed_from_u64(0));
        let inputs = self.inputs(&tape, batch)?;
        let enc = self.encode(&mut fw, &inputs, &batch.present)?;
        let mut shared = Vec::new();
        let mut unique = Vec::new();
        for e in enc {
            shared.push(to_matrix(e.shared.value())?);
            unique.push(to_matrix(e.unique.value())?);
        }
        Ok((shared, unique))
    }

    pub fn param_count(&self) -> usize {
        self.store.count_scalars("")
    }
}

pub(crate) fn to_matrix(a: Array) -> Result<Array2<f64>> {
    a.into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| DrimError::Numerical(format!("expected a matrix: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, GeneratorConfig};

    pub(crate) fn small_config(fusion: FusionKind) -> ModelConfig {
        ModelConfig {
            feature_dims: vec![6, 5, 4],
            d: 4,
            hidden: 8,
            dropout: 0.1,
            intervals: 5,
            t_max: 10.0,
            normalize_shared: true,
            fusion,
            mafusion: MaFusionConfig {
                heads: 2,
                head_dim: 3,
                slot_embeddings: true,
            },
            aux_unique_heads: true,
            decoders: true,
            tensor_budget: 1 << 20,
        }
    }

    fn small_batch() -> PatientBatch {
        generate(&GeneratorConfig {
            n_patients: 12,
            feature_dims: vec![6, 5, 4],
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn every_fusion_kind_predicts_valid_hazards() {
        let batch = small_batch();
        for kind in FusionKind::ALL {
            let model = DrimModel::new(small_config(kind), 1).unwrap();
            let h = model.predict(&batch).unwrap();
            assert_eq!(h.dim(), (12, 5));
            assert!(h.iter().all(|v| *v > 0.0 && *v < 1.0), "{kind}");
            assert_eq!(model.predict(&batch).unwrap(), h);
        }
    }

    #[test]
    fn reinit_changes_only_task_layers() {
        let mut model = DrimModel::new(small_config(FusionKind::MaFusion), 2).unwrap();
        let before = model.store.clone();
        model.reinit_task_layers(99).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(model.store.iter()) {
            let task = a.name.starts_with("fusion.") || a.name.starts_with("head.") || a.name.contains("aux_head");
            assert_eq!(a.value != b.value, task, "{}", a.name);
        }
    }

    #[test]
    fn fusion_kind_names_round_trip() {
        for kind in FusionKind::ALL {
            assert_eq!(kind.name().parse::<FusionKind>().unwrap(), kind);
        }
        assert!("product".parse::<FusionKind>().is_err());
    }

    #[test]
    fn mismatched_cohort_is_rejected() {
        let model = DrimModel::new(small_config(FusionKind::Mean), 3).unwrap();
        let batch = generate(&GeneratorConfig {
            n_patients: 10,
            ..GeneratorConfig::default()
        })
        .unwrap();
        assert!(matches!(model.predict(&batch), Err(DrimError::Data(_))));
    }
}
