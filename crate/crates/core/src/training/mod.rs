//! Supervised end-to-end training, unsupervised pretraining with
//! fine-tuning, and the alternating discriminator/encoder updates.

mod optim;

pub use optim::{cosine_lr, AdamW};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Forward, ParamId, ParamStore, Precision, Tape, Var};
use crate::error::{DrimError, Result};
use crate::fusion::MaFusionConfig;
use crate::losses::{
    adversarial_loss, discriminator_loss, drim_total, reconstruction_loss, shared_loss, survival_loss,
    IntervalGrid, SharedStack, UniqueLossOptions,
};
use crate::model::{DrimModel, FusionKind, ModelConfig};
use crate::synth::PatientBatch;

/// Smallest minibatch worth a step; a shorter tail batch is dropped.
pub const MIN_BATCH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Supervised end-to-end training.
    #[default]
    Surv,
    /// Reconstruction pretraining, then a survival stack on frozen encoders.
    Unsup,
}

impl std::str::FromStr for Regime {
    type Err = DrimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "surv" => Ok(Self::Surv),
            "unsup" => Ok(Self::Unsup),
            other => Err(DrimError::Config(format!("unknown regime {other:?} (surv or unsup)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub disc_lr: f64,
    pub disc_weight_decay: f64,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub intervals: usize,
    pub d: usize,
    /// Encoder hidden width; 4d when unset.
    pub hidden: Option<usize>,
    pub dropout: f64,
    pub seed: u64,
    pub regime: Regime,
    pub fusion: FusionKind,
    pub mafusion: MaFusionConfig,
    pub aux_unique_heads: bool,
    pub normalize_shared: bool,
    pub adv_updates_shared: bool,
    /// Discriminator updates per main update.
    pub disc_steps: usize,
    pub tensor_budget: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-2,
            disc_lr: 1e-3,
            disc_weight_decay: 3e-4,
            epochs: 30,
            finetune_epochs: 10,
            batch_size: 24,
            gamma: 0.8,
            tau: 0.1,
            intervals: 20,
            d: 16,
            hidden: None,
            dropout: 0.1,
            seed: 0,
            regime: Regime::Surv,
            fusion: FusionKind::MaFusion,
            mafusion: MaFusionConfig::default(),
            aux_unique_heads: true,
            normalize_shared: true,
            adv_updates_shared: false,
            disc_steps: 1,
            tensor_budget: 100_000_000,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("disc_lr", self.disc_lr),
            ("tau", self.tau),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DrimError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("disc_weight_decay", self.disc_weight_decay),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DrimError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.intervals == 0 || self.d == 0 || self.disc_steps == 0 {
            return Err(DrimError::Config(
                "epochs, batch_size, intervals, d and disc_steps must be positive".into(),
            ));
        }
        if self.regime == Regime::Unsup && self.finetune_epochs == 0 {
            return Err(DrimError::Config("finetune_epochs must be positive".into()));
        }
        if self.regime == Regime::Unsup && self.fusion != FusionKind::MaFusion {
            return Err(DrimError::Config("the unsupervised regime uses attention fusion".into()));
        }
        Ok(())
    }

    /// Architecture for a cohort with the given feature sizes and follow-up.
    pub fn model_config(&self, feature_dims: Vec<usize>, t_max: f64) -> ModelConfig {
        ModelConfig {
            feature_dims,
            d: self.d,
            hidden: self.hidden.unwrap_or(4 * self.d),
            dropout: self.dropout,
            intervals: self.intervals,
            t_max,
            normalize_shared: self.normalize_shared,
            fusion: self.fusion,
            mafusion: self.mafusion,
            aux_unique_heads: self.aux_unique_heads,
            decoders: self.regime == Regime::Unsup,
            tensor_budget: self.tensor_budget,
        }
    }
}

/// Interval-grid horizon for a training cohort: its largest observed time.
pub fn horizon_of(batch: &PatientBatch) -> f64 {
    let t = batch.time.iter().copied().fold(0.0, f64::max);
    if t > 0.0 {
        t
    } else {
        1.0
    }
}

/// One row of the epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss_total: f64,
    pub loss_task: f64,
    pub loss_shared: f64,
    pub loss_adv: f64,
    pub loss_disc: f64,
    pub lr: f64,
}

/// Loss values of one minibatch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchLosses {
    pub total: f64,
    pub task: f64,
    pub shared: f64,
    pub adv: f64,
    pub disc: f64,
    /// L2 norm of the gradient reaching frozen encoder parameters.
    pub frozen_grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Survival,
    Reconstruction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    AfterDisc,
    AfterMain,
}

/// Optimizer state and step counters for one training phase.
pub struct Trainer {
    pub model: DrimModel,
    pub config: TrainConfig,
    pub objective: Objective,
    /// Encoders are frozen: only the task loss is used, no disc updates.
    pub finetune: bool,
    main_opt: AdamW,
    disc_opt: AdamW,
    total_steps: u64,
    grid: IntervalGrid,
    /// When set, a copy of the store is kept after each update phase.
    pub snapshots: Option<Vec<(Phase, ParamStore)>>,
    pub skipped_batches: usize,
}

fn values_of(vars: &[Var<'_>]) -> Vec<Array> {
    vars.iter().map(|v| v.value()).collect()
}

impl Trainer {
    pub fn new(model: DrimModel, config: TrainConfig, objective: Objective, finetune: bool, total_steps: u64) -> Result<Self> {
        let grid = model.grid()?;
        Ok(Self {
            main_opt: AdamW::new(config.lr, config.weight_decay),
            disc_opt: AdamW::new(config.disc_lr, config.disc_weight_decay),
            model,
            config,
            objective,
            finetune,
            total_steps,
            grid,
            snapshots: None,
            skipped_batches: 0,
        })
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.config.lr, self.main_opt.steps(), self.total_steps)
    }

    pub fn skipped_steps(&self) -> usize {
        self.main_opt.skipped() + self.disc_opt.skipped()
    }

    /// Adversarial machinery is active for attention fusion and for
    /// pretraining; baselines train on the task loss alone.
    fn disentangles(&self) -> bool {
        !self.finetune && (self.model.config.fusion == FusionKind::MaFusion || self.objective == Objective::Reconstruction)
    }

    /// Discriminator update(s) on detached representations. Returns the
    /// discriminator loss before the first update.
    pub fn disc_step(
        &mut self,
        shared: &[Array],
        unique: &[Array],
        present: &[Vec<bool>],
        update: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let m = self.model.modalities();
        let mut first = 0.0;
        let steps = if update { self.config.disc_steps } else { 1 };
        for k in 0..steps {
            let tape = Tape::with_precision(self.config.precision);
            let mut fw = Forward::new(&tape, &self.model.store, update, ChaCha8Rng::seed_from_u64(rng.random()));
            let s: Vec<Var<'_>> = shared.iter().map(|a| tape.constant(a.clone())).collect();
            let u: Vec<Var<'_>> = unique.iter().map(|a| tape.constant(a.clone())).collect();
            let (loss, skipped) = discriminator_loss(&mut fw, &self.model.discriminators, &s, &u, present, rng)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(DrimError::Numerical(format!("discriminator loss is {value}")));
            }
            if k == 0 {
                first = value;
            }
            if !update || skipped.len() == m {
                break;
            }
            tape.backward(loss)?;
            let grads: Vec<(ParamId, Array)> = fw
                .grads()
                .into_iter()
                .filter(|(id, _)| self.model.is_disc_param(*id))
                .collect();
            drop(fw);
            let lr = cosine_lr(self.config.disc_lr, self.disc_opt.steps(), self.total_steps * self.config.disc_steps as u64);
            self.disc_opt.step(&mut self.model.store, &grads, lr);
        }
        Ok(first)
    }

    /// Forward, losses and (if `update`) both updates for one minibatch.
    /// `Ok(None)` marks a skipped, degenerate batch.
    pub fn run_batch(&mut self, batch: &PatientBatch, update: bool, rng: &mut ChaCha8Rng) -> Result<Option<BatchLosses>> {
        let tape = Tape::with_precision(self.config.precision);
        let fw_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let m = self.model.modalities();
        let disentangle = self.disentangles();
        let present = &batch.present;

        let mut fw = Forward::new(&tape, &self.model.store, update, fw_rng);
        fw.track_frozen = self.finetune;
        let inputs = self.model.inputs(&tape, batch)?;
        let enc = self.model.encode(&mut fw, &inputs, present)?;
        let s: Vec<Var<'_>> = enc.iter().map(|e| e.shared).collect();
        let u: Vec<Var<'_>> = enc.iter().map(|e| e.unique).collect();

        let shared = if disentangle && m >= 2 {
            let stack = SharedStack::from_modalities(&tape, &s, present, self.config.tau)?;
            match shared_loss(&stack) {
                Ok(v) => v,
                Err(DrimError::DegenerateBatch(msg)) => {
                    log::warn!("skipping batch: {msg}");
                    self.skipped_batches += 1;
                    return Ok(None);
                }
                Err(e) => return Err(e),
            }
        } else {
            tape.scalar(0.0)
        };

        let mut disc = 0.0;
        if disentangle {
            let (s_vals, u_vals) = (values_of(&s), values_of(&u));
            let state = fw.suspend();
            disc = self.disc_step(&s_vals, &u_vals, present, update, rng)?;
            if let Some(snaps) = self.snapshots.as_mut() {
                snaps.push((Phase::AfterDisc, self.model.store.clone()));
            }
            fw = Forward::resume(&tape, &self.model.store, state);
        }

        let adv = if disentangle {
            let opts = UniqueLossOptions {
                adv_updates_shared: self.config.adv_updates_shared,
            };
            adversarial_loss(&mut fw, &self.model.discriminators, &s, &u, present, opts)?.0
        } else {
            tape.scalar(0.0)
        };

        let task = match self.objective {
            Objective::Survival => {
                let hazards = match self.model.fuse_and_predict(&mut fw, &enc, present) {
                    Ok(h) => h,
                    Err(DrimError::NoModality(i)) => {
                        log::warn!("skipping batch: patient {i} has no modality");
                        self.skipped_batches += 1;
                        return Ok(None);
                    }
                    Err(e) => return Err(e),
                };
                let mut lt = survival_loss(hazards, &batch.time, &batch.event, &self.grid)?;
                if !self.model.aux_heads.is_empty() {
                    let mut aux = tape.scalar(0.0);
                    for (k, head) in self.model.aux_heads.iter().enumerate() {
                        let rows: Vec<usize> = (0..batch.n_patients()).filter(|&i| present[k][i]).collect();
                        if rows.is_empty() {
                            continue;
                        }
                        let h = head.forward(&mut fw, u[k].gather_rows(&rows)?)?;
                        let times: Vec<f64> = rows.iter().map(|&i| batch.time[i]).collect();
                        let events: Vec<bool> = rows.iter().map(|&i| batch.event[i]).collect();
                        aux = aux.add(&survival_loss(h, &times, &events, &self.grid)?)?;
                    }
                    lt = lt.add(&aux.scale(1.0 / m as f64))?;
                }
                lt
            }
            Objective::Reconstruction => {
                let recon = self
                    .model
                    .decoders
                    .iter()
                    .zip(&u)
                    .map(|(dec, u)| dec.forward(&mut fw, *u))
                    .collect::<Result<Vec<_>>>()?;
                reconstruction_loss(&tape, &recon, &inputs, present)?
            }
        };

        let total = drim_total(task, shared, adv, self.config.gamma)?;
        let value = total.item();
        if !value.is_finite() {
            return Err(DrimError::Numerical(format!("total loss is {value}")));
        }
        let mut losses = BatchLosses {
            total: value,
            task: task.item(),
            shared: shared.item(),
            adv: adv.item(),
            disc,
            frozen_grad_norm: 0.0,
        };
        if update {
            tape.backward(total)?;
            let mut frozen_sq = 0.0;
            let mut grads = Vec::new();
            for (id, g) in fw.grads() {
                let p = self.model.store.get(id);
                if !p.trainable {
                    frozen_sq += g.iter().map(|v| v * v).sum::<f64>();
                } else if !self.model.is_disc_param(id) {
                    grads.push((id, g));
                }
            }
            losses.frozen_grad_norm = frozen_sq.sqrt();
            drop(fw);
            let lr = self.current_lr();
            self.main_opt.step(&mut self.model.store, &grads, lr);
            if let Some(snaps) = self.snapshots.as_mut() {
                snaps.push((Phase::AfterMain, self.model.store.clone()));
            }
        }
        Ok(Some(losses))
    }

    /// One pass over `data` in shuffled minibatches.
    pub fn run_epoch(&mut self, data: &PatientBatch, epoch: usize, rng: &mut ChaCha8Rng) -> Result<(EpochLog, f64)> {
        let batches = minibatches(data.n_patients(), self.config.batch_size, rng);
        let mut sums = BatchLosses::default();
        let mut frozen_max: f64 = 0.0;
        let mut count = 0usize;
        for idx in batches {
            let batch = data.select(&idx);
            if let Some(l) = self.run_batch(&batch, true, rng)? {
                accumulate(&mut sums, &l);
                frozen_max = frozen_max.max(l.frozen_grad_norm);
                count += 1;
            }
        }
        Ok((self.log_row(epoch, "train", &sums, count), frozen_max))
    }

    /// Losses on held-out data in eval mode, without any update.
    pub fn evaluate_losses(&mut self, data: &PatientBatch, epoch: usize, rng: &mut ChaCha8Rng) -> Result<EpochLog> {
        let mut sums = BatchLosses::default();
        let count = match self.run_batch(data, false, rng)? {
            Some(l) => {
                accumulate(&mut sums, &l);
                1
            }
            None => 0,
        };
        Ok(self.log_row(epoch, "val", &sums, count))
    }

    fn log_row(&self, epoch: usize, split: &str, sums: &BatchLosses, count: usize) -> EpochLog {
        let c = count.max(1) as f64;
        EpochLog {
            epoch,
            split: split.to_string(),
            loss_total: sums.total / c,
            loss_task: sums.task / c,
            loss_shared: sums.shared / c,
            loss_adv: sums.adv / c,
            loss_disc: sums.disc / c,
            lr: self.current_lr(),
        }
    }
}

fn accumulate(sums: &mut BatchLosses, l: &BatchLosses) {
    sums.total += l.total;
    sums.task += l.task;
    sums.shared += l.shared;
    sums.adv += l.adv;
    sums.disc += l.disc;
}

/// Shuffled minibatches drawn without replacement; a tail shorter than
/// [`MIN_BATCH`] is dropped.
pub fn minibatches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .filter(|c| c.len() >= MIN_BATCH.min(batch_size))
        .map(<[usize]>::to_vec)
        .collect()
}

fn steps_per_epoch(n: usize, batch_size: usize) -> u64 {
    let full = n / batch_size;
    let tail = n % batch_size;
    (full + usize::from(tail >= MIN_BATCH.min(batch_size) && tail > 0)) as u64
}

/// A trained model with its epoch log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DrimModel,
    pub log: Vec<EpochLog>,
    pub skipped_batches: usize,
    pub skipped_steps: usize,
    /// Largest frozen-parameter gradient norm seen during fine-tuning.
    pub frozen_grad_norm: f64,
}

fn run_phase(
    trainer: &mut Trainer,
    train: &PatientBatch,
    val: Option<&PatientBatch>,
    epochs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<EpochLog>, f64)> {
    let mut log = Vec::new();
    let mut frozen: f64 = 0.0;
    if let Some(v) = val {
        log.push(trainer.evaluate_losses(v, 0, rng)?);
    }
    for epoch in 1..=epochs {
        let (row, f) = trainer.run_epoch(train, epoch, rng)?;
        frozen = frozen.max(f);
        log::info!(
            "epoch {epoch}: total {:.4} task {:.4} shared {:.4} adv {:.4} disc {:.4}",
            row.loss_total,
            row.loss_task,
            row.loss_shared,
            row.loss_adv,
            row.loss_disc
        );
        log.push(row);
        if let Some(v) = val {
            log.push(trainer.evaluate_losses(v, epoch, rng)?);
        }
    }
    Ok((log, frozen))
}

fn check_cohort(train: &PatientBatch, cfg: &TrainConfig) -> Result<()> {
    train.check_consistent()?;
    if train.n_patients() < MIN_BATCH.min(cfg.batch_size) {
        return Err(DrimError::Data(format!(
            "training needs at least {} patients, got {}",
            MIN_BATCH,
            train.n_patients()
        )));
    }
    Ok(())
}

/// Supervised training of the full model (or of a baseline fusion model).
pub fn train_drim_surv(train: &PatientBatch, val: Option<&PatientBatch>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_cohort(train, cfg)?;
    let mut surv = cfg.clone();
    surv.regime = Regime::Surv;
    let model = DrimModel::new(surv.model_config(train.feature_dims(), horizon_of(train)), cfg.seed)?;
    let steps = steps_per_epoch(train.n_patients(), cfg.batch_size) * cfg.epochs as u64;
    let mut trainer = Trainer::new(model, surv, Objective::Survival, false, steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let (log, _) = run_phase(&mut trainer, train, val, cfg.epochs, &mut rng)?;
    Ok(TrainOutcome {
        skipped_batches: trainer.skipped_batches,
        skipped_steps: trainer.skipped_steps(),
        model: trainer.model,
        log,
        frozen_grad_norm: 0.0,
    })
}

/// Fit a fresh fusion and head stack on top of `model`'s frozen encoders.
pub fn finetune(model: DrimModel, train: &PatientBatch, val: Option<&PatientBatch>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_cohort(train, cfg)?;
    let mut model = model;
    model.reinit_task_layers(cfg.seed ^ 0x5eed_0002)?;
    model.set_encoders_trainable(false);
    let steps = steps_per_epoch(train.n_patients(), cfg.batch_size) * cfg.finetune_epochs as u64;
    let mut trainer = Trainer::new(model, cfg.clone(), Objective::Survival, true, steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0003);
    let (log, frozen) = run_phase(&mut trainer, train, val, cfg.finetune_epochs, &mut rng)?;
    Ok(TrainOutcome {
        skipped_batches: trainer.skipped_batches,
        skipped_steps: trainer.skipped_steps(),
        model: trainer.model,
        log,
        frozen_grad_norm: frozen,
    })
}

/// Pretrained encoders and the model fine-tuned on top of them.
#[derive(Debug, Clone)]
pub struct UnsupOutcome {
    pub pretrained: DrimModel,
    pub pretrain_log: Vec<EpochLog>,
    pub finetuned: TrainOutcome,
}

/// Reconstruction pretraining without labels, then fine-tuning.
pub fn train_drim_u(train: &PatientBatch, val: Option<&PatientBatch>, cfg: &TrainConfig) -> Result<UnsupOutcome> {
    let (pretrained, pretrain_log) = pretrain(train, val, cfg)?;
    let finetuned = finetune(pretrained.clone(), train, val, cfg)?;
    Ok(UnsupOutcome {
        pretrained,
        pretrain_log,
        finetuned,
    })
}

/// Phase one alone: reconstruction, shared and adversarial losses.
pub fn pretrain(train: &PatientBatch, val: Option<&PatientBatch>, cfg: &TrainConfig) -> Result<(DrimModel, Vec<EpochLog>)> {
    let mut cfg = cfg.clone();
    cfg.regime = Regime::Unsup;
    cfg.validate()?;
    check_cohort(train, &cfg)?;
    let model = DrimModel::new(cfg.model_config(train.feature_dims(), horizon_of(train)), cfg.seed)?;
    let steps = steps_per_epoch(train.n_patients(), cfg.batch_size) * cfg.epochs as u64;
    let mut trainer = Trainer::new(model, cfg.clone(), Objective::Reconstruction, false, steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0004);
    let (log, _) = run_phase(&mut trainer, train, val, cfg.epochs, &mut rng)?;
    Ok((trainer.model, log))
}

/// An untrained model shaped like a pretraining run, for ablation controls.
pub fn untrained_encoders(train: &PatientBatch, cfg: &TrainConfig) -> Result<DrimModel> {
    let mut cfg = cfg.clone();
    cfg.regime = Regime::Unsup;
    DrimModel::new(cfg.model_config(train.feature_dims(), horizon_of(train)), cfg.seed)
}
