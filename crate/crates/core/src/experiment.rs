//! Experiment orchestration behind the command-line tool: configuration
//! files with dotted overrides, training runs, the missing-modality
//! robustness grid, risk stratification and parameter audits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::cohort;
use crate::error::{DrimError, Result};
use crate::fusion::{audit_tensor_params, MaFusionBlock};
use crate::metrics::{evaluate, km_estimate, logrank_test, risk_stratify, KmEstimate, LogRank, MetricReport, RiskScore};
use crate::model::{DrimModel, FusionKind, ModelConfig};
use crate::synth::{generate, split, GeneratorConfig, PatientBatch};
use crate::training::{train_drim_surv, train_drim_u, EpochLog, Regime, TrainConfig};

/// Everything one experiment needs, loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub fusion_kinds: Vec<FusionKind>,
    /// Modality subsets for the robustness grid; empty means all of them.
    pub subsets: Vec<Vec<usize>>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Train, validation and test fractions.
    pub splits: Vec<f64>,
    pub risk: RiskScore,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            fusion_kinds: vec![FusionKind::MaFusion],
            subsets: Vec::new(),
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            splits: vec![0.6, 0.2, 0.2],
            risk: RiskScore::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        if self.fusion_kinds.is_empty() {
            return Err(DrimError::Config("fusion_kinds must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(DrimError::Config("seeds must not be empty".into()));
        }
        if self.splits.len() != 3 || self.splits.iter().any(|f| !(*f > 0.0)) {
            return Err(DrimError::Config("splits must be three positive fractions".into()));
        }
        validate_subsets(&self.subsets, self.generator.n_modalities)
    }

    /// Listed subsets, or every non-empty subset of `m` modalities.
    pub fn subsets_for(&self, m: usize) -> Result<Vec<Vec<usize>>> {
        if self.subsets.is_empty() {
            Ok(all_subsets(m))
        } else {
            validate_subsets(&self.subsets, m)?;
            Ok(self.subsets.clone())
        }
    }
}

fn validate_subsets(subsets: &[Vec<usize>], m: usize) -> Result<()> {
    for s in subsets {
        if s.is_empty() {
            return Err(DrimError::Config("modality subsets must not be empty".into()));
        }
        if let Some(bad) = s.iter().find(|&&k| k >= m) {
            return Err(DrimError::Config(format!("subset {s:?} names modality {bad}, only {m} exist")));
        }
        let mut sorted = s.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != s.len() {
            return Err(DrimError::Config(format!("subset {s:?} repeats a modality")));
        }
    }
    Ok(())
}

/// All `2^m - 1` non-empty subsets, ordered by size then lexicographically.
pub fn all_subsets(m: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (1u32..(1 << m))
        .map(|bits| (0..m).filter(|k| bits & (1 << k) != 0).collect())
        .collect();
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out
}

pub fn subset_label(subset: &[usize]) -> String {
    subset.iter().map(usize::to_string).collect::<Vec<_>>().join("+")
}

/// Parse `value` as a TOML literal, falling back to a bare string.
fn override_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Set `dotted.key = value` inside a TOML table, creating tables on the way.
pub fn apply_override(root: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(DrimError::Config(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| DrimError::Config(format!("override {key}: {part} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), override_value(value));
    Ok(())
}

/// Load a spec from an optional TOML file, then apply dotted overrides.
pub fn load_spec(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentSpec> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| DrimError::io(p, e))?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| DrimError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for (k, v) in overrides {
        apply_override(&mut table, k, v)?;
    }
    let spec: ExperimentSpec = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| DrimError::Config(e.message().to_string()))?;
    spec.validate()?;
    Ok(spec)
}

/// Generate a cohort into `dir`.
pub fn cmd_generate(spec: &ExperimentSpec, dir: &Path, with_truth: bool, force: bool) -> Result<PatientBatch> {
    let batch = generate(&spec.generator)?;
    cohort::write_cohort(dir, &batch, with_truth, force)?;
    Ok(batch)
}

/// The train/val/test partition a run used.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: PatientBatch,
    pub val: PatientBatch,
    pub test: PatientBatch,
}

pub fn make_splits(data: &PatientBatch, fractions: &[f64], seed: u64) -> Result<Splits> {
    let mut parts = split(data, fractions, seed)?.into_iter();
    let (Some(train), Some(val), Some(test)) = (parts.next(), parts.next(), parts.next()) else {
        return Err(DrimError::Config("splits must be three fractions".into()));
    };
    Ok(Splits { train, val, test })
}

pub fn run_id(fusion: FusionKind, regime: Regime, seed: u64) -> String {
    let regime = match regime {
        Regime::Surv => "surv",
        Regime::Unsup => "unsup",
    };
    format!("{}-{regime}-seed{seed}", fusion.name())
}

/// One line of a metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub seed: u64,
    pub subset: String,
    pub cindex: f64,
    pub ibs: f64,
    pub inbll: f64,
    pub cs: f64,
    pub logrank_chi2: Option<f64>,
    pub logrank_p: Option<f64>,
}

impl MetricRow {
    fn new(run_id: &str, seed: u64, subset: &str, r: &MetricReport) -> Self {
        Self {
            run_id: run_id.to_string(),
            seed,
            subset: subset.to_string(),
            cindex: r.cindex,
            ibs: r.ibs,
            inbll: r.inbll,
            cs: r.cs,
            logrank_chi2: r.logrank_chi2,
            logrank_p: r.logrank_p,
        }
    }
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub run_id: String,
    pub seed: u64,
    pub model: DrimModel,
    pub splits: Splits,
    pub log: Vec<EpochLog>,
    pub pretrain_log: Vec<EpochLog>,
    pub test: MetricReport,
    /// Largest frozen-encoder gradient norm during fine-tuning.
    pub frozen_grad_norm: f64,
}

/// Train one model on `data` and score it on the held-out split.
pub fn train_run(data: &PatientBatch, spec: &ExperimentSpec, fusion: FusionKind, seed: u64) -> Result<TrainedRun> {
    let splits = make_splits(data, &spec.splits, seed)?;
    let cfg = TrainConfig {
        seed,
        fusion,
        ..spec.train.clone()
    };
    cfg.validate()?;
    let (model, log, pretrain_log, frozen_grad_norm) = match cfg.regime {
        Regime::Surv => {
            let out = train_drim_surv(&splits.train, Some(&splits.val), &cfg)?;
            (out.model, out.log, Vec::new(), 0.0)
        }
        Regime::Unsup => {
            let out = train_drim_u(&splits.train, Some(&splits.val), &cfg)?;
            let norm = out.finetuned.frozen_grad_norm;
            (out.finetuned.model, out.finetuned.log, out.pretrain_log, norm)
        }
    };
    let test = score(&model, &splits.test, spec.risk)?;
    Ok(TrainedRun {
        run_id: run_id(fusion, cfg.regime, seed),
        seed,
        model,
        splits,
        log,
        pretrain_log,
        test,
        frozen_grad_norm,
    })
}

/// Metrics of `model` on `batch`.
pub fn score(model: &DrimModel, batch: &PatientBatch, risk: RiskScore) -> Result<MetricReport> {
    let hazards = model.predict(batch)?;
    evaluate(&hazards, &batch.time, &batch.event, &model.grid()?, risk)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| DrimError::Data(format!("{}: {e}", path.display())))?;
    let fail = |e: csv::Error| DrimError::Data(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.serialize(r).map_err(fail)?;
    }
    w.flush().map_err(|e| DrimError::io(path, e))
}

pub const METRIC_HEADER: [&str; 9] = [
    "run_id",
    "seed",
    "subset",
    "cindex",
    "ibs",
    "inbll",
    "cs",
    "logrank_chi2",
    "logrank_p",
];
pub const EPOCH_HEADER: [&str; 8] = [
    "epoch",
    "split",
    "loss_total",
    "loss_task",
    "loss_shared",
    "loss_adv",
    "loss_disc",
    "lr",
];
pub const GRID_HEADER: [&str; 9] = ["run_id", "seed", "subset", "n", "train_pct", "cindex", "ibs", "inbll", "cs"];

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_rows(path, rows, &METRIC_HEADER)
}

pub fn write_epochs(path: &Path, rows: &[EpochLog]) -> Result<()> {
    write_rows(path, rows, &EPOCH_HEADER)
}

/// Read back any CSV written here.
pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| DrimError::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .enumerate()
        .map(|(k, row)| {
            row.map_err(|e| DrimError::Malformed {
                file: path.to_path_buf(),
                row: k + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn tags_of(run: &TrainedRun, spec: &ExperimentSpec, cohort_dir: Option<&Path>) -> BTreeMap<String, String> {
    let mut tags = BTreeMap::new();
    tags.insert("run_id".into(), run.run_id.clone());
    tags.insert("seed".into(), run.seed.to_string());
    tags.insert(
        "splits".into(),
        spec.splits.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
    );
    tags.insert("risk".into(), serde_json::to_string(&spec.risk).expect("enum").trim_matches('"').to_string());
    tags.insert("n_patients".into(), (run.splits.train.n_patients() + run.splits.val.n_patients() + run.splits.test.n_patients()).to_string());
    if let Some(dir) = cohort_dir {
        tags.insert("cohort".into(), dir.display().to_string());
    }
    tags
}

/// Files written by [`cmd_train`] for one run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub epochs: PathBuf,
    pub metrics: PathBuf,
    pub pretrain_epochs: Option<PathBuf>,
}

/// Train on a cohort directory and write checkpoint, epoch log and test
/// metrics under `spec.output_dir/<run_id>/`.
pub fn cmd_train(
    cohort_dir: &Path,
    spec: &ExperimentSpec,
    fusion: FusionKind,
    seed: u64,
    force: bool,
) -> Result<(TrainedRun, RunArtifacts)> {
    let data = cohort::read_cohort(cohort_dir)?;
    let run = train_run(&data, spec, fusion, seed)?;
    let dir = spec.output_dir.join(&run.run_id);
    cohort::prepare_dir(&dir, force)?;
    let artifacts = RunArtifacts {
        checkpoint: dir.join("model.ckpt"),
        epochs: dir.join("epochs.csv"),
        metrics: dir.join("metrics.csv"),
        pretrain_epochs: (!run.pretrain_log.is_empty()).then(|| dir.join("pretrain_epochs.csv")),
        dir,
    };
    checkpoint::save(&artifacts.checkpoint, &run.model, &tags_of(&run, spec, Some(cohort_dir)))?;
    write_epochs(&artifacts.epochs, &run.log)?;
    if let Some(p) = &artifacts.pretrain_epochs {
        write_epochs(p, &run.pretrain_log)?;
    }
    write_metrics(&artifacts.metrics, &[MetricRow::new(&run.run_id, seed, "test", &run.test)])?;
    Ok((run, artifacts))
}

/// A checkpoint together with the test split it was scored on.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub model: DrimModel,
    pub run_id: String,
    pub seed: u64,
    pub splits: Splits,
    pub risk: RiskScore,
}

/// Load a checkpoint and rebuild its data splits from `cohort_dir`.
pub fn load_run(checkpoint_path: &Path, cohort_dir: &Path) -> Result<LoadedRun> {
    let (model, tags) = checkpoint::load(checkpoint_path)?;
    let data = cohort::read_cohort(cohort_dir)?;
    let tag = |k: &str| {
        tags.get(k)
            .cloned()
            .ok_or_else(|| DrimError::Data(format!("checkpoint lacks the {k} tag")))
    };
    let seed: u64 = tag("seed")?
        .parse()
        .map_err(|_| DrimError::Data("checkpoint seed tag is not an integer".into()))?;
    let fractions = tag("splits")?
        .split(',')
        .map(|f| f.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| DrimError::Data("checkpoint splits tag is malformed".into()))?;
    if let Some(n) = tags.get("n_patients") {
        if n != &data.n_patients().to_string() {
            return Err(DrimError::Data(format!(
                "checkpoint was trained on {n} patients, cohort has {}",
                data.n_patients()
            )));
        }
    }
    if data.feature_dims() != model.config.feature_dims {
        return Err(DrimError::Data(format!(
            "cohort feature widths {:?} do not match the model's {:?}",
            data.feature_dims(),
            model.config.feature_dims
        )));
    }
    let risk = match tags.get("risk") {
        Some(r) => serde_json::from_str(&format!("\"{r}\""))
            .map_err(|_| DrimError::Data(format!("unknown risk tag {r}")))?,
        None => RiskScore::default(),
    };
    let splits = make_splits(&data, &fractions, seed)?;
    Ok(LoadedRun {
        model,
        run_id: tags.get("run_id").cloned().unwrap_or_else(|| "run".into()),
        seed,
        splits,
        risk,
    })
}

/// Re-score a checkpoint on its test split.
pub fn cmd_eval(checkpoint_path: &Path, cohort_dir: &Path, out: &Path) -> Result<MetricRow> {
    let run = load_run(checkpoint_path, cohort_dir)?;
    let report = score(&run.model, &run.splits.test, run.risk)?;
    let row = MetricRow::new(&run.run_id, run.seed, "test", &report);
    write_metrics(out, std::slice::from_ref(&row))?;
    Ok(row)
}

/// One robustness-grid row. Metrics are blank when no test patient
/// qualifies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub run_id: String,
    pub seed: u64,
    pub subset: String,
    pub n: usize,
    /// Percentage of training patients with exactly this modality pattern.
    pub train_pct: f64,
    pub cindex: Option<f64>,
    pub ibs: Option<f64>,
    pub inbll: Option<f64>,
    pub cs: Option<f64>,
}

/// Share of `batch` whose presence pattern is exactly `subset`, in percent.
pub fn exact_pattern_pct(batch: &PatientBatch, subset: &[usize]) -> f64 {
    let n = batch.n_patients();
    if n == 0 {
        return 0.0;
    }
    let hits = (0..n)
        .filter(|&i| (0..batch.n_modalities()).all(|m| batch.present[m][i] == subset.contains(&m)))
        .count();
    100.0 * hits as f64 / n as f64
}

/// Evaluate one model on test patients having at least each subset, with
/// every other modality masked out.
pub fn robustness_grid(
    model: &DrimModel,
    run_id: &str,
    seed: u64,
    train: &PatientBatch,
    test: &PatientBatch,
    subsets: &[Vec<usize>],
    risk: RiskScore,
) -> Result<Vec<GridRow>> {
    validate_subsets(subsets, test.n_modalities())?;
    subsets
        .par_iter()
        .map(|subset| {
            let rows = test.having_at_least(subset);
            let mut row = GridRow {
                run_id: run_id.to_string(),
                seed,
                subset: subset_label(subset),
                n: rows.len(),
                train_pct: exact_pattern_pct(train, subset),
                cindex: None,
                ibs: None,
                inbll: None,
                cs: None,
            };
            if !rows.is_empty() {
                let batch = test.select(&rows).mask_to(subset);
                let r = score(model, &batch, risk)?;
                row.cindex = Some(r.cindex);
                row.ibs = Some(r.ibs);
                row.inbll = Some(r.inbll);
                row.cs = Some(r.cs);
            }
            Ok(row)
        })
        .collect()
}

pub fn cmd_robustness_grid(
    checkpoint_path: &Path,
    cohort_dir: &Path,
    spec: &ExperimentSpec,
    out: &Path,
) -> Result<Vec<GridRow>> {
    let run = load_run(checkpoint_path, cohort_dir)?;
    let subsets = spec.subsets_for(run.model.modalities())?;
    let rows = robustness_grid(
        &run.model,
        &run.run_id,
        run.seed,
        &run.splits.train,
        &run.splits.test,
        &subsets,
        run.risk,
    )?;
    write_rows(out, &rows, &GRID_HEADER)?;
    Ok(rows)
}

/// Risk groups of a test set with their survival curves.
#[derive(Debug, Clone)]
pub struct Stratification {
    pub high: KmEstimate,
    pub low: KmEstimate,
    pub n_high: usize,
    pub n_low: usize,
    pub logrank: LogRank,
}

/// One step point of a Kaplan-Meier curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmPoint {
    pub time: f64,
    pub survival: f64,
    pub group: String,
}

/// Split by median risk, fit a curve per group and compare them.
pub fn stratify(model: &DrimModel, batch: &PatientBatch, risk: RiskScore) -> Result<Stratification> {
    let hazards = model.predict(batch)?;
    let high = risk_stratify(&hazards, risk)?;
    let pick = |g: bool| -> (Vec<f64>, Vec<bool>) {
        (0..batch.n_patients())
            .filter(|&i| high[i] == g)
            .map(|i| (batch.time[i], batch.event[i]))
            .unzip()
    };
    let (ht, he) = pick(true);
    let (lt, le) = pick(false);
    if ht.is_empty() || lt.is_empty() {
        return Err(DrimError::DegenerateBatch(
            "every patient fell into one risk group: the predicted scores are all tied".into(),
        ));
    }
    let logrank = logrank_test((&ht, &he), (&lt, &le)).map_err(|e| {
        DrimError::DegenerateBatch(format!(
            "{e}; the risk groups need observed events, try a larger test split or a cohort with less censoring"
        ))
    })?;
    Ok(Stratification {
        high: km_estimate(&ht, &he)?,
        low: km_estimate(&lt, &le)?,
        n_high: ht.len(),
        n_low: lt.len(),
        logrank,
    })
}

/// Step points of a curve, starting from survival 1 at time 0.
pub fn km_points(km: &KmEstimate, group: &str) -> Vec<KmPoint> {
    std::iter::once((0.0, 1.0))
        .chain(km.times.iter().copied().zip(km.survival.iter().copied()))
        .map(|(time, survival)| KmPoint {
            time,
            survival,
            group: group.to_string(),
        })
        .collect()
}

/// Summary line of a stratification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRankRow {
    pub run_id: String,
    pub n_high: usize,
    pub n_low: usize,
    pub chi2: f64,
    pub p: f64,
}

pub fn cmd_stratify(checkpoint_path: &Path, cohort_dir: &Path, out_dir: &Path, force: bool) -> Result<LogRankRow> {
    let run = load_run(checkpoint_path, cohort_dir)?;
    let st = stratify(&run.model, &run.splits.test, run.risk)?;
    cohort::prepare_dir(out_dir, force)?;
    let mut points = km_points(&st.high, "high");
    points.extend(km_points(&st.low, "low"));
    write_rows(&out_dir.join("km_curves.csv"), &points, &["time", "survival", "group"])?;
    let row = LogRankRow {
        run_id: run.run_id,
        n_high: st.n_high,
        n_low: st.n_low,
        chi2: st.logrank.chi2,
        p: st.logrank.p,
    };
    write_rows(&out_dir.join("logrank.csv"), std::slice::from_ref(&row), &["run_id", "n_high", "n_low", "chi2", "p"])?;
    Ok(row)
}

/// One line of a parameter audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub item: String,
    pub params: String,
    pub reference: String,
}

/// Exact parameter counts of a model configuration by module, plus tensor
/// fusion weight counts (bias excluded) at the two reference widths.
pub fn audit(config: &ModelConfig) -> Result<Vec<AuditRow>> {
    let model = DrimModel::new(config.clone(), 0)?;
    let row = |item: String, params: String, reference: &str| AuditRow {
        item,
        params,
        reference: reference.to_string(),
    };
    let mut rows = Vec::new();
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    for (_, p) in model.store.iter() {
        let parts: Vec<&str> = p.name.split('.').collect();
        let key = if parts[0].starts_with("mod") && parts.len() > 1 {
            format!("{}.{}", parts[0], parts[1])
        } else if parts.len() > 1 && parts[0] == "fusion" {
            format!("fusion.{}", parts[1])
        } else {
            parts[0].to_string()
        };
        *groups.entry(key).or_default() += p.value.len();
    }
    for (k, v) in groups {
        rows.push(row(k, v.to_string(), ""));
    }
    rows.push(row("total".into(), model.param_count().to_string(), ""));

    let m = config.modalities();
    if config.fusion == FusionKind::MaFusion && m >= 1 {
        let mut store = crate::autodiff::ParamStore::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let this = MaFusionBlock::new(&mut store, "a", config.d, m, config.mafusion, &mut rng)?.param_count();
        let next = MaFusionBlock::new(&mut store, "b", config.d, m + 1, config.mafusion, &mut rng)?.param_count();
        rows.push(row(format!("mafusion.shared_block@M={m}"), this.to_string(), ""));
        rows.push(row(
            format!("mafusion.shared_block@M={}", m + 1),
            next.to_string(),
            &format!("+{} (one slot embedding)", next - this),
        ));
    }
    for (d, reference) in [(32usize, "about 38 million"), (128, "approaching 34,500 million")] {
        let a = audit_tensor_params(4, d, d)?;
        rows.push(row(format!("tensor_fusion@M=4,d={d}"), a.weights.to_string(), reference));
    }
    if config.fusion == FusionKind::Tensor || m != 4 {
        let a = audit_tensor_params(m, config.d, config.d)?;
        rows.push(row(format!("tensor_fusion@M={m},d={}", config.d), a.weights.to_string(), ""));
    }
    Ok(rows)
}

pub fn write_audit(path: &Path, rows: &[AuditRow]) -> Result<()> {
    write_rows(path, rows, &["item", "params", "reference"])
}

#[cfg(test)]
mod tests;
