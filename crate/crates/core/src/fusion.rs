//! Masked attention pooling over modality tokens, baseline fusion operators
//! and the tensor-fusion parameter auditor.

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{array, Array, Forward, Linear, ParamId, ParamStore, Var};
use crate::encoders::presence_column;
use crate::error::{DrimError, Result};
use crate::losses::MASK_LOGIT;

/// Attention geometry of one fusion block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaFusionConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub slot_embeddings: bool,
}

impl Default for MaFusionConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            head_dim: 16,
            slot_embeddings: true,
        }
    }
}

impl MaFusionConfig {
    /// 16 heads of width 64.
    pub fn large() -> Self {
        Self {
            heads: 16,
            head_dim: 64,
            slot_embeddings: true,
        }
    }
}

/// Single-query multi-head attention pooling with a learnable cls query.
#[derive(Debug, Clone)]
pub struct MaFusionBlock {
    pub d: usize,
    pub tokens: usize,
    pub config: MaFusionConfig,
    pub query: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub slots: ParamId,
    pub out_proj: Linear,
    pub dense: Linear,
}

/// Fused rows plus the N×T×H attention weights.
#[derive(Debug, Clone, Copy)]
pub struct FusionOutput<'t> {
    pub fused: Var<'t>,
    pub weights: Var<'t>,
}

impl MaFusionBlock {
    /// `tokens` is the number of token slots (M for the shared scale, M+1
    /// for the unique scale); one slot embedding is allocated per slot.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        tokens: usize,
        config: MaFusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.heads == 0 || config.head_dim == 0 || d == 0 || tokens == 0 {
            return Err(DrimError::Config(
                "fusion needs positive width, heads, head size and token count".into(),
            ));
        }
        let hd = config.heads * config.head_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut uniform = |shape: &[usize]| {
            Array::from_shape_fn(ndarray::IxDyn(shape), |_| rng.random_range(-bound..bound))
        };
        let query = store.add(format!("{name}.query"), uniform(&[1, d]));
        let w_q = store.add(format!("{name}.w_q"), uniform(&[d, hd]));
        let w_k = store.add(format!("{name}.w_k"), uniform(&[d, hd]));
        let w_v = store.add(format!("{name}.w_v"), uniform(&[d, hd]));
        let slots = store.add(format!("{name}.slots"), uniform(&[tokens, d]).mapv(|v| 0.1 * v));
        Ok(Self {
            d,
            tokens,
            config,
            query,
            w_q,
            w_k,
            w_v,
            slots,
            out_proj: Linear::new(store, &format!("{name}.out"), hd, d, rng),
            dense: Linear::new(store, &format!("{name}.dense"), d, d, rng),
        })
    }

    pub fn param_count(&self) -> usize {
        let hd = self.config.heads * self.config.head_dim;
        self.d + 3 * self.d * hd + self.tokens * self.d + self.out_proj.param_count() + self.dense.param_count()
    }

    /// HD×H indicator summing each head's coordinates.
    fn head_blocks(&self) -> Array {
        let (h, dh) = (self.config.heads, self.config.head_dim);
        Array::from_shape_fn(ndarray::IxDyn(&[h * dh, h]), |ix| {
            if ix[0] / dh == ix[1] {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Attend from the cls query to the unmasked tokens of every patient.
    /// `tokens[t]` is N×d and `mask[t][i]` says whether patient i's token t
    /// takes part.
    pub fn forward<'t>(
        &self,
        fw: &mut Forward<'t, '_>,
        tokens: &[Var<'t>],
        mask: &[Vec<bool>],
    ) -> Result<FusionOutput<'t>> {
        if tokens.len() != self.tokens || mask.len() != self.tokens {
            return Err(DrimError::Config(format!(
                "fusion expects {} tokens, got {} tokens and {} masks",
                self.tokens,
                tokens.len(),
                mask.len()
            )));
        }
        let n = mask[0].len();
        for (t, tok) in tokens.iter().enumerate() {
            let shape = tok.shape();
            if shape != [n, self.d] || mask[t].len() != n {
                return Err(DrimError::Config(format!(
                    "token {t} has shape {shape:?}, expected [{n}, {}]",
                    self.d
                )));
            }
        }
        if let Some(i) = (0..n).find(|&i| mask.iter().all(|m| !m[i])) {
            return Err(DrimError::NoModality(i));
        }

        let (h, dh) = (self.config.heads, self.config.head_dim);
        let tape = fw.tape;
        let blocks = tape.constant(self.head_blocks());
        let blocks_t = tape.constant(self.head_blocks().reversed_axes().as_standard_layout().to_owned());
        let w_k = fw.param(self.w_k);
        let w_v = fw.param(self.w_v);
        let q = fw.param(self.query).matmul(&fw.param(self.w_q))?;
        let slots = self.config.slot_embeddings.then(|| fw.param(self.slots));
        let scale = 1.0 / (dh as f64).sqrt();

        let mut scores = Vec::with_capacity(tokens.len());
        let mut values = Vec::with_capacity(tokens.len());
        for (t, tok) in tokens.iter().enumerate() {
            let mut x = *tok;
            if let Some(slots) = slots {
                x = x.add(&slots.slice(0, t, t + 1)?)?;
            }
            // Masked rows become +0 exactly, whatever they held.
            let keep = tape.constant(presence_column(&mask[t]));
            let x = x.mul(&keep)?.affine(1.0, 0.0);
            let k = x.matmul(&w_k)?;
            let score = k.mul(&q)?.matmul(&blocks)?.scale(scale);
            scores.push(score.reshape(&[n, 1, h])?);
            values.push(x.matmul(&w_v)?);
        }
        let bias = Array::from_shape_fn(ndarray::IxDyn(&[n, self.tokens, 1]), |ix| {
            if mask[ix[1]][ix[0]] {
                0.0
            } else {
                MASK_LOGIT
            }
        });
        let logits = tape.concat(&scores, 1)?.add(&tape.constant(bias))?;
        let weights = logits.softmax(1)?;

        let mut pooled: Option<Var<'t>> = None;
        for (t, v) in values.iter().enumerate() {
            let a = weights.slice(1, t, t + 1)?.reshape(&[n, h])?;
            let term = a.matmul(&blocks_t)?.mul(v)?;
            pooled = Some(match pooled {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        let pooled = pooled.expect("at least one token");
        let projected = self.out_proj.forward(fw, pooled)?;
        let fused = self.dense.forward(fw, projected)?.gelu();
        Ok(FusionOutput { fused, weights })
    }
}

/// Fuse the per-modality shared rows into one global shared row per patient.
pub fn fuse_shared<'t>(
    block: &MaFusionBlock,
    fw: &mut Forward<'t, '_>,
    shared: &[Var<'t>],
    present: &[Vec<bool>],
) -> Result<FusionOutput<'t>> {
    block.forward(fw, shared, present)
}

/// Fuse `[u^1, ..., u^M, s]`; the global token is never masked.
pub fn fuse_unique<'t>(
    block: &MaFusionBlock,
    fw: &mut Forward<'t, '_>,
    unique: &[Var<'t>],
    global: Var<'t>,
    present: &[Vec<bool>],
) -> Result<FusionOutput<'t>> {
    let mut tokens = unique.to_vec();
    tokens.push(global);
    let mut mask = present.to_vec();
    mask.push(vec![true; global.shape()[0]]);
    block.forward(fw, &tokens, &mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Mean,
    Sum,
    Max,
    Concat,
    Tensor,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Sum => "sum",
            Self::Max => "max",
            Self::Concat => "concat",
            Self::Tensor => "tensor",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = DrimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            "max" => Ok(Self::Max),
            "concat" => Ok(Self::Concat),
            "tensor" => Ok(Self::Tensor),
            other => Err(DrimError::Config(format!("unknown fusion kind {other:?}"))),
        }
    }
}

/// A baseline fusion operator and, for the tensor kind, its output layer.
#[derive(Debug, Clone)]
pub struct BaselineFusion {
    pub kind: BaselineKind,
    pub modalities: usize,
    pub d: usize,
    pub projection: Option<Linear>,
}

impl BaselineFusion {
    /// `budget` caps the tensor kind's weight count.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        kind: BaselineKind,
        modalities: usize,
        d: usize,
        d_out: usize,
        budget: u64,
        rng: &mut R,
    ) -> Result<Self> {
        let projection = if kind == BaselineKind::Tensor {
            let audit = audit_tensor_params(modalities, d, d_out)?;
            if audit.weights > BigUint::from(budget) {
                return Err(DrimError::Config(format!(
                    "tensor fusion with M={modalities}, d={d}, d_out={d_out} needs {} weights (+{} bias), over the budget of {budget}",
                    audit.weights, audit.bias
                )));
            }
            let width = (d + 1).pow(modalities as u32);
            Some(Linear::new(store, "fusion.tensor", width, d_out, rng))
        } else {
            None
        };
        Ok(Self {
            kind,
            modalities,
            d,
            projection,
        })
    }

    pub fn out_dim(&self) -> usize {
        match (self.kind, &self.projection) {
            (BaselineKind::Concat, _) => self.modalities * self.d,
            (_, Some(p)) => p.out_dim,
            _ => self.d,
        }
    }

    pub fn param_count(&self) -> usize {
        self.projection.as_ref().map_or(0, Linear::param_count)
    }

    pub fn forward<'t>(
        &self,
        fw: &mut Forward<'t, '_>,
        reps: &[Var<'t>],
        present: &[Vec<bool>],
    ) -> Result<Var<'t>> {
        baseline_fuse(self, fw, reps, present)
    }
}

fn zero_filled<'t>(rep: Var<'t>, present: &[bool]) -> Result<Var<'t>> {
    let keep = rep.tape().constant(presence_column(present));
    Ok(rep.mul(&keep)?.affine(1.0, 0.0))
}

/// Apply a baseline operator. Mean, sum and max reduce over present
/// modalities only; concat and tensor zero-fill absent ones.
pub fn baseline_fuse<'t>(
    fusion: &BaselineFusion,
    fw: &mut Forward<'t, '_>,
    reps: &[Var<'t>],
    present: &[Vec<bool>],
) -> Result<Var<'t>> {
    if reps.is_empty() || reps.len() != present.len() || reps.len() != fusion.modalities {
        return Err(DrimError::Config(format!(
            "baseline fusion expects {} modalities, got {} reps and {} masks",
            fusion.modalities,
            reps.len(),
            present.len()
        )));
    }
    let n = present[0].len();
    let tape = fw.tape;
    let counts: Vec<usize> = (0..n).map(|i| present.iter().filter(|p| p[i]).count()).collect();
    let reducing = matches!(fusion.kind, BaselineKind::Mean | BaselineKind::Sum | BaselineKind::Max);
    if reducing {
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return Err(DrimError::NoModality(i));
        }
    }
    let filled = reps
        .iter()
        .zip(present)
        .map(|(r, p)| zero_filled(*r, p))
        .collect::<Result<Vec<_>>>()?;

    let sum_of = |terms: Vec<Var<'t>>| -> Result<Var<'t>> {
        let mut acc = terms[0];
        for t in &terms[1..] {
            acc = acc.add(t)?;
        }
        Ok(acc)
    };

    match fusion.kind {
        BaselineKind::Sum => sum_of(filled),
        BaselineKind::Mean => {
            let inv = array(&[n, 1], counts.iter().map(|&c| 1.0 / c as f64).collect());
            Ok(sum_of(filled)?.mul(&tape.constant(inv))?)
        }
        BaselineKind::Max => {
            let values: Vec<Array> = reps.iter().map(|r| r.value()).collect();
            let d = values[0].shape()[1];
            let mut winner = vec![0usize; n * d];
            for i in 0..n {
                for j in 0..d {
                    let mut best: Option<(usize, f64)> = None;
                    for (m, v) in values.iter().enumerate() {
                        if !present[m][i] {
                            continue;
                        }
                        let x = v[[i, j]];
                        if best.is_none_or(|(_, b)| x > b) {
                            best = Some((m, x));
                        }
                    }
                    winner[i * d + j] = best.expect("present modality").0;
                }
            }
            let picked = filled
                .iter()
                .enumerate()
                .map(|(m, r)| {
                    let onehot = array(&[n, d], winner.iter().map(|&w| f64::from(u8::from(w == m))).collect());
                    Ok(r.mul(&tape.constant(onehot))?.affine(1.0, 0.0))
                })
                .collect::<Result<Vec<_>>>()?;
            sum_of(picked)
        }
        BaselineKind::Concat => Ok(tape.concat(&filled, 1)?),
        BaselineKind::Tensor => {
            let projection = fusion
                .projection
                .as_ref()
                .ok_or_else(|| DrimError::Config("tensor fusion built without a projection".into()))?;
            let ones = tape.constant(Array::ones(ndarray::IxDyn(&[n, 1])));
            let mut acc = tape.constant(Array::ones(ndarray::IxDyn(&[n, 1])));
            for r in &filled {
                let z = tape.concat(&[*r, ones], 1)?;
                let (k, w) = (acc.shape()[1], z.shape()[1]);
                acc = acc
                    .reshape(&[n, k, 1])?
                    .mul(&z.reshape(&[n, 1, w])?)?
                    .reshape(&[n, k * w])?;
            }
            Ok(projection.forward(fw, acc)?)
        }
    }
}

/// Exact parameter count of a tensor-fusion output layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorAudit {
    pub weights: BigUint,
    pub bias: BigUint,
}

impl TensorAudit {
    pub fn total(&self) -> BigUint {
        &self.weights + &self.bias
    }
}

/// `(d+1)^M * d_out` weights plus `d_out` biases, in arbitrary precision.
pub fn audit_tensor_params(modalities: usize, d: usize, d_out: usize) -> Result<TensorAudit> {
    if modalities == 0 || d == 0 || d_out == 0 {
        return Err(DrimError::Config("audit arguments must be positive".into()));
    }
    let base = BigUint::from(d + 1);
    let weights = base.pow(modalities as u32) * BigUint::from(d_out);
    Ok(TensorAudit {
        weights,
        bias: BigUint::from(d_out),
    })
}
