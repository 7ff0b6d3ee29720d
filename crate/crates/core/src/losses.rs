//! Training objectives: multi-positive shared contrastive loss, adversarial
//! unique loss, discrete-time survival likelihood, reconstruction loss and
//! their combination.
//!
//! Every masked loss reads only present rows (gathered by index), so the
//! values stored in absent rows can never influence a result.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{array, Array, Forward, Tape, Var};
use crate::encoders::Discriminator;
use crate::error::{DrimError, Result};

/// Probabilities are clamped to `[HAZARD_EPS, 1 - HAZARD_EPS]` before any log.
pub const HAZARD_EPS: f64 = 1e-7;

/// Additive logit for entries excluded from a softmax.
pub(crate) const MASK_LOGIT: f64 = -1e9;

/// `P` equidistant intervals on `[0, t_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalGrid {
    cuts: Vec<f64>,
}

impl IntervalGrid {
    pub fn new(intervals: usize, t_max: f64) -> Result<Self> {
        if intervals == 0 || !(t_max > 0.0) || !t_max.is_finite() {
            return Err(DrimError::Config(format!(
                "interval grid needs P >= 1 and a positive t_max, got P={intervals}, t_max={t_max}"
            )));
        }
        let width = t_max / intervals as f64;
        let mut cuts: Vec<f64> = (0..=intervals).map(|k| k as f64 * width).collect();
        cuts[intervals] = t_max;
        Ok(Self { cuts })
    }

    pub fn intervals(&self) -> usize {
        self.cuts.len() - 1
    }

    pub fn t_max(&self) -> f64 {
        self.cuts[self.cuts.len() - 1]
    }

    pub fn cuts(&self) -> &[f64] {
        &self.cuts
    }

    /// 1-based index of the interval holding `t`; `t >= t_max` maps to P.
    pub fn interval_of(&self, t: f64) -> Result<usize> {
        if !(t >= 0.0) {
            return Err(DrimError::Data(format!("time {t} has no interval")));
        }
        let p = self.intervals();
        if t >= self.t_max() {
            return Ok(p);
        }
        let width = self.t_max() / p as f64;
        let mut k = (t / width).floor() as usize + 1;
        // guard the floor against rounding at the cut points
        while k > 1 && t < self.cuts[k - 1] {
            k -= 1;
        }
        while k < p && t >= self.cuts[k] {
            k += 1;
        }
        Ok(k.min(p))
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.cuts.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }
}

/// All shared representations stacked modality-major: row `m * N + i` is
/// `s_i^m`, owned by patient `i`.
#[derive(Debug, Clone)]
pub struct SharedStack<'t> {
    pub reps: Var<'t>,
    pub owner: Vec<usize>,
    pub present: Vec<bool>,
    pub tau: f64,
}

impl<'t> SharedStack<'t> {
    pub fn from_modalities(
        tape: &'t Tape,
        reps: &[Var<'t>],
        present: &[Vec<bool>],
        tau: f64,
    ) -> Result<Self> {
        if reps.is_empty() || reps.len() != present.len() {
            return Err(DrimError::Data(
                "one presence mask per modality is required".into(),
            ));
        }
        let n = present[0].len();
        let mut owner = Vec::with_capacity(n * reps.len());
        let mut flags = Vec::with_capacity(n * reps.len());
        for p in present {
            if p.len() != n {
                return Err(DrimError::Data("presence masks differ in length".into()));
            }
            owner.extend(0..n);
            flags.extend_from_slice(p);
        }
        let stacked = tape.concat(reps, 0)?;
        Ok(Self {
            reps: stacked,
            owner,
            present: flags,
            tau,
        })
    }
}

/// Multi-positive contrastive loss over the stack.
///
/// Anchors are present rows with at least one present same-patient row; each
/// anchor's positives are weighted `1/|B(j)|`, the result is averaged over
/// anchors, and the softmax denominator runs over every other present row.
pub fn shared_loss<'t>(stack: &SharedStack<'t>) -> Result<Var<'t>> {
    if !(stack.tau > 0.0) {
        return Err(DrimError::Config(format!(
            "temperature must be positive, got {}",
            stack.tau
        )));
    }
    let rows: Vec<usize> = (0..stack.present.len()).filter(|&j| stack.present[j]).collect();
    let r = rows.len();
    let owners: Vec<usize> = rows.iter().map(|&j| stack.owner[j]).collect();
    let positives: Vec<usize> = (0..r)
        .map(|a| (0..r).filter(|&b| b != a && owners[b] == owners[a]).count())
        .collect();
    let anchors = positives.iter().filter(|&&c| c > 0).count();
    if anchors == 0 {
        return Err(DrimError::DegenerateBatch(
            "no representation has a positive pair".into(),
        ));
    }

    let tape = stack.reps.tape();
    let s = stack.reps.gather_rows(&rows)?;
    let logits = s.matmul(&s.t()?)?.scale(1.0 / stack.tau);

    let mut weights = Array::zeros(ndarray::IxDyn(&[r, r]));
    let mut self_mask = Array::zeros(ndarray::IxDyn(&[r, r]));
    let mut anchor = Array::zeros(ndarray::IxDyn(&[r, 1]));
    for a in 0..r {
        self_mask[[a, a]] = MASK_LOGIT;
        if positives[a] > 0 {
            anchor[[a, 0]] = 1.0;
            for b in 0..r {
                if b != a && owners[b] == owners[a] {
                    weights[[a, b]] = 1.0 / positives[a] as f64;
                }
            }
        }
    }

    let masked = logits.add(&tape.constant(self_mask))?;
    let row_max = {
        let v = masked.value_ref();
        let m: Vec<f64> = v
            .outer_iter()
            .map(|row| row.iter().fold(f64::NEG_INFINITY, |acc, &x| acc.max(x)))
            .collect();
        array(&[r, 1], m)
    };
    let row_max = tape.constant(row_max);
    let lse = masked
        .sub(&row_max)?
        .exp()
        .sum(1)?
        .log()
        .add(&row_max)?;

    let positive_term = logits.mul(&tape.constant(weights))?.sum_all();
    let normaliser = lse.mul(&tape.constant(anchor))?.sum_all();
    Ok(positive_term.sub(&normaliser)?.scale(-1.0 / anchors as f64))
}

/// Gradient routing switches for the adversarial unique objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniqueLossOptions {
    /// Let the adversarial term reach the shared encoders as well.
    pub adv_updates_shared: bool,
}

/// Discriminator half and encoder half of the adversarial objective.
#[derive(Debug, Clone)]
pub struct UniqueLoss<'t> {
    /// Trains the discriminators only.
    pub disc: Var<'t>,
    /// Trains the unique encoders only.
    pub adv: Var<'t>,
    /// Modalities with fewer than two present rows.
    pub skipped: Vec<usize>,
    /// Every modality was skipped; both losses are zero.
    pub all_skipped: bool,
}

fn present_rows(present: &[bool]) -> Vec<usize> {
    (0..present.len()).filter(|&i| present[i]).collect()
}

fn mean_log<'t>(p: Var<'t>) -> Result<Var<'t>> {
    Ok(p.clamp(HAZARD_EPS, 1.0 - HAZARD_EPS).log().mean_all())
}

/// `-Σ_m [ mean log(1 - D(joint)) + mean log D(marginal) ]` over modalities
/// with at least two present rows. Encoder outputs are detached, so only the
/// discriminators receive gradient. Marginal pairs use a uniform random
/// permutation of the present shared rows.
pub fn discriminator_loss<'t, R: Rng + ?Sized>(
    fw: &mut Forward<'t, '_>,
    discs: &[Discriminator],
    shared: &[Var<'t>],
    unique: &[Var<'t>],
    present: &[Vec<bool>],
    rng: &mut R,
) -> Result<(Var<'t>, Vec<usize>)> {
    let mut total = fw.tape.scalar(0.0);
    let mut skipped = Vec::new();
    for (m, disc) in discs.iter().enumerate() {
        let rows = present_rows(&present[m]);
        if rows.len() < 2 {
            skipped.push(m);
            continue;
        }
        let s = shared[m].detach().gather_rows(&rows)?;
        let u = unique[m].detach().gather_rows(&rows)?;
        let mut perm: Vec<usize> = (0..rows.len()).collect();
        perm.shuffle(rng);
        let joint = disc.forward(fw, s, u)?;
        let marginal = disc.forward(fw, s.shuffle_rows(&perm)?, u)?;
        let term = mean_log(joint.one_minus())?.add(&mean_log(marginal)?)?;
        total = total.sub(&term)?;
    }
    Ok((total, skipped))
}

/// `-Σ_m mean log D(joint)` with the discriminators frozen. Shared inputs are
/// detached unless `opts.adv_updates_shared`.
pub fn adversarial_loss<'t>(
    fw: &mut Forward<'t, '_>,
    discs: &[Discriminator],
    shared: &[Var<'t>],
    unique: &[Var<'t>],
    present: &[Vec<bool>],
    opts: UniqueLossOptions,
) -> Result<(Var<'t>, Vec<usize>)> {
    let mut total = fw.tape.scalar(0.0);
    let mut skipped = Vec::new();
    for (m, disc) in discs.iter().enumerate() {
        let rows = present_rows(&present[m]);
        if rows.len() < 2 {
            skipped.push(m);
            continue;
        }
        let s_src = if opts.adv_updates_shared {
            shared[m]
        } else {
            shared[m].detach()
        };
        let s = s_src.gather_rows(&rows)?;
        let u = unique[m].gather_rows(&rows)?;
        let joint = disc.forward_const(fw, s, u)?;
        total = total.sub(&mean_log(joint)?)?;
    }
    Ok((total, skipped))
}

/// Both halves of the adversarial objective, computed on one tape.
pub fn unique_loss<'t, R: Rng + ?Sized>(
    fw: &mut Forward<'t, '_>,
    discs: &[Discriminator],
    shared: &[Var<'t>],
    unique: &[Var<'t>],
    present: &[Vec<bool>],
    rng: &mut R,
    opts: UniqueLossOptions,
) -> Result<UniqueLoss<'t>> {
    if shared.len() != discs.len() || unique.len() != discs.len() || present.len() != discs.len() {
        return Err(DrimError::Data(
            "one discriminator, shared, unique and mask per modality".into(),
        ));
    }
    let (disc, skipped) = discriminator_loss(fw, discs, shared, unique, present, rng)?;
    let (adv, _) = adversarial_loss(fw, discs, shared, unique, present, opts)?;
    let all_skipped = skipped.len() == discs.len();
    if all_skipped {
        log::warn!("adversarial loss skipped: no modality has two present rows");
    }
    Ok(UniqueLoss {
        disc,
        adv,
        skipped,
        all_skipped,
    })
}

/// Negative log-likelihood of discrete-time hazards, averaged over patients.
pub fn survival_loss<'t>(
    hazards: Var<'t>,
    times: &[f64],
    events: &[bool],
    grid: &IntervalGrid,
) -> Result<Var<'t>> {
    let n = times.len();
    let p = grid.intervals();
    let shape = hazards.shape();
    if shape != [n, p] || events.len() != n {
        return Err(DrimError::Data(format!(
            "hazards {shape:?} do not match {n} patients and {p} intervals"
        )));
    }
    let mut event_ind = Array::zeros(ndarray::IxDyn(&[n, p]));
    let mut survived = Array::zeros(ndarray::IxDyn(&[n, p]));
    for i in 0..n {
        let k = grid.interval_of(times[i])?;
        for j in 0..k {
            survived[[i, j]] = 1.0;
        }
        if events[i] {
            event_ind[[i, k - 1]] = 1.0;
            survived[[i, k - 1]] = 0.0;
        }
    }
    let tape = hazards.tape();
    let h = hazards.clamp(HAZARD_EPS, 1.0 - HAZARD_EPS);
    let ll = h
        .log()
        .mul(&tape.constant(event_ind))?
        .add(&h.one_minus().log().mul(&tape.constant(survived))?)?;
    Ok(ll.sum_all().scale(-1.0 / n as f64))
}

/// `Σ_m (1/n_m) Σ_{present i} ||x̃_i^m - x_i^m||²`.
pub fn reconstruction_loss<'t>(
    tape: &'t Tape,
    recon: &[Var<'t>],
    inputs: &[Var<'t>],
    present: &[Vec<bool>],
) -> Result<Var<'t>> {
    if recon.len() != inputs.len() || recon.len() != present.len() {
        return Err(DrimError::Data(
            "one reconstruction, input and mask per modality".into(),
        ));
    }
    let mut total = tape.scalar(0.0);
    for m in 0..recon.len() {
        let (rs, xs) = (recon[m].shape(), inputs[m].shape());
        if rs != xs {
            return Err(DrimError::Tensor(crate::autodiff::TensorError::ShapeMismatch {
                op: "reconstruction_loss",
                lhs: rs,
                rhs: xs,
            }));
        }
        let rows = present_rows(&present[m]);
        if rows.is_empty() {
            continue;
        }
        let err = recon[m]
            .gather_rows(&rows)?
            .squared_error(&inputs[m].gather_rows(&rows)?)?;
        total = total.add(&err.scale(1.0 / rows.len() as f64))?;
    }
    Ok(total)
}

/// `task + shared + γ·adv`.
pub fn drim_total<'t>(task: Var<'t>, shared: Var<'t>, adv: Var<'t>, gamma: f64) -> Result<Var<'t>> {
    if !(gamma >= 0.0) {
        return Err(DrimError::Config(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(task.add(&shared)?.add(&adv.scale(gamma))?)
}
