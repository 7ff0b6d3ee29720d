//! Synthetic multimodal survival cohorts with known shared and unique factors.
//!
//! Every patient `i` draws a shared factor `z_i` and, per modality, a unique
//! factor `w_i^m`. Features are fixed random linear maps of both plus Gaussian
//! noise; the log-hazard mixes a linear read-out of `z_i` with one of each
//! `w_i^m`. Event times are exponential, censoring is uniform with its upper
//! bound calibrated to a target censored fraction.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DrimError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub n_modalities: usize,
    pub shared_dim: usize,
    pub unique_dim: usize,
    pub feature_dims: Vec<usize>,
    pub noise_std: f64,
    pub missing_rates: Vec<f64>,
    pub censor_rate_target: f64,
    pub horizon: f64,
    /// Weight of the shared read-out in the log-hazard.
    pub shared_effect: f64,
    /// Per-modality weights of the unique read-outs in the log-hazard.
    pub unique_effects: Vec<f64>,
    /// Multiplier on the unique part of every modality's features.
    pub unique_scale: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_patients: 600,
            n_modalities: 3,
            shared_dim: 4,
            unique_dim: 4,
            feature_dims: vec![32, 24, 16],
            noise_std: 0.1,
            missing_rates: vec![0.05, 0.15, 0.3],
            censor_rate_target: 0.3,
            horizon: 10.0,
            shared_effect: 2.0,
            unique_effects: vec![0.8, 0.8, 0.8],
            unique_scale: 1.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let m = self.n_modalities;
        let bad = |msg: String| Err(DrimError::Config(msg));
        if m < 2 {
            return bad(format!(
                "at least two modalities are needed to keep two per patient, got {m}"
            ));
        }
        if self.feature_dims.len() != m
            || self.missing_rates.len() != m
            || self.unique_effects.len() != m
        {
            return bad(format!(
                "feature_dims, missing_rates and unique_effects must each have {m} entries"
            ));
        }
        if self.n_patients == 0 || self.shared_dim == 0 || self.unique_dim == 0 {
            return bad("n_patients, shared_dim and unique_dim must be positive".into());
        }
        if self.feature_dims.iter().any(|&d| d == 0) {
            return bad("feature dimensions must be positive".into());
        }
        if let Some(r) = self.missing_rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return bad(format!("missing rate {r} outside [0, 1)"));
        }
        if !(self.censor_rate_target > 0.0 && self.censor_rate_target < 1.0) {
            return bad(format!(
                "censor_rate_target {} outside (0, 1)",
                self.censor_rate_target
            ));
        }
        if !(self.noise_std >= 0.0) || !(self.horizon > 0.0) {
            return bad("noise_std must be >= 0 and horizon > 0".into());
        }
        Ok(())
    }
}

/// Per-modality features with presence masks and survival outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientBatch {
    /// One N×d_m matrix per modality; absent rows are all zero.
    pub features: Vec<Array2<f64>>,
    /// `present[m][i]`: modality `m` observed for patient `i`.
    pub present: Vec<Vec<bool>>,
    pub time: Vec<f64>,
    pub event: Vec<bool>,
    pub truth: Option<GroundTruth>,
}

/// Generating factors, for verification only.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub shared: Array2<f64>,
    pub unique: Vec<Array2<f64>>,
    pub risk: Vec<f64>,
}

impl PatientBatch {
    pub fn n_patients(&self) -> usize {
        self.time.len()
    }

    pub fn n_modalities(&self) -> usize {
        self.features.len()
    }

    pub fn feature_dims(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.ncols()).collect()
    }

    pub fn present_count(&self, patient: usize) -> usize {
        self.present.iter().filter(|p| p[patient]).count()
    }

    /// Presence flags of one patient, one per modality.
    pub fn pattern(&self, patient: usize) -> Vec<bool> {
        self.present.iter().map(|p| p[patient]).collect()
    }

    pub fn event_fraction(&self) -> f64 {
        self.event.iter().filter(|&&e| e).count() as f64 / self.n_patients().max(1) as f64
    }

    /// Patients `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PatientBatch {
        let rows = |a: &Array2<f64>| a.select(ndarray::Axis(0), indices);
        PatientBatch {
            features: self.features.iter().map(rows).collect(),
            present: self
                .present
                .iter()
                .map(|p| indices.iter().map(|&i| p[i]).collect())
                .collect(),
            time: indices.iter().map(|&i| self.time[i]).collect(),
            event: indices.iter().map(|&i| self.event[i]).collect(),
            truth: self.truth.as_ref().map(|t| GroundTruth {
                shared: rows(&t.shared),
                unique: t.unique.iter().map(rows).collect(),
                risk: indices.iter().map(|&i| t.risk[i]).collect(),
            }),
        }
    }

    /// Keep only the listed modalities, in the listed order.
    pub fn with_modalities(&self, modalities: &[usize]) -> PatientBatch {
        PatientBatch {
            features: modalities.iter().map(|&m| self.features[m].clone()).collect(),
            present: modalities.iter().map(|&m| self.present[m].clone()).collect(),
            time: self.time.clone(),
            event: self.event.clone(),
            truth: self.truth.as_ref().map(|t| GroundTruth {
                shared: t.shared.clone(),
                unique: modalities.iter().map(|&m| t.unique[m].clone()).collect(),
                risk: t.risk.clone(),
            }),
        }
    }

    /// Mark every modality outside `keep` as absent and zero its rows.
    pub fn mask_to(&self, keep: &[usize]) -> PatientBatch {
        let mut out = self.clone();
        for m in 0..out.n_modalities() {
            if !keep.contains(&m) {
                out.present[m].iter_mut().for_each(|p| *p = false);
                out.features[m].fill(0.0);
            }
        }
        out
    }

    /// Indices of patients having at least every modality in `subset`.
    pub fn having_at_least(&self, subset: &[usize]) -> Vec<usize> {
        (0..self.n_patients())
            .filter(|&i| subset.iter().all(|&m| self.present[m][i]))
            .collect()
    }

    pub fn check_consistent(&self) -> Result<()> {
        let n = self.n_patients();
        if self.event.len() != n {
            return Err(DrimError::Data("event and time lengths differ".into()));
        }
        if self.present.len() != self.features.len() {
            return Err(DrimError::Data("presence and feature counts differ".into()));
        }
        for (m, (f, p)) in self.features.iter().zip(&self.present).enumerate() {
            if f.nrows() != n || p.len() != n {
                return Err(DrimError::Data(format!(
                    "modality {m} has {} rows and {} presence flags for {n} patients",
                    f.nrows(),
                    p.len()
                )));
            }
        }
        if let Some(i) = self.time.iter().position(|t| !(*t >= 0.0)) {
            return Err(DrimError::Data(format!("patient {i} has invalid time {}", self.time[i])));
        }
        Ok(())
    }
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = StandardNormal.sample(rng);
        v * scale
    })
}

fn unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng));
    let norm = v.dot(&v).sqrt();
    v / norm
}

/// Draw a cohort. Deterministic given `config.seed`.
pub fn generate(config: &GeneratorConfig) -> Result<PatientBatch> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_patients;
    let m_count = config.n_modalities;

    // Fixed generative maps.
    let shared_maps: Vec<Array2<f64>> = config
        .feature_dims
        .iter()
        .map(|&d| gaussian_matrix(d, config.shared_dim, 1.0 / (config.shared_dim as f64).sqrt(), &mut rng))
        .collect();
    let unique_maps: Vec<Array2<f64>> = config
        .feature_dims
        .iter()
        .map(|&d| gaussian_matrix(d, config.unique_dim, 1.0 / (config.unique_dim as f64).sqrt(), &mut rng))
        .collect();
    let shared_readout = unit_vector(config.shared_dim, &mut rng);
    let unique_readouts: Vec<Array1<f64>> = (0..m_count)
        .map(|_| unit_vector(config.unique_dim, &mut rng))
        .collect();

    let z = gaussian_matrix(n, config.shared_dim, 1.0, &mut rng);
    let w: Vec<Array2<f64>> = (0..m_count)
        .map(|_| gaussian_matrix(n, config.unique_dim, 1.0, &mut rng))
        .collect();

    let mut features: Vec<Array2<f64>> = (0..m_count)
        .map(|m| {
            let mut x = z.dot(&shared_maps[m].t()) + w[m].dot(&unique_maps[m].t()) * config.unique_scale;
            if config.noise_std > 0.0 {
                x += &gaussian_matrix(n, config.feature_dims[m], config.noise_std, &mut rng);
            }
            x
        })
        .collect();

    let mut risk: Vec<f64> = z.dot(&shared_readout).mapv(|v| v * config.shared_effect).to_vec();
    for m in 0..m_count {
        let contrib = w[m].dot(&unique_readouts[m]);
        for (r, c) in risk.iter_mut().zip(contrib.iter()) {
            *r += config.unique_effects[m] * c;
        }
    }

    // Exponential event times with rate exp(r), centred so the typical
    // patient's mean time is a quarter of the horizon.
    let mean_risk = risk.iter().sum::<f64>() / n as f64;
    let base = config.horizon / 4.0;
    let event_time: Vec<f64> = risk
        .iter()
        .map(|r| {
            let e: f64 = Exp1.sample(&mut rng);
            base * e * (-(r - mean_risk)).exp()
        })
        .collect();
    let censor_u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let c = calibrate_censoring(&event_time, &censor_u, config.horizon, config.censor_rate_target);
    let mut time = Vec::with_capacity(n);
    let mut event = Vec::with_capacity(n);
    for i in 0..n {
        let censor = censor_u[i] * config.horizon * c;
        let observed = event_time[i] <= censor;
        event.push(observed);
        time.push(if observed { event_time[i] } else { censor });
    }

    // Missingness, then repair up to two modalities per patient.
    let mut present: Vec<Vec<bool>> = config
        .missing_rates
        .iter()
        .map(|&rate| (0..n).map(|_| rng.random::<f64>() >= rate).collect())
        .collect();
    for i in 0..n {
        loop {
            let dropped: Vec<usize> = (0..m_count).filter(|&m| !present[m][i]).collect();
            if m_count - dropped.len() >= 2 {
                break;
            }
            let pick = dropped[rng.random_range(0..dropped.len())];
            present[pick][i] = true;
        }
    }
    for (x, p) in features.iter_mut().zip(&present) {
        for (i, &keep) in p.iter().enumerate() {
            if !keep {
                x.row_mut(i).fill(0.0);
            }
        }
    }

    Ok(PatientBatch {
        features,
        present,
        time,
        event,
        truth: Some(GroundTruth {
            shared: z,
            unique: w,
            risk,
        }),
    })
}

/// Bisect the censoring scale `c` (censor times `u_i * horizon * c`) so the
/// censored fraction is as close as possible to `target`.
fn calibrate_censoring(event_time: &[f64], censor_u: &[f64], horizon: f64, target: f64) -> f64 {
    let frac = |c: f64| {
        event_time
            .iter()
            .zip(censor_u)
            .filter(|(t, u)| **u * horizon * c < **t)
            .count() as f64
            / event_time.len() as f64
    };
    // frac is non-increasing in c
    let (mut lo, mut hi) = (1e-6_f64, 1e6_f64);
    let mut best = (f64::INFINITY, 1.0);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        let f = frac(mid);
        if (f - target).abs() < best.0 {
            best = ((f - target).abs(), mid);
        }
        if f > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    best.1
}

/// Stratified (on the event indicator) partition of patient indices.
pub fn split_indices(batch: &PatientBatch, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = batch.n_patients();
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(DrimError::Config("split fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DrimError::Config(format!("split fractions sum to {total}, not 1")));
    }
    let sizes = largest_remainder(n, fractions);
    if let Some(k) = sizes.iter().position(|&s| s == 0) {
        return Err(DrimError::Config(format!(
            "split {k} would be empty ({} of {n} patients)",
            fractions[k]
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events: Vec<usize> = (0..n).filter(|&i| batch.event[i]).collect();
    let mut censored: Vec<usize> = (0..n).filter(|&i| !batch.event[i]).collect();
    events.shuffle(&mut rng);
    censored.shuffle(&mut rng);

    // Event quota per split proportional to its size, within feasibility.
    let shares: Vec<f64> = sizes.iter().map(|&s| s as f64 / n as f64).collect();
    let mut quota = largest_remainder(events.len(), &shares);
    for _ in 0..n {
        let mut changed = false;
        for k in 0..sizes.len() {
            if quota[k] > sizes[k] {
                let excess = quota[k] - sizes[k];
                quota[k] = sizes[k];
                if let Some(j) = (0..sizes.len()).find(|&j| quota[j] + excess <= sizes[j] && j != k) {
                    quota[j] += excess;
                }
                changed = true;
            }
            let non_event = sizes[k] - quota[k];
            if non_event > censored.len() {
                quota[k] = sizes[k] - censored.len();
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let (mut ei, mut ci) = (0, 0);
    let mut out = Vec::with_capacity(sizes.len());
    for (k, &size) in sizes.iter().enumerate() {
        let take_events = quota[k].min(events.len() - ei);
        let mut part: Vec<usize> = events[ei..ei + take_events].to_vec();
        ei += take_events;
        let take_cens = (size - take_events).min(censored.len() - ci);
        part.extend_from_slice(&censored[ci..ci + take_cens]);
        ci += take_cens;
        out.push(part);
    }
    // Anything left over from rounding goes to the last split.
    let last = out.len() - 1;
    out[last].extend_from_slice(&events[ei..]);
    out[last].extend_from_slice(&censored[ci..]);
    for part in &mut out {
        part.sort_unstable();
    }
    Ok(out)
}

/// Patient-level disjoint partition of a batch, stratified on events.
pub fn split(batch: &PatientBatch, fractions: &[f64], seed: u64) -> Result<Vec<PatientBatch>> {
    Ok(split_indices(batch, fractions, seed)?
        .iter()
        .map(|idx| batch.select(idx))
        .collect())
}

/// Stratified k-fold partition: returns `(train, validation)` index pairs.
pub fn kfold(batch: &PatientBatch, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(DrimError::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let folds = split_indices(batch, &vec![1.0 / k as f64; k], seed)?;
    Ok((0..k)
        .map(|v| {
            let mut train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != v)
                .flat_map(|(_, f)| f.iter().copied())
                .collect();
            train.sort_unstable();
            (train, folds[v].clone())
        })
        .collect())
}

fn largest_remainder(total: usize, shares: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut out: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[k] += 1;
        left -= 1;
    }
    out
}

/// Slice of a matrix's rows as an owned matrix.

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n_patients: 200,
            seed,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn same_seed_same_batch() {
        assert_eq!(generate(&small(3)).unwrap(), generate(&small(3)).unwrap());
        assert_ne!(generate(&small(3)).unwrap(), generate(&small(4)).unwrap());
    }

    #[test]
    fn zero_missing_rates_keep_everything() {
        let cfg = GeneratorConfig {
            missing_rates: vec![0.0; 3],
            ..small(1)
        };
        let b = generate(&cfg).unwrap();
        assert!(b.present.iter().all(|p| p.iter().all(|&x| x)));
    }

    #[test]
    fn every_patient_keeps_two_modalities_and_absent_rows_are_zero() {
        let cfg = GeneratorConfig {
            missing_rates: vec![0.9, 0.9, 0.9],
            ..small(2)
        };
        let b = generate(&cfg).unwrap();
        for i in 0..b.n_patients() {
            assert!(b.present_count(i) >= 2);
            for m in 0..3 {
                if !b.present[m][i] {
                    assert!(b.features[m].row(i).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let one = GeneratorConfig {
            n_modalities: 1,
            feature_dims: vec![4],
            missing_rates: vec![0.0],
            unique_effects: vec![1.0],
            ..small(0)
        };
        assert!(generate(&one).is_err());
        let full = GeneratorConfig {
            missing_rates: vec![1.0, 0.0, 0.0],
            ..small(0)
        };
        assert!(generate(&full).is_err());
    }

    #[test]
    fn noiseless_shared_only_modalities_are_linear_in_each_other() {
        let cfg = GeneratorConfig {
            noise_std: 0.0,
            unique_scale: 0.0,
            unique_effects: vec![0.0; 3],
            missing_rates: vec![0.0; 3],
            ..small(5)
        };
        let b = generate(&cfg).unwrap();
        // x^2 = x^1 * L for some L: least squares residual must vanish.
        let x1 = nalgebra::DMatrix::from_row_iterator(200, 32, b.features[0].iter().copied());
        let x2 = nalgebra::DMatrix::from_row_iterator(200, 24, b.features[1].iter().copied());
        let svd = x1.clone().svd(true, true);
        let l = svd.solve(&x2, 1e-10).unwrap();
        let resid = (&x1 * l - &x2).abs().max();
        assert!(resid < 1e-8, "residual {resid}");
    }

    #[test]
    fn censoring_fraction_near_target() {
        for target in [0.2, 0.5, 0.7] {
            let cfg = GeneratorConfig {
                n_patients: 600,
                censor_rate_target: target,
                ..small(11)
            };
            let b = generate(&cfg).unwrap();
            let cens = 1.0 - b.event_fraction();
            assert!((cens - target).abs() <= 0.05, "target {target} got {cens}");
        }
    }

    #[test]
    fn split_sizes_and_stratification() {
        let b = generate(&GeneratorConfig {
            n_patients: 100,
            censor_rate_target: 0.5,
            ..small(8)
        })
        .unwrap();
        let parts = split_indices(&b, &[0.8, 0.2], 1).unwrap();
        assert_eq!(parts[0].len(), 80);
        assert_eq!(parts[1].len(), 20);
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let global = b.event_fraction();
        for p in &parts {
            let rate = p.iter().filter(|&&i| b.event[i]).count() as f64 / p.len() as f64;
            assert!((rate - global).abs() <= 0.1, "{rate} vs {global}");
        }
        let whole = split_indices(&b, &[1.0], 1).unwrap();
        assert_eq!(whole, vec![(0..100).collect::<Vec<_>>()]);
    }

    #[test]
    fn split_rejects_empty_parts() {
        let b = generate(&GeneratorConfig {
            n_patients: 10,
            ..small(8)
        })
        .unwrap();
        assert!(split_indices(&b, &[0.99, 0.01], 0).is_err());
        assert!(split_indices(&b, &[0.5, 0.6], 0).is_err());
    }

    #[test]
    fn kfold_covers_every_patient_once() {
        let b = generate(&small(9)).unwrap();
        let folds = kfold(&b, 5, 2).unwrap();
        let mut seen = vec![0; b.n_patients()];
        for (train, val) in &folds {
            assert_eq!(train.len() + val.len(), b.n_patients());
            for &i in val {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }
}
