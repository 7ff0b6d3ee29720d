//! Post-hoc probes of learned representations: ridge read-outs of known
//! factors and a freshly trained joint-vs-shuffled discriminator.

use nalgebra::DMatrix;
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Forward, ParamStore, Tape};
use crate::encoders::Discriminator;
use crate::error::{DrimError, Result};
use crate::losses::discriminator_loss;
use crate::training::{cosine_lr, AdamW};

/// Linear map with intercept fitted by ridge regression.
#[derive(Debug, Clone)]
pub struct Ridge {
    weights: Array2<f64>,
    x_mean: Array2<f64>,
    y_mean: Array2<f64>,
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

impl Ridge {
    pub fn fit(x: &Array2<f64>, y: &Array2<f64>, lambda: f64) -> Result<Self> {
        if x.nrows() != y.nrows() || x.nrows() == 0 {
            return Err(DrimError::Data("ridge needs matching, non-empty rows".into()));
        }
        let x_mean = x.mean_axis(Axis(0)).expect("rows").insert_axis(Axis(0));
        let y_mean = y.mean_axis(Axis(0)).expect("rows").insert_axis(Axis(0));
        let xc = to_dmatrix(&(x - &x_mean));
        let yc = to_dmatrix(&(y - &y_mean));
        let gram = xc.transpose() * &xc + DMatrix::identity(x.ncols(), x.ncols()) * lambda;
        let rhs = xc.transpose() * yc;
        let w = gram
            .cholesky()
            .ok_or_else(|| DrimError::Numerical("ridge system is not positive definite".into()))?
            .solve(&rhs);
        let weights = Array2::from_shape_fn((w.nrows(), w.ncols()), |(i, j)| w[(i, j)]);
        Ok(Self { weights, x_mean, y_mean })
    }

    pub fn predict(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.x_mean).dot(&self.weights) + &self.y_mean
    }
}

/// `1 - SSE / SST`, pooled over all output columns.
pub fn r2_score(y: &Array2<f64>, pred: &Array2<f64>) -> f64 {
    let mean = y.mean_axis(Axis(0)).expect("rows");
    let sse: f64 = (y - pred).mapv(|v| v * v).sum();
    let sst: f64 = (y - &mean.insert_axis(Axis(0))).mapv(|v| v * v).sum();
    1.0 - sse / sst
}

/// Fit on the training pair, score on the held-out pair.
pub fn probe_r2(
    x_train: &Array2<f64>,
    y_train: &Array2<f64>,
    x_test: &Array2<f64>,
    y_test: &Array2<f64>,
    lambda: f64,
) -> Result<f64> {
    let ridge = Ridge::fit(x_train, y_train, lambda)?;
    Ok(r2_score(y_test, &ridge.predict(x_test)))
}

/// Training budget of a probe discriminator.
#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Train a fresh discriminator on `(s, u)` training pairs, then report its
/// accuracy at telling held-out joint pairs from shuffled ones. Joint pairs
/// count as correct below 0.5, shuffled pairs at or above it.
pub fn probe_discriminator(
    s_train: &Array2<f64>,
    u_train: &Array2<f64>,
    s_test: &Array2<f64>,
    u_test: &Array2<f64>,
    cfg: ProbeConfig,
) -> Result<f64> {
    let d = s_train.ncols();
    if u_train.ncols() != d || s_test.ncols() != d || u_test.ncols() != d {
        return Err(DrimError::Data("probe pairs must share one width".into()));
    }
    if s_train.nrows() < 2 || s_test.nrows() < 2 {
        return Err(DrimError::Data("probe needs at least two rows per split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let disc = Discriminator::new(&mut store, 0, d, &mut rng);
    let mut opt = AdamW::new(cfg.lr, 0.0);
    let n = s_train.nrows();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = (per_epoch * cfg.epochs) as u64;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let tape = Tape::new();
            let mut fw = Forward::new(&tape, &store, true, ChaCha8Rng::seed_from_u64(rng.random()));
            let s = tape.constant(s_train.select(Axis(0), chunk).into_dyn());
            let u = tape.constant(u_train.select(Axis(0), chunk).into_dyn());
            let present = vec![vec![true; chunk.len()]];
            let (loss, _) = discriminator_loss(&mut fw, std::slice::from_ref(&disc), &[s], &[u], &present, &mut rng)?;
            tape.backward(loss)?;
            let grads = fw.grads();
            drop(fw);
            let lr = cosine_lr(cfg.lr, opt.steps(), total);
            opt.step(&mut store, &grads, lr);
        }
    }

    let m = s_test.nrows();
    let mut perm: Vec<usize> = (0..m).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
    let shuffled = s_test.select(Axis(0), &perm);
    let tape = Tape::new();
    let mut fw = Forward::new(&tape, &store, false, ChaCha8Rng::seed_from_u64(0));
    let u = tape.constant(u_test.clone().into_dyn());
    let joint = disc.forward(&mut fw, tape.constant(s_test.clone().into_dyn()), u)?.value();
    let marginal = disc.forward(&mut fw, tape.constant(shuffled.into_dyn()), u)?.value();
    let correct = joint.iter().filter(|&&p| p < 0.5).count() + marginal.iter().filter(|&&p| p >= 0.5).count();
    Ok(correct as f64 / (2 * m) as f64)
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng))
    }

    #[test]
    fn ridge_recovers_a_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = gaussian(&mut rng, 200, 5);
        let w = gaussian(&mut rng, 5, 2);
        let y = x.dot(&w) + 3.0;
        let ridge = Ridge::fit(&x, &y, 1e-9).unwrap();
        let pred = ridge.predict(&x);
        assert!((r2_score(&y, &pred) - 1.0).abs() < 1e-9);
        let noise = gaussian(&mut rng, 200, 2);
        assert!(probe_r2(&x, &noise, &x, &gaussian(&mut rng, 200, 2), 1.0).unwrap() < 0.1);
    }

    #[test]
    fn probe_separates_dependent_pairs_and_not_independent_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = gaussian(&mut rng, 400, 3);
        let cfg = ProbeConfig::default();
        let acc = probe_discriminator(
            &s.slice(ndarray::s![..300, ..]).to_owned(),
            &s.slice(ndarray::s![..300, ..]).to_owned(),
            &s.slice(ndarray::s![300.., ..]).to_owned(),
            &s.slice(ndarray::s![300.., ..]).to_owned(),
            cfg,
        )
        .unwrap();
        assert!(acc > 0.85, "identical pairs {acc}");

        let u = gaussian(&mut rng, 400, 3);
        let acc = probe_discriminator(
            &s.slice(ndarray::s![..300, ..]).to_owned(),
            &u.slice(ndarray::s![..300, ..]).to_owned(),
            &s.slice(ndarray::s![300.., ..]).to_owned(),
            &u.slice(ndarray::s![300.., ..]).to_owned(),
            cfg,
        )
        .unwrap();
        assert!(acc < 0.62, "independent pairs {acc}");
    }
}
