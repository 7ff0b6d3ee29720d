//! Per-modality networks: shared/unique encoder pair, discriminator, decoder
//! and survival head.

use rand::Rng;

use crate::autodiff::{array, Forward, Mlp, ParamStore, Var};
use crate::error::{DrimError, Result};

/// Row-norm epsilon under the square root when normalising shared outputs.
const NORM_EPS: f64 = 1e-12;

/// Shared encoder φ and unique encoder ξ for one modality.
#[derive(Debug, Clone)]
pub struct EncoderPair {
    pub modality: usize,
    pub shared: Mlp,
    pub unique: Mlp,
    pub normalize_shared: bool,
}

/// Encoder outputs for one modality.
#[derive(Debug, Clone, Copy)]
pub struct Encoding<'t> {
    pub shared: Var<'t>,
    pub unique: Var<'t>,
}

impl EncoderPair {
    /// Two hidden layers of width `hidden` with GELU and dropout, for both
    /// branches. Parameters live under `mod{m}.shared` and `mod{m}.unique`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        modality: usize,
        in_dim: usize,
        d: usize,
        hidden: usize,
        dropout: f64,
        normalize_shared: bool,
        rng: &mut R,
    ) -> Self {
        let dims = [in_dim, hidden, hidden, d];
        Self {
            modality,
            shared: Mlp::new(store, &format!("mod{modality}.shared"), &dims, dropout, rng),
            unique: Mlp::new(store, &format!("mod{modality}.unique"), &dims, dropout, rng),
            normalize_shared,
        }
    }

    /// Encode an N×d_m batch. Absent rows come out as zero rows; present
    /// shared rows have unit L2 norm when `normalize_shared` is set.
    pub fn encode<'t>(
        &self,
        fw: &mut Forward<'t, '_>,
        x: Var<'t>,
        present: &[bool],
    ) -> Result<Encoding<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[0] != present.len() || shape[1] != self.shared.in_dim() {
            return Err(DrimError::Data(format!(
                "modality {} expects {}×{} input, got {:?}",
                self.modality,
                present.len(),
                self.shared.in_dim(),
                shape
            )));
        }
        {
            let v = x.value_ref();
            for (i, row) in v.outer_iter().enumerate() {
                if row.iter().any(|f| !f.is_finite()) {
                    return Err(DrimError::NonFiniteInput {
                        patient: i,
                        modality: self.modality,
                    });
                }
            }
        }
        let mask = fw.constant(presence_column(present));
        let mut s = self.shared.forward(fw, x)?;
        if self.normalize_shared {
            s = s.div(&s.row_norm(NORM_EPS)?)?;
        }
        let s = s.mul(&mask)?;
        let u = self.unique.forward(fw, x)?.mul(&mask)?;
        Ok(Encoding { shared: s, unique: u })
    }

    pub fn param_count(&self) -> usize {
        self.shared.param_count() + self.unique.param_count()
    }
}

/// N×1 column of 1.0 (present) / 0.0 (absent).
pub(crate) fn presence_column(present: &[bool]) -> crate::autodiff::Array {
    array(
        &[present.len(), 1],
        present.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect(),
    )
}

/// Joint-vs-product-of-marginals classifier D: `[s ; u] -> (0, 1)`.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub modality: usize,
    pub net: Mlp,
}

impl Discriminator {
    /// 2d → 2d → 2d → 1, GELU hidden activations, no dropout.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, modality: usize, d: usize, rng: &mut R) -> Self {
        Self {
            modality,
            net: Mlp::new(store, &format!("mod{modality}.disc"), &[2 * d, 2 * d, 2 * d, 1], 0.0, rng),
        }
    }

    fn pair<'t>(fw: &Forward<'t, '_>, s: Var<'t>, u: Var<'t>) -> Result<Var<'t>> {
        let (ss, us) = (s.shape(), u.shape());
        if ss.len() != 2 || ss != us {
            return Err(DrimError::Tensor(crate::autodiff::TensorError::ShapeMismatch {
                op: "discriminate",
                lhs: ss,
                rhs: us,
            }));
        }
        Ok(fw.tape.concat(&[s, u], 1)?)
    }

    /// Probabilities, N×1, with the discriminator's parameters tracked.
    pub fn forward<'t>(&self, fw: &mut Forward<'t, '_>, s: Var<'t>, u: Var<'t>) -> Result<Var<'t>> {
        let x = Self::pair(fw, s, u)?;
        Ok(self.net.forward(fw, x)?.sigmoid())
    }

    /// Probabilities with the discriminator's parameters read as constants.
    pub fn forward_const<'t>(&self, fw: &mut Forward<'t, '_>, s: Var<'t>, u: Var<'t>) -> Result<Var<'t>> {
        let x = Self::pair(fw, s, u)?;
        Ok(self.net.forward_const(fw, x)?.sigmoid())
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }
}

/// Evaluate D on the row-wise pairs `(s_i, u_i)`.
pub fn discriminate<'t>(
    disc: &Discriminator,
    fw: &mut Forward<'t, '_>,
    s: Var<'t>,
    u: Var<'t>,
) -> Result<Vec<f64>> {
    let p = disc.forward(fw, s, u)?;
    let v = p.value_ref();
    Ok(v.iter().copied().collect())
}

/// Reconstructs a modality's input from its unique representation.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub modality: usize,
    pub net: Mlp,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        modality: usize,
        d: usize,
        hidden: usize,
        out_dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            modality,
            net: Mlp::new(store, &format!("mod{modality}.decoder"), &[d, hidden, hidden, out_dim], dropout, rng),
        }
    }

    pub fn forward<'t>(&self, fw: &mut Forward<'t, '_>, u: Var<'t>) -> Result<Var<'t>> {
        Ok(self.net.forward(fw, u)?)
    }
}

/// Maps a representation to P conditional hazards in (0, 1).
#[derive(Debug, Clone)]
pub struct SurvivalHead {
    pub net: Mlp,
    pub intervals: usize,
}

impl SurvivalHead {
    /// `in_dim → hidden → P`, sigmoid output.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        intervals: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            net: Mlp::new(store, name, &[in_dim, hidden, intervals], dropout, rng),
            intervals,
        }
    }

    pub fn forward<'t>(&self, fw: &mut Forward<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.net.forward(fw, x)?.sigmoid())
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{Array, Tape};

    fn setup() -> (ParamStore, EncoderPair, Discriminator) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let pair = EncoderPair::new(&mut store, 0, 5, 4, 16, 0.1, true, &mut rng);
        let disc = Discriminator::new(&mut store, 0, 4, &mut rng);
        (store, pair, disc)
    }

    fn input(n: usize, seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn(ndarray::IxDyn(&[n, 5]), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn parameter_sets_are_disjoint_and_counted_exactly() {
        let (store, pair, disc) = setup();
        assert_eq!(pair.shared.param_count(), 5 * 16 + 16 + 16 * 16 + 16 + 16 * 4 + 4);
        assert_eq!(store.count_scalars("mod0.shared."), pair.shared.param_count());
        assert_eq!(store.count_scalars("mod0.unique."), pair.unique.param_count());
        assert_eq!(disc.param_count(), 8 * 8 + 8 + 8 * 8 + 8 + 8 + 1);
        assert!(store.id("mod0.shared.layer1.weight").is_some());
    }

    #[test]
    fn absent_rows_are_zero_and_present_shared_rows_are_unit() {
        let (store, pair, _) = setup();
        let tape = Tape::new();
        let mut fw = Forward::new(&tape, &store, false, ChaCha8Rng::seed_from_u64(0));
        let present = [true, false, true, true];
        let x = fw.constant(input(4, 3));
        let enc = pair.encode(&mut fw, x, &present).unwrap();
        let s = enc.shared.value();
        let u = enc.unique.value();
        for (i, &p) in present.iter().enumerate() {
            let srow = s.index_axis(ndarray::Axis(0), i);
            let urow = u.index_axis(ndarray::Axis(0), i);
            if p {
                assert!((srow.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
            } else {
                assert!(srow.iter().chain(urow.iter()).all(|&v| v == 0.0));
            }
        }
        let none = pair.encode(&mut fw, x, &[false; 4]).unwrap();
        assert!(none.shared.value().iter().all(|&v| v == 0.0));
        assert!(none.unique.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_encoding_is_deterministic_and_row_independent() {
        let (store, pair, _) = setup();
        let x = input(6, 4);
        let run = |x: Array| {
            let tape = Tape::new();
            let mut fw = Forward::new(&tape, &store, false, ChaCha8Rng::seed_from_u64(9));
            let v = fw.constant(x);
            let e = pair.encode(&mut fw, v, &[true; 6]).unwrap();
            (e.shared.value(), e.unique.value())
        };
        assert_eq!(run(x.clone()), run(x.clone()));
        let perm = [3, 0, 5, 1, 4, 2];
        let permuted = x.select(ndarray::Axis(0), &perm);
        let (s, u) = run(x);
        let (sp, up) = run(permuted);
        assert_eq!(sp, s.select(ndarray::Axis(0), &perm));
        assert_eq!(up, u.select(ndarray::Axis(0), &perm));
    }

    #[test]
    fn non_finite_input_names_patient_and_modality() {
        let (store, pair, _) = setup();
        let tape = Tape::new();
        let mut fw = Forward::new(&tape, &store, false, ChaCha8Rng::seed_from_u64(0));
        let mut x = input(3, 1);
        x[[2, 1]] = f64::NAN;
        let v = fw.constant(x);
        match pair.encode(&mut fw, v, &[true; 3]) {
            Err(DrimError::NonFiniteInput { patient: 2, modality: 0 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn discriminator_outputs_are_probabilities() {
        let (store, _, disc) = setup();
        let tape = Tape::new();
        let mut fw = Forward::new(&tape, &store, false, ChaCha8Rng::seed_from_u64(0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = fw.constant(Array::from_shape_fn(ndarray::IxDyn(&[7, 4]), |_| rng.random_range(-3.0..3.0)));
        let u = fw.constant(Array::from_shape_fn(ndarray::IxDyn(&[7, 4]), |_| rng.random_range(-3.0..3.0)));
        let p1 = discriminate(&disc, &mut fw, s, u).unwrap();
        let p2 = discriminate(&disc, &mut fw, s, u).unwrap();
        assert!(p1.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(p1, p2);
        let short = fw.constant(Array::zeros(ndarray::IxDyn(&[6, 4])));
        assert!(discriminate(&disc, &mut fw, s, short).is_err());
    }
}
