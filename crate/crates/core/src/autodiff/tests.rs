use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn arr(shape: &[usize], data: &[f64]) -> Array {
    array(shape, data.to_vec())
}

fn check<F>(f: F, params: &[Array], tol: f64)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> TensorResult<Var<'t>>,
{
    let report = grad_check(f, params, 1e-5, tol).unwrap();
    assert!(report.passed, "grad check failed: {:?}", report.max_rel_error);
}

#[test]
fn softmax_of_uniform_logits() {
    let tape = Tape::new();
    let x = tape.constant(arr(&[3], &[0.0, 0.0, 0.0]));
    let y = x.softmax(0).unwrap().value();
    for v in y.iter() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn sigmoid_of_zero() {
    let tape = Tape::new();
    assert_eq!(tape.scalar(0.0).sigmoid().item(), 0.5);
}

#[test]
fn identity_matmul() {
    let tape = Tape::new();
    let mut eye = Array::zeros(ndarray::IxDyn(&[3, 3]));
    for i in 0..3 {
        eye[[i, i]] = 1.0;
    }
    let a = arr(&[3, 2], &[1.0, -2.0, 3.5, 0.25, 7.0, 8.0]);
    let out = tape
        .constant(eye)
        .matmul(&tape.constant(a.clone()))
        .unwrap()
        .value();
    assert_eq!(out, a);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Array::zeros(ndarray::IxDyn(&[2, 3])));
    let b = tape.constant(Array::zeros(ndarray::IxDyn(&[2, 3])));
    match a.matmul(&b) {
        Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let c = tape.constant(Array::zeros(ndarray::IxDyn(&[4])));
    assert!(matches!(a.add(&c), Err(TensorError::ShapeMismatch { op: "add", .. })));
}

#[test]
fn backward_of_sum_of_squares() {
    let tape = Tape::new();
    let x = tape.leaf(arr(&[3], &[1.0, 2.0, 3.0]));
    let root = x.mul(&x).unwrap().sum_all();
    tape.backward(root).unwrap();
    assert_eq!(x.grad().unwrap(), arr(&[3], &[2.0, 4.0, 6.0]));
}

#[test]
fn backward_log_sigmoid_at_zero() {
    let tape = Tape::new();
    let w = tape.leaf(arr(&[], &[0.0]));
    let root = w.sigmoid().log();
    tape.backward(root).unwrap();
    assert!((w.grad().unwrap().sum() - 0.5).abs() < 1e-15);
}

#[test]
fn backward_of_constant_root_leaves_no_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(arr(&[2], &[1.0, 2.0]));
    let c = tape.scalar(3.0);
    tape.backward(c).unwrap();
    assert!(x.grad().is_none());
}

#[test]
fn backward_rejects_non_scalar_root() {
    let tape = Tape::new();
    let x = tape.leaf(arr(&[2], &[1.0, 2.0]));
    assert!(matches!(
        tape.backward(x.exp()),
        Err(TensorError::NonScalarRoot(_))
    ));
}

#[test]
fn repeated_backward_accumulates_until_reset() {
    let tape = Tape::new();
    let x = tape.leaf(arr(&[2], &[1.0, -1.0]));
    let root = x.scale(3.0).sum_all();
    tape.backward(root).unwrap();
    tape.backward(root).unwrap();
    assert_eq!(x.grad().unwrap(), arr(&[2], &[6.0, 6.0]));
    tape.zero_grad();
    tape.backward(root).unwrap();
    assert_eq!(x.grad().unwrap(), arr(&[2], &[3.0, 3.0]));
}

#[test]
fn detached_values_get_no_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(arr(&[2], &[1.0, 2.0]));
    let d = x.detach();
    let root = d.mul(&x).unwrap().sum_all();
    tape.backward(root).unwrap();
    assert_eq!(x.grad().unwrap(), arr(&[2], &[1.0, 2.0]));
    assert!(d.grad().is_none());
}

#[test]
fn grad_check_on_squared_norm() {
    let report = grad_check(
        |_, p| Ok(p[0].mul(&p[0])?.sum_all()),
        &[arr(&[4], &[0.3, -1.2, 2.0, 0.7])],
        1e-5,
        1e-7,
    )
    .unwrap();
    assert!(report.passed, "{:?}", report.max_rel_error);
}

#[test]
fn reshape_of_flat_leaf_feeding_matmul() {
    // with a single output column the left operand's gradient comes back
    // column-major from ndarray's product
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rand = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rand::Rng::random_range(rng, -1.0..1.0)).collect() };
    let w = arr(&[32, 1], &rand(&mut rng, 32));
    let flat = arr(&[12 * 32], &rand(&mut rng, 12 * 32));
    let tape = Tape::new();
    let leaf = tape.leaf(flat.clone());
    let y = leaf.reshape(&[12, 32]).unwrap().matmul(&tape.constant(w.clone())).unwrap();
    tape.backward(y.mul(&y).unwrap().sum_all()).unwrap();
    assert_eq!(leaf.grad().unwrap().shape(), &[12 * 32]);
    check(
        |tape, p| {
            let y = p[0].reshape(&[12, 32])?.matmul(&tape.constant(w.clone()))?;
            Ok(y.mul(&y)?.sum_all())
        },
        &[flat],
        1e-6,
    );
}

#[test]
fn grad_check_rejects_non_finite() {
    let err = grad_check(|_, p| Ok(p[0].log().sum_all()), &[arr(&[1], &[-1.0])], 1e-5, 1e-6);
    assert!(matches!(err, Err(TensorError::NonFinite(_))));
}

#[test]
fn dropout_eval_is_identity_and_train_is_inverted() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = tape.leaf(Array::ones(ndarray::IxDyn(&[200, 5])));
    let y = x.dropout(0.5, false, &mut rng);
    assert_eq!(y.id(), x.id());
    let z = x.dropout(0.5, true, &mut rng).value();
    assert!(z.iter().all(|&v| v == 0.0 || v == 2.0));
    let mean = z.mean().unwrap();
    assert!((mean - 1.0).abs() < 0.1);
}

#[test]
fn f32_precision_rounds_values() {
    let tape = Tape::with_precision(Precision::F32);
    let x = tape.constant(arr(&[1], &[0.1]));
    assert_eq!(x.item(), 0.1_f32 as f64);
}

#[test]
fn gather_repeated_rows_scatter_adds() {
    let tape = Tape::new();
    let x = tape.leaf(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let g = x.gather_rows(&[1, 1, 0]).unwrap();
    tape.backward(g.sum_all()).unwrap();
    assert_eq!(x.grad().unwrap(), arr(&[2, 2], &[1.0, 1.0, 2.0, 2.0]));
}

#[test]
fn shuffle_rows_rejects_non_permutations() {
    let tape = Tape::new();
    let x = tape.leaf(arr(&[3, 1], &[1.0, 2.0, 3.0]));
    assert!(x.shuffle_rows(&[0, 0, 1]).is_err());
    assert!(x.shuffle_rows(&[0, 1]).is_err());
}

fn bounded(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0_f64, len)
}

fn positive(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.5..2.0_f64, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_primitive_gradients(a in bounded(6), b in bounded(6), c in positive(6)) {
        let (a, b, c) = (arr(&[2, 3], &a), arr(&[2, 3], &b), arr(&[2, 3], &c));
        let ps = [a.clone(), b.clone(), c.clone()];
        check(|_, p| Ok(p[0].add(&p[1])?.mul(&p[2])?.sum_all()), &ps, 1e-6);
        check(|_, p| Ok(p[0].sub(&p[1])?.div(&p[2])?.sum_all()), &ps, 1e-6);
        check(|_, p| Ok(p[2].log().mul(&p[0])?.sum_all()), &ps, 1e-6);
        check(|_, p| Ok(p[0].exp().mul(&p[1])?.sum_all()), &ps, 1e-6);
        check(|_, p| Ok(p[0].sigmoid().mul(&p[1])?.sum_all()), &ps, 1e-6);
        check(|_, p| Ok(p[0].gelu().mul(&p[1])?.sum_all()), &ps, 1e-6);
        check(|_, p| Ok(p[0].affine(-1.5, 0.3).mul(&p[1])?.sum_all()), &ps, 1e-6);
        check(|_, p| p[0].squared_error(&p[1]), &ps, 1e-6);
    }

    #[test]
    fn broadcast_gradients(a in bounded(6), r in bounded(3), col in bounded(2)) {
        let ps = [arr(&[2, 3], &a), arr(&[3], &r), arr(&[2, 1], &col)];
        check(|_, p| Ok(p[0].add(&p[1])?.mul(&p[2])?.mul(&p[0])?.sum_all()), &ps, 1e-6);
        check(|_, p| Ok(p[0].div(&p[2].exp())?.sub(&p[1])?.mul(&p[0])?.sum_all()), &ps, 1e-6);
    }

    #[test]
    fn structural_gradients(a in bounded(6), b in bounded(6), w in bounded(6)) {
        let ps = [arr(&[2, 3], &a), arr(&[3, 2], &b), arr(&[2, 3], &w)];
        check(|_, p| Ok(p[0].matmul(&p[1])?.mul(&p[1].t()?.slice(1, 0, 2)?)?.sum_all()), &ps, 1e-6);
        check(|_, p| Ok(p[0].t()?.mul(&p[1])?.sum_all()), &ps, 1e-6);
        check(|_, p| Ok(p[0].reshape(&[3, 2])?.mul(&p[1])?.sum_all()), &ps, 1e-6);
        check(|t, p| Ok(t.concat(&[p[0], p[2]], 0)?.mul(&t.concat(&[p[2], p[1].reshape(&[2, 3])?], 0)?)?.sum_all()), &ps, 1e-6);
        check(|t, p| Ok(t.concat(&[p[0], p[2]], 1)?.exp().sum_all()), &ps, 1e-6);
        check(|_, p| Ok(p[0].slice(1, 1, 3)?.exp().sum_all()), &ps, 1e-6);
        check(|_, p| Ok(p[1].gather_rows(&[2, 0, 2])?.exp().sum_all()), &ps, 1e-6);
        check(|_, p| Ok(p[1].shuffle_rows(&[2, 0, 1])?.mul(&p[1])?.sum_all()), &ps, 1e-6);
    }

    #[test]
    fn reduction_gradients(a in bounded(12), w in bounded(12)) {
        let ps = [arr(&[3, 4], &a), arr(&[3, 4], &w)];
        check(|_, p| Ok(p[0].softmax(1)?.mul(&p[1])?.sum_all()), &ps, 1e-6);
        check(|_, p| Ok(p[0].softmax(0)?.mul(&p[1])?.sum_all()), &ps, 1e-6);
        check(|_, p| Ok(p[0].sum(0)?.exp().sum_all()), &ps, 1e-6);
        check(|_, p| Ok(p[0].mean(1)?.exp().sum_all()), &ps, 1e-6);
        check(|_, p| Ok(p[0].mul(&p[1])?.mean_all()), &ps, 1e-6);
        check(|_, p| Ok(p[0].row_norm(0.0)?.mul(&p[1].slice(1, 0, 1)?)?.sum_all()), &ps, 1e-6);
        check(|_, p| Ok(p[0].reshape(&[3, 2, 2])?.softmax(1)?.reshape(&[3, 4])?.mul(&p[1])?.sum_all()), &ps, 1e-6);
    }

    #[test]
    fn softmax_rows_are_distributions(a in prop::collection::vec(-30.0..30.0_f64, 15)) {
        let tape = Tape::new();
        let y = tape.constant(arr(&[3, 5], &a)).softmax(1).unwrap().value();
        for row in y.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn shuffle_then_inverse_is_identity(data in bounded(10), seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut inv = vec![0; 5];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let tape = Tape::new();
        let x = tape.constant(arr(&[5, 2], &data));
        let back = x.shuffle_rows(&perm).unwrap().shuffle_rows(&inv).unwrap();
        prop_assert_eq!(back.value(), x.value());
    }
}

