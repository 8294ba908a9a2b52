use bhreg_autograd::gradcheck::{check_gradients, op_suite, well_conditioned_3x3, FD_STEP};
use bhreg_autograd::svd::svd3;
use bhreg_autograd::{AutogradError, Tape, Tensor};
use nalgebra::Matrix3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(rows, cols, data.to_vec()).unwrap()
}

#[test]
fn softmax_of_equal_row_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(1, 4, &[0.7; 4]));
    let y = tape.softmax_rows(x, None).unwrap();
    for &p in tape.value(y).data() {
        assert!((p - 0.25).abs() < 1e-15);
    }
}

#[test]
fn masked_softmax_zeroes_masked_columns() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(2, 3, &[5.0, 1.0, 2.0, -1.0, 0.0, 9.0]));
    let y = tape.softmax_rows(x, Some(&[false, true, true])).unwrap();
    let v = tape.value(y);
    for r in 0..2 {
        assert_eq!(v.get(r, 0), 0.0);
        assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
    assert_eq!(
        tape.softmax_rows(x, Some(&[false, false, false])),
        Err(AutogradError::AllMasked("softmax_rows"))
    );
}

#[test]
fn relu_on_negative_tensor() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(1, 3, &[-1.0, -0.5, -2.0]));
    let y = tape.relu(x);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn squared_norm_gradient_is_twice_input() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(1, 3, &[0.5, -1.5, 2.0]));
    let s = tape.squared_norm(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, -3.0, 4.0]);
}

#[test]
fn consumed_twice_accumulates() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(1, 2, &[1.0, 2.0]));
    let y = tape.add(x, x).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn gather_discards_gradient_of_empty_marker() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.gather_rows(x, &[-1, 1, -1, 1]).unwrap();
    assert_eq!(tape.value(y).row(0), &[0.0, 0.0]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    // Row 0 is never gathered; the -1 slots must not alias onto it.
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 2.0, 2.0]);
}

#[test]
fn max_pool_zero_fills_absent_members() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(2, 1, &[-1.0, 0.5]));
    let y = tape.max_pool_grouped(x, &[0, -1, -1, -1, 1, -1, -1, -1], 4).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.5]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_and_repeat() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(1, 2, &[1.0, 2.0]));
    assert_eq!(tape.backward(x), Err(AutogradError::NonScalarLoss(1, 2)));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.backward(s), Err(AutogradError::BackwardAlreadyRun));
    tape.zero_grad();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn shape_mismatch_is_reported() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(2, 3));
    let b = tape.constant(Tensor::zeros(2, 3));
    assert!(matches!(tape.matmul(a, b), Err(AutogradError::ShapeMismatch { .. })));
    assert!(matches!(
        tape.gather_rows(a, &[5]),
        Err(AutogradError::IndexOutOfRange { .. })
    ));
}

#[test]
fn batch_norm_single_row_is_scale_and_shift() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(1, 2, &[3.0, -1.0]));
    let g = tape.constant(t(1, 2, &[2.0, 0.5]));
    let b = tape.constant(t(1, 2, &[1.0, 1.0]));
    let y = tape.batch_norm_1d(x, g, b).unwrap();
    assert_eq!(tape.value(y).data(), &[7.0, 0.5]);
}

#[test]
fn batch_norm_normalizes_columns() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(4, 1, &[1.0, 2.0, 3.0, 4.0]));
    let g = tape.constant(t(1, 1, &[1.0]));
    let b = tape.constant(t(1, 1, &[0.0]));
    let y = tape.batch_norm_1d(x, g, b).unwrap();
    let v = tape.value(y).data();
    let mean: f64 = v.iter().sum::<f64>() / 4.0;
    let var: f64 = v.iter().map(|x| x * x).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-15);
    assert!((var - 1.25 / (1.25 + 1e-5)).abs() < 1e-12);
}

#[test]
fn svd_of_identity_and_diagonal() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::identity(3));
    let (u, s, v) = tape.svd3(x).unwrap();
    assert_eq!(tape.value(s).data(), &[1.0, 1.0, 1.0]);
    let vt = tape.transpose(v);
    let uvt = tape.matmul(u, vt).unwrap();
    for (a, b) in tape.value(uvt).data().iter().zip(Tensor::<f64>::identity(3).data()) {
        assert!((a - b).abs() < 1e-14);
    }

    let d = tape.constant(t(3, 3, &[3.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]));
    let (_, s, _) = tape.svd3(d).unwrap();
    for (a, b) in tape.value(s).data().iter().zip([3.0, 2.0, 1.0]) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn svd_rejects_non_finite() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(3, 3, &[f64::NAN, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    assert_eq!(tape.svd3(x).unwrap_err(), AutogradError::NonFinite("svd3"));
}

#[test]
fn svd_gradient_on_raw_factor_entries() {
    // Canonical signs make the raw entries of u and v differentiable.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let m = well_conditioned_3x3(&mut rng);
        let w = Tensor::from_fn(3, 7, |r, c| ((r * 7 + c) as f64 * 0.37).sin());
        let check = check_gradients(&[m], FD_STEP, |tape, v| {
            let (u, s, vv) = tape.svd3(v[0])?;
            let packed = tape.concat_cols(&[u, s, vv])?;
            let wc = tape.constant(w.clone());
            let p = tape.hadamard(packed, wc)?;
            Ok(tape.sum(p))
        })
        .unwrap();
        assert!(check.max_rel_error <= 1e-3, "{}", check.max_rel_error);
    }
}

#[test]
fn every_op_passes_finite_differences() {
    for seed in [1, 2, 3] {
        for check in op_suite(seed).unwrap() {
            assert!(
                check.passed(),
                "{}: rel err {} > {}",
                check.name,
                check.max_rel_error,
                check.tolerance
            );
        }
    }
}

#[test]
fn float32_profile_matches_float64_forward() {
    let a = t(2, 3, &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6]);
    let b = t(3, 2, &[1.0, -1.0, 0.5, 0.25, -2.0, 3.0]);
    let mut t64 = Tape::<f64>::new();
    let (x, y) = (t64.constant(a.clone()), t64.constant(b.clone()));
    let p64 = t64.matmul(x, y).unwrap();
    let mut t32 = Tape::<f32>::new();
    let (x, y) = (t32.constant(a.cast()), t32.constant(b.cast()));
    let p32 = t32.matmul(x, y).unwrap();
    for (u, v) in t64.value(p64).data().iter().zip(t32.value(p32).data()) {
        assert!((u - *v as f64).abs() < 1e-6);
    }
}

fn run_backward(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = well_conditioned_3x3(&mut rng);
    let mut tape = Tape::<f64>::new();
    let x = tape.param(m);
    let (u, s, v) = tape.svd3(x).unwrap();
    let uv = tape.matmul(u, v).unwrap();
    let a = tape.sum(uv);
    let b = tape.squared_norm(s);
    let l = tape.add(a, b).unwrap();
    tape.backward(l).unwrap();
    tape.grad(x).unwrap().data().to_vec()
}

#[test]
fn backward_is_bit_deterministic() {
    assert_eq!(run_backward(5), run_backward(5));
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(3, 4, vals).unwrap());
        let y = tape.softmax_rows(x, None).unwrap();
        for r in 0..3 {
            let row = tape.value(y).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn svd_reconstructs(vals in proptest::collection::vec(-5.0f64..5.0, 9)) {
        let m = Matrix3::from_row_slice(&vals);
        let d = svd3(&m);
        prop_assert!((d.reconstruct() - m).norm() <= 1e-10 * (1.0 + m.norm()));
        prop_assert!(d.s[0] >= d.s[1] && d.s[1] >= d.s[2] && d.s[2] >= 0.0);
    }
}

#[test]
fn indexed_conv_matches_dense_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
    let w = Tensor::from_fn(4 * 3, 2, |_, _| rng.random_range(-1.0..1.0));
    let index = [0i64, -1, 4, 2, -1, -1, -1, -1, 3, 3, 1, 0];
    let mut tape = Tape::<f64>::new();
    let (xv, wv) = (tape.param(x), tape.param(w));
    let sparse = tape.indexed_conv(xv, wv, &index, 4).unwrap();
    let gathered = tape.gather_rows(xv, &index).unwrap();
    let flat = tape.reshape(gathered, 3, 12).unwrap();
    let dense = tape.matmul(flat, wv).unwrap();
    for (a, b) in tape.value(sparse).data().iter().zip(tape.value(dense).data()) {
        assert!((a - b).abs() < 1e-14);
    }
    assert_eq!(tape.value(sparse).row(1), &[0.0, 0.0]);
    assert!(tape.indexed_conv(xv, wv, &index[..5], 4).is_err());
    assert!(tape.indexed_conv(xv, wv, &[0, 0, 0, 9], 4).is_err());
}
