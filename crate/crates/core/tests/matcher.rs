use bhreg_autograd::gradcheck::{check_gradients, FD_STEP, OP_TOLERANCE};
use bhreg_autograd::{Tape, Tensor, Var};
use bhreg_core::cloud::{normalize, PointCloud};
use bhreg_core::encoder::FeatureMap;
use bhreg_core::matcher::{attention, contextual_residual, score, score_from_embeddings, svd_head};
use bhreg_core::model::{Model, ModelConfig};
use bhreg_core::nn::{Bound, ParamStore};
use bhreg_core::rigid::{angular_error, procrustes, RigidTransform};
use bhreg_core::CoreError;
use nalgebra::{Matrix3, Matrix4, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let points = (0..n)
        .map(|i| {
            let c = [Vector3::new(-0.5, -0.4, 0.3), Vector3::new(0.4, 0.5, -0.2), Vector3::new(0.1, -0.6, -0.5)][i % 3];
            (c + Vector3::from_fn(|_, _| rng.random_range(-0.4..0.4))).map(|v: f64| v.clamp(-1.0, 1.0))
        })
        .collect();
    PointCloud::new(points).unwrap()
}

fn random_pose(rng: &mut ChaCha8Rng, max_deg: f64, max_t: f64) -> RigidTransform {
    let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    RigidTransform::from_axis_angle(
        axis,
        rng.random_range(-max_deg..max_deg).to_radians(),
        Vector3::from_fn(|_, _| rng.random_range(-max_t..max_t)),
    )
}

fn feature_map(tape: &mut Tape<f64>, rows: Tensor<f64>, mask: [bool; 64]) -> FeatureMap {
    let x = tape.constant(rows);
    let features = tape.mask_rows(x, &mask).unwrap();
    FeatureMap {
        features,
        mask,
        mass: [1.0 / 64.0; 64],
        com: [Vector3::zeros(); 64],
    }
}

fn random_mask(rng: &mut ChaCha8Rng) -> [bool; 64] {
    let mut m = [false; 64];
    for v in m.iter_mut() {
        *v = rng.random_bool(0.6);
    }
    m[0] = true;
    m
}

#[test]
fn zero_parameters_give_zero_residual() {
    let model = Model::new(ModelConfig::desk(), 1).unwrap();
    let mut zero = ParamStore::new();
    for (k, v) in model.params.iter() {
        zero.insert(k.clone(), Tensor::zeros(v.rows(), v.cols()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::<f64>::new();
    let p = zero.bind(&mut tape, false);
    let a = feature_map(&mut tape, Tensor::from_fn(64, 32, |_, _| rng.random_range(-1.0..1.0)), random_mask(&mut rng));
    let b = feature_map(&mut tape, Tensor::from_fn(64, 32, |_, _| rng.random_range(-1.0..1.0)), random_mask(&mut rng));
    let phi = contextual_residual(&mut tape, &p, &model.config.transformer, &a, &b).unwrap();
    assert!(tape.value(phi).data().iter().all(|&v| v == 0.0));
    // The score then reduces to the plain product of the embeddings.
    let s = score(&mut tape, &p, &model.config.transformer, &a, &b).unwrap();
    let plain = score_from_embeddings(&mut tape, a.features, b.features, &b.mask).unwrap();
    assert_eq!(tape.value(s), tape.value(plain));
}

#[test]
fn residual_rows_of_masked_cells_are_zero() {
    let model = Model::new(ModelConfig::desk(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::<f64>::new();
    let p = model.params.bind(&mut tape, false);
    let a = feature_map(&mut tape, Tensor::from_fn(64, 32, |_, _| rng.random_range(-1.0..1.0)), random_mask(&mut rng));
    let b = feature_map(&mut tape, Tensor::from_fn(64, 32, |_, _| rng.random_range(-1.0..1.0)), random_mask(&mut rng));
    let phi = contextual_residual(&mut tape, &p, &model.config.transformer, &a, &b).unwrap();
    for r in 0..64 {
        if !a.mask[r] {
            assert!(tape.value(phi).row(r).iter().all(|&v| v == 0.0));
        } else {
            assert!(tape.value(phi).row(r).iter().any(|&v| v != 0.0));
        }
    }
}

#[test]
fn attention_rows_are_convex_over_unmasked_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 8;
    let mut store = ParamStore::new();
    for w in ["wq", "wk"] {
        store.insert(format!("a.{w}"), Tensor::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0)));
    }
    store.insert("a.wv", Tensor::identity(d));
    store.insert("a.wo", Tensor::identity(d));
    let mut tape = Tape::<f64>::new();
    let p = store.bind(&mut tape, false);
    let q = tape.constant(Tensor::from_fn(10, d, |_, _| rng.random_range(-2.0..2.0)));
    // Column 0 of the keys is one everywhere, column 1 marks masked keys.
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
    let k = tape.constant(Tensor::from_fn(12, d, |r, c| match c {
        0 => 1.0,
        1 => {
            if mask[r] {
                0.0
            } else {
                1.0
            }
        }
        _ => (r * c) as f64 * 0.1,
    }));
    let out = attention(&mut tape, &p, "a", 1, q, k, &mask).unwrap();
    for r in 0..10 {
        let row = tape.value(out).row(r);
        assert!((row[0] - 1.0).abs() < 1e-12);
        assert_eq!(row[1], 0.0);
    }
}

#[test]
fn orthonormal_embeddings_score_on_the_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let raw = nalgebra::DMatrix::<f64>::from_fn(64, 64, |_, _| rng.random_range(-1.0..1.0));
    let q = raw.qr().q() * 4.0;
    let mut tape = Tape::<f64>::new();
    let e = tape.constant(Tensor::from_fn(64, 64, |r, c| q[(r, c)]));
    let s = score_from_embeddings(&mut tape, e, e, &[true; 64]).unwrap();
    for r in 0..64 {
        let row = tape.value(s).row(r);
        let arg = (0..64).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(arg, r);
    }
}

fn rigid_cells(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
    (0..n).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect()
}

#[test]
fn permutation_scores_recover_the_motion() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let n = 64;
        let y = rigid_cells(&mut rng, n);
        let gt = random_pose(&mut rng, 179.0, 3.0);
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                p.swap(i, rng.random_range(0..=i));
            }
            p
        };
        let mut x = vec![Vector3::zeros(); n];
        for (l, &j) in perm.iter().enumerate() {
            x[j] = gt.apply(&y[l]);
        }
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::from_fn(n, n, |r, c| if perm[r] == c { 1.0 } else { 0.0 }));
        let out = svd_head(&mut tape, s, &y, &x, &[1.0 / n as f64; 64]).unwrap().value(&tape);
        assert!(angular_error(&gt.rotation, &out.rotation).to_radians() <= 1e-9);
        assert!((gt.translation - out.translation).norm() <= 1e-9);
    }
}

#[test]
fn svd_head_equals_procrustes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let y = rigid_cells(&mut rng, 64);
        let x: Vec<_> = y.iter().map(|p| p + Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3))).collect();
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::identity(64));
        let head = svd_head(&mut tape, s, &y, &x, &[1.0 / 64.0; 64]).unwrap().value(&tape);
        let direct = procrustes(&y, &x, &[1.0 / 64.0; 64]).unwrap();
        assert!((head.rotation - direct.rotation).amax() <= 1e-9);
        assert!((head.translation - direct.translation).amax() <= 1e-9);
    }
}

#[test]
fn svd_head_needs_three_weighted_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let y = rigid_cells(&mut rng, 4);
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(Tensor::identity(4));
    let r = svd_head(&mut tape, s, &y, &y, &[0.5, 0.5, 0.0, 0.0]);
    assert!(matches!(r, Err(CoreError::TooFewPairs(2))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_scores_are_stochastic_and_proper(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_mask(&mut rng);
        let mut tape = Tape::<f64>::new();
        let fy = tape.constant(Tensor::from_fn(64, 6, |_, _| rng.random_range(-3.0..3.0)));
        let fx = tape.constant(Tensor::from_fn(64, 6, |_, _| rng.random_range(-3.0..3.0)));
        let s = score_from_embeddings(&mut tape, fy, fx, &mask).unwrap();
        for r in 0..64 {
            let row = tape.value(s).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            for (c, &v) in row.iter().enumerate() {
                prop_assert!(v >= 0.0);
                if !mask[c] {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
        let y = rigid_cells(&mut rng, 64);
        let x = rigid_cells(&mut rng, 64);
        let mass: Vec<f64> = (0..64).map(|i| if mask[i] { 1.0 } else { 0.0 }).collect();
        if let Ok(tv) = svd_head(&mut tape, s, &y, &x, &mass) {
            let t = tv.value(&tape);
            prop_assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
            prop_assert!((t.rotation.transpose() * t.rotation - Matrix3::identity()).amax() < 1e-9);
        }
    }
}

fn normalized_pair(seed: u64) -> (PointCloud, PointCloud, RigidTransform) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = cloud(&mut rng, 300);
    let gt = random_pose(&mut rng, 25.0, 0.2);
    let tgt = src.transformed(&gt);
    (src, tgt, gt)
}

#[test]
fn single_pass_equals_register_once() {
    let model = Model::new(ModelConfig::desk(), 5).unwrap();
    let (src, tgt, _) = normalized_pair(8);
    let refined = model.register_iterative(&src, &tgt, 1).unwrap();
    let (yn, xn, info) = normalize((&src, &tgt)).unwrap();
    let once = model.register_once(&model.build_tree(&yn).unwrap(), &model.build_tree(&xn).unwrap()).unwrap();
    let once = info.denormalize(&once);
    assert!((refined.total.rotation - once.rotation).amax() < 1e-14);
    assert!((refined.total.translation - once.translation).amax() < 1e-14);
    assert!((refined.total.rotation.determinant() - 1.0).abs() < 1e-12);
}

#[test]
fn passes_compose_to_the_total() {
    let model = Model::new(ModelConfig::desk(), 7).unwrap();
    let (src, tgt, _) = normalized_pair(9);
    let refined = model.register_iterative(&src, &tgt, 3).unwrap();
    assert_eq!(refined.passes.len(), 3);
    let mut m = Matrix4::identity();
    for p in &refined.passes {
        m = p.to_homogeneous() * m;
    }
    assert!((m - refined.total.to_homogeneous()).amax() < 1e-9);
    let again = model.register_iterative(&src, &tgt, 3).unwrap();
    assert_eq!(again, refined);
}

#[test]
fn pipeline_matches_finite_differences() {
    let model = Model::new(ModelConfig::tiny(), 12).unwrap();
    let (src, tgt, gt) = normalized_pair(10);
    let (yn, xn, _) = normalize((&src, &tgt)).unwrap();
    let (ty, tx) = (model.build_tree(&yn).unwrap(), model.build_tree(&xn).unwrap());
    let names = model.params.names();
    let check = check_gradients(&model.params.tensors(), FD_STEP, |tape, vars: &[Var]| {
        let p = Bound::from_vars(&names, vars);
        let out = model.forward_once(tape, &p, &ty, &tx).map_err(|e| match e {
            CoreError::Autograd(a) => a,
            other => panic!("{other}"),
        })?;
        let r_gt = tape.constant(Tensor::from_fn(3, 3, |i, j| gt.rotation[(i, j)]));
        let dr = tape.sub(out.rotation, r_gt)?;
        let a = tape.squared_norm(dr);
        let b = tape.squared_norm(out.translation);
        tape.add(a, b)
    })
    .unwrap();
    assert!(check.max_rel_error <= OP_TOLERANCE, "{:?}", check.per_input);
}
