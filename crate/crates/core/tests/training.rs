use bhreg_autograd::{Tape, Tensor};
use bhreg_core::cloud::{synth_shapes, PointCloud};
use bhreg_core::model::{Model, ModelConfig};
use bhreg_core::rigid::{angular_error, translation_error, RigidTransform};
use bhreg_core::training::{
    evaluate, evaluate_transforms, loss_pass, sample_gradients, total_loss, train, Checkpoint, DataConfig,
    LossState, PassWeighting, TrainConfig,
};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss_value(r_pred: &Matrix3<f64>, t_pred: &Vector3<f64>, r_gt: &Matrix3<f64>, t_gt: &Vector3<f64>, s: [f64; 2]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let r = tape.constant(Tensor::from_fn(3, 3, |i, j| r_pred[(i, j)]));
    let t = tape.constant(Tensor::from_fn(3, 1, |i, _| t_pred[i]));
    let sr = tape.constant(Tensor::scalar(s[0]));
    let st = tape.constant(Tensor::scalar(s[1]));
    let l = loss_pass(&mut tape, r, t, r_gt, t_gt, sr, st).unwrap();
    tape.value(l).item()
}

#[test]
fn loss_examples() {
    let eye = Matrix3::identity();
    let z = Vector3::zeros();
    assert_eq!(loss_value(&eye, &z, &eye, &z, [0.0, 0.0]), 0.0);
    assert_eq!(loss_value(&eye, &Vector3::new(1.0, 0.0, 0.0), &eye, &z, [0.0, 0.0]), 1.0);
    let flip = Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0));
    assert_eq!(loss_value(&flip, &z, &eye, &z, [0.0, 0.0]), 8.0);
    // exp(-σ) weighting plus σ
    let l = loss_value(&eye, &Vector3::new(2.0, 0.0, 0.0), &eye, &z, [0.5, 1.0]);
    assert!((l - (0.5 + (-1.0f64).exp() * 4.0 + 1.0)).abs() < 1e-15);
}

#[test]
fn total_loss_weights() {
    let mut tape = Tape::<f64>::new();
    let one = tape.constant(Tensor::scalar(1.0));
    let single = total_loss(&mut tape, &[one], PassWeighting::FromZero).unwrap();
    assert_eq!(tape.value(single).item(), 1.0);
    let three = total_loss(&mut tape, &[one, one, one], PassWeighting::FromZero).unwrap();
    assert_eq!(tape.value(three).item(), 1.75);
    assert!(total_loss(&mut tape, &[], PassWeighting::FromZero).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vals: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..10.0)).collect();
    let mut tape = Tape::<f64>::new();
    let vars: Vec<_> = vals.iter().map(|&v| tape.param(Tensor::scalar(v))).collect();
    let total = total_loss(&mut tape, &vars, PassWeighting::FromZero).unwrap();
    let direct: f64 = vals.iter().enumerate().map(|(k, v)| v / 2f64.powi(k as i32)).sum();
    assert!((tape.value(total).item() - direct).abs() < 1e-12);
    tape.backward(total).unwrap();
    for (k, v) in vars.iter().enumerate() {
        assert_eq!(tape.grad(*v).unwrap().item(), 0.5f64.powi(k as i32));
    }
}

#[test]
fn sigma_gradient_at_perfect_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gt = RigidTransform::from_axis_angle(Vector3::new(0.3, 1.0, -0.2), 0.7, Vector3::new(0.1, -0.2, 0.3));
    let mut tape = Tape::<f64>::new();
    let r = tape.param(Tensor::from_fn(3, 3, |i, j| gt.rotation[(i, j)]));
    let t = tape.param(Tensor::from_fn(3, 1, |i, _| gt.translation[i]));
    let sr = tape.param(Tensor::scalar(0.0));
    let st = tape.param(Tensor::scalar(rng.random_range(-1.0..1.0)));
    let l = loss_pass(&mut tape, r, t, &gt.rotation, &gt.translation, sr, st).unwrap();
    let total = total_loss(&mut tape, &[l], PassWeighting::FromZero).unwrap();
    tape.backward(total).unwrap();
    assert!((tape.grad(sr).unwrap().item() - 1.0).abs() < 1e-12);
    assert!((tape.grad(st).unwrap().item() - 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_nonnegative_and_zero_only_at_truth(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = |rng: &mut ChaCha8Rng| RigidTransform::from_axis_angle(
            Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            rng.random_range(-3.0..3.0),
            Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
        );
        let (a, b) = (pose(&mut rng), pose(&mut rng));
        let l = loss_value(&a.rotation, &a.translation, &b.rotation, &b.translation, [0.0, 0.0]);
        prop_assert!(l > 0.0);
        let same = loss_value(&b.rotation, &b.translation, &b.rotation, &b.translation, [0.0, 0.0]);
        prop_assert!(same.abs() <= 1e-12);
    }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch: 2,
        k0: 2,
        model: ModelConfig::tiny(),
        data: DataConfig {
            train_shapes: 4,
            val_shapes: 2,
            resample_pairs: false,
            ..DataConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic() {
    let cfg = small_config();
    let data = cfg.data.generate(cfg.seed).unwrap();
    let a = train(&cfg, &data.train_shapes, &data.train, &data.val, 1).unwrap();
    let b = train(&cfg, &data.train_shapes, &data.train, &data.val, 1).unwrap();
    assert_eq!(a.history[0].train_loss, b.history[0].train_loss);
    assert_eq!(a.last.to_json(), b.last.to_json());
    assert!(a.history[0].train_loss.is_finite());
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let cfg = small_config();
    let data = cfg.data.generate(3).unwrap();
    let out = train(&cfg, &data.train_shapes, &data.train, &data.val, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    out.best.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let again = dir.path().join("again.json");
    loaded.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let m1 = out.best.model().unwrap();
    let m2 = loaded.model().unwrap();
    assert_eq!(evaluate(&m1, &data.val, 2).unwrap(), evaluate(&m2, &data.val, 2).unwrap());

    let bad = out.best.to_json().replace("\"format_version\": 1", "\"format_version\": 99");
    assert!(Checkpoint::from_json(&bad).is_err());
    assert!(Checkpoint::from_json("{}").is_err());
}

#[test]
fn evaluation_reports() {
    let data = DataConfig {
        train_shapes: 0,
        val_shapes: 12,
        ..DataConfig::default()
    }
    .generate(4)
    .unwrap();
    let oracle: Vec<RigidTransform> = data.val.iter().map(|s| s.gt).collect();
    let r = evaluate_transforms(&data.val, &oracle).unwrap();
    assert_eq!(r.rows.len(), 12);
    assert!(r.phi_rmse < 1e-6 && r.dt_rmse < 1e-12);

    let ident = vec![RigidTransform::identity(); 12];
    let r = evaluate_transforms(&data.val, &ident).unwrap();
    let phi: Vec<f64> = data.val.iter().map(|s| angular_error(&Matrix3::identity(), &s.gt.rotation)).collect();
    let dt: Vec<f64> = data.val.iter().map(|s| s.gt.translation.norm()).collect();
    let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    assert!((r.phi_rmse - rms(&phi)).abs() < 1e-9);
    assert!((r.dt_rmse - rms(&dt)).abs() < 1e-12);
    assert_eq!(r.to_csv().lines().count(), 13);
    for (row, s) in r.rows.iter().zip(&data.val) {
        assert_eq!(row.dt, translation_error(&s.gt.translation, &Vector3::zeros()));
    }
}

#[test]
fn float32_profile_tracks_float64() {
    let model = Model::new(ModelConfig::tiny(), 5).unwrap();
    let shapes = synth_shapes(1, 6).unwrap();
    let cfg = DataConfig::default();
    let sample = &cfg.pairs(&shapes, 7).unwrap()[0];
    let (l64, _) = sample_gradients::<f64>(&model, &LossState::default(), sample, 1, PassWeighting::FromZero).unwrap();
    let (l32, _) = sample_gradients::<f32>(&model, &LossState::default(), sample, 1, PassWeighting::FromZero).unwrap();
    assert!((l64 - l32).abs() <= 1e-3 * l64.abs().max(1.0), "{l64} vs {l32}");
}

#[test]
fn generated_pairs_follow_the_pose_range() {
    let cfg = DataConfig {
        train_shapes: 6,
        val_shapes: 0,
        ..DataConfig::default()
    };
    let data = cfg.generate(8).unwrap();
    for (i, s) in data.train.iter().enumerate() {
        for a in s.gt.euler_deg() {
            assert!(a > 0.0 && a <= 30.0 + 1e-9);
        }
        assert!(s.gt.translation.amax() <= 0.3);
        assert_eq!(s.perturbation, cfg.spec_for(i));
        let _: &PointCloud = &s.source;
    }
}
