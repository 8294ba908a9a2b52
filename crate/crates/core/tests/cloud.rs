use std::io::Write;

use bhreg_core::cloud::{
    make_pair, normalize, read_kitti_bin, read_xyz, sample_primitive, synth_shapes, PerturbationKind,
    PerturbationSpec, PointCloud, PoseRange, Primitive,
};
use bhreg_core::CoreError;
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn shape() -> PointCloud {
    synth_shapes(1, 7).unwrap().remove(0)
}

fn exact_1000() -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    PointCloud::new((0..1000).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..=1.0))).collect()).unwrap()
}

#[test]
fn xyz_file_round_trip() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "0 0 0\n1 1 1").unwrap();
    let c = read_xyz(f.path()).unwrap();
    assert_eq!(c.len(), 2);
    let empty = tempfile::NamedTempFile::new().unwrap();
    assert!(matches!(read_xyz(empty.path()), Err(CoreError::EmptyCloud)));
    assert!(matches!(read_xyz(std::path::Path::new("/nonexistent/x.xyz")), Err(CoreError::Io { .. })));
}

#[test]
fn kitti_file() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    for v in [1.0f32, 2.0, 3.0, 0.5, 4.0, 5.0, 6.0, 0.1] {
        f.write_all(&v.to_le_bytes()).unwrap();
    }
    let c = read_kitti_bin(f.path()).unwrap();
    assert_eq!(c.points[0], Vector3::new(1.0, 2.0, 3.0));
    assert_eq!(c.channel(0), &[0.5]);
}

#[test]
fn union_box_normalization() {
    let a = PointCloud::new(vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(10.0, 1.0, 1.0)]).unwrap();
    let b = PointCloud::new(vec![Vector3::new(3.0, 2.0, 2.0)]).unwrap();
    let (na, nb, info) = normalize((&a, &b)).unwrap();
    assert_eq!(info.scale, 5.0);
    assert_eq!(info.center, Vector3::new(5.0, 1.0, 1.0));
    let max = na.points.iter().chain(&nb.points).map(|p| p.amax()).fold(0.0, f64::max);
    assert_eq!(max, 1.0);
}

#[test]
fn normalized_pair_is_unchanged() {
    let a = PointCloud::new(vec![Vector3::new(-1.0, -1.0, -1.0), Vector3::new(0.2, 0.3, 0.1)]).unwrap();
    let b = PointCloud::new(vec![Vector3::new(1.0, 1.0, 1.0)]).unwrap();
    let (na, nb, info) = normalize((&a, &b)).unwrap();
    assert_eq!(info.scale, 1.0);
    assert_eq!(info.center, Vector3::zeros());
    assert_eq!(na, a);
    assert_eq!(nb, b);
}

#[test]
fn clean_pair_is_exact() {
    let src = shape();
    let s = make_pair(&src, &PerturbationSpec::clean(), &PoseRange::default(), 3).unwrap();
    assert_eq!(s.source, src);
    for (y, x) in s.source.points.iter().zip(&s.target.points) {
        assert!((s.gt.rotation * y + s.gt.translation - x).amax() <= 1e-12);
        assert!((s.gt.inverse().apply(x) - y).amax() <= 1e-12);
    }
    for v in s.gt.euler_deg() {
        assert!(v > 0.0 && v <= 45.0 + 1e-9, "{v}");
    }
    assert!(s.gt.translation.amax() <= 0.5);
}

#[test]
fn gaussian_noise_adds_points() {
    let src = exact_1000();
    let spec = PerturbationSpec::new(PerturbationKind::GaussianNoise, 0.2);
    let s = make_pair(&src, &spec, &PoseRange::default(), 4).unwrap();
    assert_eq!(s.source.len(), 1200);
    assert_eq!(s.target.len(), 1000);
    assert_eq!(&s.source.points[..1000], &src.points[..]);
    let u = make_pair(&src, &PerturbationSpec::new(PerturbationKind::UniformNoise, 0.05), &PoseRange::default(), 4)
        .unwrap();
    assert_eq!(u.source.len(), 1050);
    assert!(u.source.points[1000..].iter().all(|p| p.amax() <= 1.0));
}

#[test]
fn crop_removes_one_side() {
    let src = exact_1000();
    let spec = PerturbationSpec::new(PerturbationKind::Crop, 0.2);
    let s = make_pair(&src, &spec, &PoseRange::default(), 5).unwrap();
    assert_eq!(s.source.len(), 800);
    assert_eq!(s.removed.len(), 200);
    let plane = s.crop_plane.unwrap();
    for p in &s.removed {
        assert!(plane.normal.dot(p) > plane.offset);
    }
    for p in &s.source.points {
        assert!(plane.normal.dot(p) <= plane.offset);
    }
    // retained points are an ordered subset of the originals
    let mut it = src.points.iter();
    for p in &s.source.points {
        assert!(it.any(|q| q == p));
    }
}

#[test]
fn jitter_stays_within_tolerance() {
    let src = exact_1000();
    let spec = PerturbationSpec::new(PerturbationKind::Jitter, 0.03);
    let s = make_pair(&src, &spec, &PoseRange::default(), 6).unwrap();
    assert_eq!(s.source.len(), 1000);
    for (a, b) in s.source.points.iter().zip(&src.points) {
        assert!((a - b).amax() <= 0.03);
    }
}

#[test]
fn invalid_level_is_rejected() {
    let spec = PerturbationSpec::new(PerturbationKind::UniformNoise, 1.5);
    assert!(matches!(
        make_pair(&exact_1000(), &spec, &PoseRange::default(), 1),
        Err(CoreError::InvalidLevel { .. })
    ));
}

#[test]
fn synth_shapes_are_deterministic_and_bounded() {
    assert_eq!(synth_shapes(1, 7).unwrap(), synth_shapes(1, 7).unwrap());
    let shapes = synth_shapes(256, 11).unwrap();
    assert_eq!(shapes.len(), 256);
    for s in &shapes {
        assert!((512..=4096).contains(&s.len()));
        assert!(s.points.iter().all(|p| p.amax() <= 1.0));
    }
}

#[test]
fn sphere_primitive_radius() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for p in sample_primitive(Primitive::Sphere, 500, 0.4, &mut rng) {
        assert!((p.norm() - 0.4).abs() < 1e-12);
    }
    for p in sample_primitive(Primitive::Box, 500, 0.3, &mut rng) {
        assert!((p.amax() - 0.3).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalize_is_idempotent(pts in proptest::collection::vec(proptest::array::uniform3(-50.0f64..50.0), 2..40)) {
        let cloud = PointCloud::new(pts.iter().map(|p| Vector3::from(*p)).collect()).unwrap();
        let other = cloud.transformed(&bhreg_core::rigid::RigidTransform::from_euler_deg([5.0, 10.0, 15.0], Vector3::new(1.0, 2.0, 3.0)));
        if let Ok((a, b, _)) = normalize((&cloud, &other)) {
            let (_, _, again) = normalize((&a, &b)).unwrap();
            prop_assert!(again.center.amax() <= 1e-12);
            prop_assert!((again.scale - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn pairs_are_seed_deterministic(seed in any::<u64>()) {
        let src = shape();
        let spec = PerturbationSpec::new(PerturbationKind::Jitter, 0.03);
        let a = make_pair(&src, &spec, &PoseRange::default(), seed).unwrap();
        let b = make_pair(&src, &spec, &PoseRange::default(), seed).unwrap();
        prop_assert_eq!(a, b);
    }
}
