use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bhreg_core::model::ModelConfig;
use bhreg_core::rigid::{angular_error, RigidTransform};
use bhreg_core::training::{DataConfig, TrainConfig};
use nalgebra::{Matrix4, Vector3, Vector4};

fn bhreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bhreg"))
        .args(args)
        .env_remove("BHREG_SEED")
        .env_remove("BHREG_PROFILE")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bhreg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Compare with `tests/golden/<name>`; `BHREG_UPDATE_GOLDEN=1` rewrites it.
fn golden(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("BHREG_UPDATE_GOLDEN").is_some() || !path.exists() {
        std::fs::write(&path, actual).unwrap();
    }
    assert_eq!(std::fs::read_to_string(&path).unwrap(), actual, "golden {name}");
}

fn rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn num(v: &str) -> f64 {
    v.parse().unwrap()
}

#[test]
fn build_tree_dump_of_two_points() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("a.xyz");
    std::fs::write(&input, "-0.5 -0.5 -0.5\n0.5 0.25 0.75\n").unwrap();
    let dump = dir.path().join("t.txt");
    let out = ok(&["build-tree", "--input", s(&input), "--depth", "6", "--dump", s(&dump)]);
    golden("build_tree.csv", &out);
    let text = std::fs::read_to_string(&dump).unwrap();
    let nodes: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(nodes.len(), 1 + 2 * 6);
    assert!(nodes[0].starts_with("0 0 2 "));
    golden("build_tree_dump.txt", &text);
}

#[test]
fn build_tree_rejects_points_outside_the_cube() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("a.xyz");
    std::fs::write(&input, "0 0 0\n2 0 0\n").unwrap();
    let out = bhreg(&["build-tree", "--input", s(&input)]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().filter(|l| l.starts_with("error:")).count(), 1);
    ok(&["build-tree", "--input", s(&input), "--normalize"]);
}

#[test]
fn procrustes_with_known_correspondences_recovers_the_pose() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("pairs");
    let listing = ok(&["make-data", "--out", s(&data), "--count", "2", "--seed", "3"]);
    golden("make_data.csv", &listing);
    let out = ok(&[
        "register",
        "--method",
        "procrustes-gt",
        "--source",
        s(&data.join("0000_source.xyz")),
        "--target",
        s(&data.join("0000_target.xyz")),
        "--gt",
        s(&data.join("0000_gt.txt")),
    ]);
    let r = &rows(&out)[0];
    assert_eq!(r[0], "procrustes-gt");
    assert!(num(&r[2]) <= 1e-7, "phi {}", r[2]);
    assert!(num(&r[3]) <= 1e-9, "dt {}", r[3]);
    golden("register_procrustes.csv", &out);
}

#[test]
fn icp_register_writes_the_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("pairs");
    ok(&["make-data", "--out", s(&data), "--count", "1", "--max-angle", "5", "--max-translation", "0.05"]);
    let est = dir.path().join("est.txt");
    let out = ok(&[
        "register",
        "--source",
        s(&data.join("0000_source.xyz")),
        "--target",
        s(&data.join("0000_target.xyz")),
        "--gt",
        s(&data.join("0000_gt.txt")),
        "--out",
        s(&est),
    ]);
    let r = &rows(&out)[0];
    assert_eq!(r[0], "icp");
    assert!(num(&r[2]) <= 0.1);
    let written = std::fs::read_to_string(&est).unwrap();
    let fields: Vec<f64> = written.split_whitespace().map(num).collect();
    let from_row: Vec<f64> = r[4..].iter().map(|v| num(v)).collect();
    assert_eq!(fields, from_row);
}

#[test]
fn trajectory_matches_matrix_products() {
    let dir = tempfile::tempdir().unwrap();
    let steps = [
        RigidTransform::from_euler_deg([10.0, 0.0, 5.0], Vector3::new(1.0, 0.0, 0.0)),
        RigidTransform::from_euler_deg([0.0, 20.0, 0.0], Vector3::new(0.0, 2.0, 0.5)),
        RigidTransform::from_euler_deg([3.0, 4.0, 5.0], Vector3::new(-1.0, 0.0, 0.25)),
    ];
    let input = dir.path().join("rel.txt");
    let text: String = steps
        .iter()
        .map(|t| {
            let m = t.to_homogeneous();
            (0..3).flat_map(|i| (0..4).map(move |j| m[(i, j)].to_string())).collect::<Vec<_>>().join(" ") + "\n"
        })
        .collect();
    std::fs::write(&input, text).unwrap();
    let out = ok(&["trajectory", "--input", s(&input), "--probe", "0.5,-1,2"]);
    let probe = Vector4::new(0.5, -1.0, 2.0, 1.0);
    let mut chain = Matrix4::identity();
    for (row, t) in rows(&out).iter().zip(&steps) {
        chain = t.to_homogeneous() * chain;
        let p = chain.try_inverse().unwrap() * probe;
        for k in 0..3 {
            assert!((num(&row[k + 1]) - p[k]).abs() < 1e-9);
        }
    }
    golden("trajectory.csv", &out);

    let ident = dir.path().join("ident.txt");
    std::fs::write(&ident, "1 0 0 0 0 1 0 0 0 0 1 0\n".repeat(2)).unwrap();
    let out = ok(&["trajectory", "--input", s(&ident), "--probe", "1,2,3"]);
    assert_eq!(out, "frame,x,y,z\n1,1,2,3\n2,1,2,3\n");
}

#[test]
fn gradcheck_reports_every_op() {
    let out = ok(&["gradcheck", "--ops-only", "--seed", "1"]);
    let r = rows(&out);
    assert!(r.len() >= 20);
    assert!(r.iter().all(|row| row[3] == "true"));
    assert!(r.iter().any(|row| row[0] == "svd3"));
}

#[test]
fn bench_reports_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("c.xyz");
    assert_eq!(ok(&["make-cloud", "--out", s(&cloud), "--points", "3000"]), "points\n3000\n");
    let out = ok(&["bench", "--input", s(&cloud), "--repeats", "3"]);
    let r = rows(&out);
    assert_eq!(r.iter().map(|row| row[0].as_str()).collect::<Vec<_>>(), ["tree_build", "inference", "register_pass"]);
    for row in &r {
        assert_eq!(row[1], "3000");
        assert_eq!(row[3], "3");
        let [mean, std, median, min] = [4, 5, 6, 7].map(|i| num(&row[i]));
        assert!(min <= median && min <= mean && std >= 0.0);
    }
}

#[test]
fn identity_eval_matches_ground_truth_magnitudes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("pairs");
    ok(&["make-data", "--out", s(&data), "--count", "4", "--seed", "9"]);
    let out = ok(&["eval", "--method", "identity", "--data", s(&data)]);
    let r = rows(&out);
    assert_eq!(r.len(), 4);
    let manifest = std::fs::read_to_string(data.join("manifest.csv")).unwrap();
    for (row, m) in r.iter().zip(rows(&manifest)) {
        let f: Vec<f64> = m[5..].iter().map(|v| num(v)).collect();
        let gt = RigidTransform::new(
            nalgebra::Matrix3::new(f[0], f[1], f[2], f[4], f[5], f[6], f[8], f[9], f[10]),
            Vector3::new(f[3], f[7], f[11]),
        );
        assert!((num(&row[1]) - angular_error(&gt.rotation, &nalgebra::Matrix3::identity())).abs() < 1e-9);
        assert!((num(&row[2]) - gt.translation.norm()).abs() < 1e-12);
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch: 2,
        k0: 1,
        model: ModelConfig::tiny(),
        data: DataConfig {
            train_shapes: 4,
            val_shapes: 2,
            ..DataConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn train_then_eval_and_register() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, tiny_config().to_toml()).unwrap();
    let ck = dir.path().join("model.json");
    let log = ok(&["train", "--config", s(&cfg), "--out", s(&ck), "--seed", "2"]);
    assert_eq!(rows(&log).len(), 2);
    let again = dir.path().join("again.json");
    assert_eq!(ok(&["train", "--config", s(&cfg), "--out", s(&again), "--seed", "2"]), log);
    assert_eq!(std::fs::read(&ck).unwrap(), std::fs::read(&again).unwrap());

    let data = dir.path().join("pairs");
    ok(&["make-data", "--out", s(&data), "--count", "2"]);
    let out = ok(&["eval", "--model", s(&ck), "--data", s(&data), "--passes", "1"]);
    assert_eq!(rows(&out).len(), 2);
    let out = ok(&[
        "register",
        "--method",
        "rpsrnet",
        "--model",
        s(&ck),
        "--passes",
        "3",
        "--source",
        s(&data.join("0000_source.xyz")),
        "--target",
        s(&data.join("0000_target.xyz")),
    ]);
    assert_eq!(rows(&out)[0][1], "3");
}

#[test]
fn configuration_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "learning_rate = 0.01\nmystery = 3\n").unwrap();
    let out = bhreg(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("m.json"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mystery"));

    assert!(!bhreg(&["register", "--source", "missing.xyz", "--target", "missing.xyz"]).status.success());
    assert!(!bhreg(&["no-such-command"]).status.success());
    assert!(!bhreg(&["bench", "--input", "x.xyz", "--profile", "float16"]).status.success());
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.xyz");
    let b = dir.path().join("b.xyz");
    ok(&["make-cloud", "--out", s(&a), "--points", "50", "--seed", "7"]);
    let out = Command::new(env!("CARGO_BIN_EXE_bhreg"))
        .args(["make-cloud", "--out", s(&b), "--points", "50"])
        .env("BHREG_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
