//! Point cloud ingestion, normalization and synthetic pair generation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rigid::RigidTransform;

/// Standard deviation of the Gaussian noise points.
pub const GAUSSIAN_NOISE_STD: f64 = 0.02;

/// Ordered 3-D positions with optional extra per-point channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    /// Row-major `len() x channel_dim` values.
    pub channels: Vec<f64>,
    pub channel_dim: usize,
    pub frame_id: Option<u64>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        Self::with_channels(points, Vec::new(), 0)
    }

    pub fn with_channels(points: Vec<Vector3<f64>>, channels: Vec<f64>, channel_dim: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(CoreError::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(CoreError::NonFinite(i));
        }
        if channels.len() != points.len() * channel_dim {
            return Err(CoreError::LengthMismatch(channels.len(), points.len() * channel_dim));
        }
        Ok(Self {
            points,
            channels,
            channel_dim,
            frame_id: None,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i * self.channel_dim..(i + 1) * self.channel_dim]
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            ..self.clone()
        }
    }

    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }
}

/// Parse whitespace-separated ASCII points; `#` starts a comment. Fields
/// after the third are stored as channels.
pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    parse_xyz(&text)
}

pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut channels = Vec::new();
    let mut channel_dim = None;
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields = body
            .split_whitespace()
            .map(|f| {
                f.parse::<f64>().map_err(|_| CoreError::Parse {
                    line,
                    msg: format!("not a number: {f:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if fields.len() < 3 {
            return Err(CoreError::Parse {
                line,
                msg: format!("expected at least 3 fields, got {}", fields.len()),
            });
        }
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Parse {
                line,
                msg: "non-finite value".into(),
            });
        }
        let extra = fields.len() - 3;
        match channel_dim {
            None => channel_dim = Some(extra),
            Some(d) if d != extra => {
                return Err(CoreError::Parse {
                    line,
                    msg: format!("expected {} fields, got {}", d + 3, fields.len()),
                })
            }
            Some(_) => {}
        }
        points.push(Vector3::new(fields[0], fields[1], fields[2]));
        channels.extend_from_slice(&fields[3..]);
    }
    PointCloud::with_channels(points, channels, channel_dim.unwrap_or(0))
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, format_xyz(cloud)).map_err(|e| CoreError::io(path, e))
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 48);
    for (i, p) in cloud.points.iter().enumerate() {
        let _ = write!(out, "{} {} {}", p.x, p.y, p.z);
        for c in cloud.channel(i) {
            let _ = write!(out, " {c}");
        }
        out.push('\n');
    }
    out
}

/// Decode consecutive little-endian `f32` quadruples `(x, y, z, reflectance)`.
pub fn read_kitti_bin(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_kitti(&bytes)
}

pub fn decode_kitti(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(16) {
        return Err(CoreError::ScanSize(bytes.len() as u64));
    }
    if bytes.is_empty() {
        return Err(CoreError::EmptyCloud);
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut refl = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let v: [f32; 4] = std::array::from_fn(|k| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()));
        if !v.iter().all(|x| x.is_finite()) {
            return Err(CoreError::NonFinite(i));
        }
        points.push(Vector3::new(v[0] as f64, v[1] as f64, v[2] as f64));
        refl.push(v[3] as f64);
    }
    PointCloud::with_channels(points, refl, 1)
}

/// Map applied as `(p − center) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationInfo {
    pub center: Vector3<f64>,
    pub scale: f64,
}

impl NormalizationInfo {
    pub fn from_bounds(lo: Vector3<f64>, hi: Vector3<f64>) -> Result<Self> {
        let scale = 0.5 * (hi - lo).max();
        if !(scale > 0.0) {
            return Err(CoreError::DegenerateBox);
        }
        Ok(Self {
            center: 0.5 * (lo + hi),
            scale,
        })
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.center) / self.scale
    }

    /// Apply to every point, snapping rounding spill past `±1` back onto
    /// the box.
    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        let snap = |v: f64| if v.abs() > 1.0 && v.abs() <= 1.0 + 1e-12 { v.signum() } else { v };
        PointCloud {
            points: cloud.points.iter().map(|p| self.apply(p).map(snap)).collect(),
            ..cloud.clone()
        }
    }

    /// Express a transform estimated between normalized clouds in the
    /// original frame.
    pub fn denormalize(&self, t: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            t.rotation,
            self.scale * t.translation + self.center - t.rotation * self.center,
        )
    }

    /// Inverse of [`NormalizationInfo::denormalize`].
    pub fn normalize_transform(&self, t: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            t.rotation,
            (t.translation - self.center + t.rotation * self.center) / self.scale,
        )
    }
}

/// Normalize a pair into `[-1, 1]^3` with one center and scale taken from
/// the bounding box of their union, which keeps the relative rigid motion.
pub fn normalize(pair: (&PointCloud, &PointCloud)) -> Result<(PointCloud, PointCloud, NormalizationInfo)> {
    let (la, ha) = pair.0.bounds();
    let (lb, hb) = pair.1.bounds();
    let info = NormalizationInfo::from_bounds(la.inf(&lb), ha.sup(&hb))?;
    Ok((info.apply_cloud(pair.0), info.apply_cloud(pair.1), info))
}

pub fn normalize_cloud(cloud: &PointCloud) -> Result<(PointCloud, NormalizationInfo)> {
    let (lo, hi) = cloud.bounds();
    let info = NormalizationInfo::from_bounds(lo, hi)?;
    Ok((info.apply_cloud(cloud), info))
}

/// Rotate `cloud` by a uniformly random orientation and renormalize it.
pub fn reorient(cloud: &PointCloud, rng: &mut impl Rng) -> Result<PointCloud> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let q = Quaternion::new(n.sample(rng), n.sample(rng), n.sample(rng), n.sample(rng));
    let rotation = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
    let turned = cloud.transformed(&RigidTransform::new(rotation, Vector3::zeros()));
    Ok(normalize_cloud(&turned)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Clean,
    GaussianNoise,
    UniformNoise,
    Crop,
    Jitter,
}

impl PerturbationKind {
    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::Clean => "clean",
            PerturbationKind::GaussianNoise => "gaussian_noise",
            PerturbationKind::UniformNoise => "uniform_noise",
            PerturbationKind::Crop => "crop",
            PerturbationKind::Jitter => "jitter",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            PerturbationKind::Clean,
            PerturbationKind::GaussianNoise,
            PerturbationKind::UniformNoise,
            PerturbationKind::Crop,
            PerturbationKind::Jitter,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

/// Disturbance applied to the source of a pair. `level` is a point fraction
/// for noise and crop, and a displacement tolerance for jitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub level: f64,
}

impl PerturbationSpec {
    pub fn clean() -> Self {
        Self {
            kind: PerturbationKind::Clean,
            level: 0.0,
        }
    }

    pub fn new(kind: PerturbationKind, level: f64) -> Self {
        Self { kind, level }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            PerturbationKind::Clean => self.level.is_finite(),
            PerturbationKind::GaussianNoise | PerturbationKind::UniformNoise => (0.0..=1.0).contains(&self.level),
            PerturbationKind::Crop => (0.0..1.0).contains(&self.level),
            PerturbationKind::Jitter => (0.0..=1.0).contains(&self.level),
        };
        if ok {
            Ok(())
        } else {
            Err(CoreError::InvalidLevel {
                kind: self.kind.name(),
                level: self.level,
            })
        }
    }
}

/// Sampling ranges of the ground-truth motion: every Euler angle in
/// `(0°, max_angle_deg]`, every translation component in
/// `[−max_translation, max_translation]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRange {
    pub max_angle_deg: f64,
    pub max_translation: f64,
}

impl Default for PoseRange {
    fn default() -> Self {
        Self {
            max_angle_deg: 45.0,
            max_translation: 0.5,
        }
    }
}

impl PoseRange {
    pub fn sample(&self, rng: &mut impl Rng) -> RigidTransform {
        let angles = [(); 3].map(|_| self.max_angle_deg * (1.0 - rng.random::<f64>()));
        let t = Vector3::from_fn(|_, _| rng.random_range(-self.max_translation..=self.max_translation));
        RigidTransform::from_euler_deg(angles, t)
    }
}

/// Plane `normal · p = offset`; cropped points satisfy `normal · p > offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropPlane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    /// Perturbed source.
    pub source: PointCloud,
    /// Ground-truth motion applied to the unperturbed source.
    pub target: PointCloud,
    /// Maps source coordinates onto target coordinates.
    pub gt: RigidTransform,
    pub perturbation: PerturbationSpec,
    pub crop_plane: Option<CropPlane>,
    pub removed: Vec<Vector3<f64>>,
}

/// Draw a ground-truth motion, produce `target = R·source + t`, then
/// disturb the source according to `spec`.
pub fn make_pair(source: &PointCloud, spec: &PerturbationSpec, pose: &PoseRange, seed: u64) -> Result<TrainSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = pose.sample(&mut rng);
    let target = source.transformed(&gt);
    let n = source.len();
    let mut perturbed = source.clone();
    let mut crop_plane = None;
    let mut removed = Vec::new();
    match spec.kind {
        PerturbationKind::Clean => {}
        PerturbationKind::GaussianNoise => {
            let normal = Normal::new(0.0, GAUSSIAN_NOISE_STD).expect("positive std");
            let extra = (spec.level * n as f64).round() as usize;
            add_points(&mut perturbed, extra, || Vector3::from_fn(|_, _| normal.sample(&mut rng)));
        }
        PerturbationKind::UniformNoise => {
            let extra = (spec.level * n as f64).round() as usize;
            add_points(&mut perturbed, extra, || Vector3::from_fn(|_, _| rng.random_range(-1.0..=1.0)));
        }
        PerturbationKind::Crop => {
            let cut = ((spec.level * n as f64).round() as usize).min(n - 1);
            let normal = Vector3::from(UnitSphere.sample(&mut rng));
            let centroid = source.points.iter().sum::<Vector3<f64>>() / n as f64;
            let proj: Vec<f64> = source.points.iter().map(|p| normal.dot(&(p - centroid))).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]).then(a.cmp(&b)));
            let keep_count = n - cut;
            let mut keep = vec![false; n];
            for &i in &order[..keep_count] {
                keep[i] = true;
            }
            let kept_max = proj[order[keep_count - 1]];
            let offset_rel = if cut > 0 { 0.5 * (kept_max + proj[order[keep_count]]) } else { kept_max };
            crop_plane = Some(CropPlane {
                normal,
                offset: offset_rel + normal.dot(&centroid),
            });
            let mut points = Vec::with_capacity(keep_count);
            let mut channels = Vec::with_capacity(keep_count * source.channel_dim);
            for i in 0..n {
                if keep[i] {
                    points.push(source.points[i]);
                    channels.extend_from_slice(source.channel(i));
                } else {
                    removed.push(source.points[i]);
                }
            }
            perturbed.points = points;
            perturbed.channels = channels;
        }
        PerturbationKind::Jitter => {
            let tol = spec.level;
            for p in &mut perturbed.points {
                *p += Vector3::from_fn(|_, _| rng.random_range(-tol..=tol));
            }
        }
    }
    Ok(TrainSample {
        source: perturbed,
        target,
        gt,
        perturbation: *spec,
        crop_plane,
        removed,
    })
}

fn add_points(cloud: &mut PointCloud, extra: usize, mut draw: impl FnMut() -> Vector3<f64>) {
    for _ in 0..extra {
        cloud.points.push(draw());
        cloud.channels.extend(std::iter::repeat_n(0.0, cloud.channel_dim));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Sphere,
    Box,
    Plane,
    Lines,
}

const PRIMITIVES: [Primitive; 4] = [Primitive::Sphere, Primitive::Box, Primitive::Plane, Primitive::Lines];

/// `n` points on a primitive of unit size centered at the origin: sphere
/// surface of radius `size`, cube surface of half-extent `size`, square
/// patch in the `z = 0` plane, or a few line segments.
pub fn sample_primitive(kind: Primitive, n: usize, size: f64, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
    match kind {
        Primitive::Sphere => (0..n)
            .map(|_| size * Vector3::from(UnitSphere.sample(rng)))
            .collect(),
        Primitive::Box => (0..n)
            .map(|_| {
                let face = rng.random_range(0..6);
                let mut p = Vector3::from_fn(|_, _| rng.random_range(-size..=size));
                p[face / 2] = if face % 2 == 0 { -size } else { size };
                p
            })
            .collect(),
        Primitive::Plane => (0..n)
            .map(|_| Vector3::new(rng.random_range(-size..=size), rng.random_range(-size..=size), 0.0))
            .collect(),
        Primitive::Lines => {
            let lines = rng.random_range(2..=4);
            let segs: Vec<(Vector3<f64>, Vector3<f64>)> = (0..lines)
                .map(|_| {
                    let a = Vector3::from_fn(|_, _| rng.random_range(-size..=size));
                    let b = Vector3::from_fn(|_, _| rng.random_range(-size..=size));
                    (a, b)
                })
                .collect();
            (0..n)
                .map(|i| {
                    let (a, b) = segs[i % lines];
                    let s: f64 = rng.random();
                    a + s * (b - a)
                })
                .collect()
        }
    }
}

/// Deterministic synthetic shapes: each is a union of two to four randomly
/// posed primitives with 512–4096 points in total, normalized into
/// `[-1, 1]^3`.
pub fn synth_shapes(count: usize, seed: u64) -> Result<Vec<PointCloud>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let total = rng.random_range(512..=4096usize);
            synth_shape(total, &mut rng)
        })
        .collect()
}

/// One synthetic shape with exactly `total` points.
pub fn synth_shape(total: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    let parts = rng.random_range(2..=4usize);
    let mut points = Vec::with_capacity(total);
    for k in 0..parts {
        let n = total / parts + usize::from(k < total % parts);
        let kind = PRIMITIVES[rng.random_range(0..PRIMITIVES.len())];
        let size = rng.random_range(0.2..=0.6);
        let pose = PoseRange {
            max_angle_deg: 180.0,
            max_translation: 0.6,
        }
        .sample(rng);
        points.extend(sample_primitive(kind, n, size, rng).iter().map(|p| pose.apply(p)));
    }
    let (normed, _) = normalize_cloud(&PointCloud::new(points)?)?;
    Ok(normed)
}
