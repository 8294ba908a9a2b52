//! Rigid transforms, closed-form weighted alignment, ICP and error metrics.

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};

use crate::cloud::PointCloud;
use crate::error::{CoreError, Result};
use crate::tree::{BhTree, NearestIndex};

/// Orthonormality / determinant tolerance of a valid rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Relative size of the second singular value below which a cross-covariance
/// is treated as rank-deficient.
pub const RANK_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Extrinsic x, then y, then z rotation: `R = Rz * Ry * Rx`.
    pub fn from_euler_deg(angles: [f64; 3], translation: Vector3<f64>) -> Self {
        let [ax, ay, az] = angles.map(f64::to_radians);
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), az)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), ay)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), ax);
        Self::new(r.into_inner(), translation)
    }

    /// Inverse of [`RigidTransform::from_euler_deg`] for pitch within ±90°.
    pub fn euler_deg(&self) -> [f64; 3] {
        let (x, y, z) = Rotation3::from_matrix_unchecked(self.rotation).euler_angles();
        [x, y, z].map(f64::to_degrees)
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle_rad: f64, translation: Vector3<f64>) -> Self {
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle_rad);
        Self::new(r.into_inner(), translation)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -(rt * self.translation))
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// True when `RᵀR = I` and `det R = +1` within [`ROTATION_TOLERANCE`].
    pub fn is_valid(&self) -> bool {
        let r = &self.rotation;
        (r.transpose() * r - Matrix3::identity()).amax() <= ROTATION_TOLERANCE
            && (r.determinant() - 1.0).abs() <= ROTATION_TOLERANCE
            && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Weighted index pairs `(source i, target j, ω_ij)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Correspondences {
    pub pairs: Vec<(usize, usize, f64)>,
}

impl Correspondences {
    /// Unit-weight pairs `(i, i)` for clouds in one-to-one order.
    pub fn diagonal(n: usize) -> Self {
        Self {
            pairs: (0..n).map(|i| (i, i, 1.0)).collect(),
        }
    }
}

/// `Σ ω_ij ‖R y_i + t − x_j‖²` over the listed pairs.
pub fn cost_eq1(
    transform: &RigidTransform,
    source: &PointCloud,
    target: &PointCloud,
    corr: &Correspondences,
) -> Result<f64> {
    let mut total = 0.0;
    for &(i, j, w) in &corr.pairs {
        let y = source.points.get(i).ok_or(CoreError::LengthMismatch(i, source.len()))?;
        let x = target.points.get(j).ok_or(CoreError::LengthMismatch(j, target.len()))?;
        total += w * (transform.apply(y) - x).norm_squared();
    }
    Ok(total)
}

/// Multi-scale all-pairs CoM cost between two trees, summed over depths
/// `1..=d0` with the normalized inverse-density weights of both trees.
///
/// Diagnostic only; the network is trained on the pose loss instead.
pub fn cost_eq2(transform: &RigidTransform, tree_y: &BhTree, tree_x: &BhTree) -> Result<f64> {
    if tree_y.max_depth() != tree_x.max_depth() {
        return Err(CoreError::DepthMismatch(tree_y.max_depth(), tree_x.max_depth()));
    }
    let mut total = 0.0;
    for d in 1..=tree_y.max_depth() {
        let (ly, lx) = (tree_y.level(d), tree_x.level(d));
        let (mut wy, mut my, mut sy) = (0.0, Vector3::zeros(), 0.0);
        for (c, w) in ly.com.iter().zip(&ly.inv_density) {
            let p = transform.apply(c);
            wy += w;
            my += *w * p;
            sy += w * p.norm_squared();
        }
        let (mut wx, mut mx, mut sx) = (0.0, Vector3::zeros(), 0.0);
        for (c, w) in lx.com.iter().zip(&lx.inv_density) {
            wx += w;
            mx += *w * c;
            sx += w * c.norm_squared();
        }
        // Σ_l Σ_k w_l w_k ‖a_l − b_k‖² expanded into first and second moments.
        total += sy * wx + sx * wy - 2.0 * my.dot(&mx);
    }
    Ok(total)
}

/// Weighted least-squares rigid alignment mapping `source` onto `target`,
/// with the determinant guard against reflections.
pub fn procrustes(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    weights: &[f64],
) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(CoreError::LengthMismatch(source.len(), target.len()));
    }
    if weights.len() != source.len() {
        return Err(CoreError::LengthMismatch(weights.len(), source.len()));
    }
    if let Some(&w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(CoreError::InvalidWeight(w));
    }
    let positive = weights.iter().filter(|&&w| w > 0.0).count();
    if positive < 3 {
        return Err(CoreError::TooFewPairs(positive));
    }
    let wsum: f64 = weights.iter().sum();
    let mut ybar = Vector3::zeros();
    let mut xbar = Vector3::zeros();
    for ((y, x), w) in source.iter().zip(target).zip(weights) {
        ybar += *w * y;
        xbar += *w * x;
    }
    ybar /= wsum;
    xbar /= wsum;

    let mut h = Matrix3::zeros();
    let (mut spread_y, mut spread_x) = (0.0, 0.0);
    for ((y, x), w) in source.iter().zip(target).zip(weights) {
        let (dy, dx) = (y - ybar, x - xbar);
        h += *w * dy * dx.transpose();
        spread_y += w * dy.norm_squared();
        spread_x += w * dx.norm_squared();
    }
    let rotation = rotation_from_covariance(&h, (spread_y * spread_x).sqrt())?;
    Ok(RigidTransform::new(rotation, xbar - rotation * ybar))
}

/// `R = V diag(1, 1, det(V Uᵀ)) Uᵀ` for `H = U S Vᵀ`; `scale` bounds the
/// singular values and sets the rank-deficiency threshold.
pub(crate) fn rotation_from_covariance(h: &Matrix3<f64>, scale: f64) -> Result<Matrix3<f64>> {
    let dec = bhreg_autograd::svd::svd3(h);
    if !(scale > 0.0) || dec.s[1] <= RANK_TOLERANCE * scale {
        return Err(CoreError::RankDeficient(dec.s));
    }
    let d = (dec.v * dec.u.transpose()).determinant().signum();
    let guard = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    Ok(dec.v * guard * dec.u.transpose())
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub iterations: usize,
    pub cost: f64,
    /// Mean squared nearest-neighbor distance before the first and after
    /// every accepted iteration.
    pub costs: Vec<f64>,
}

/// Point-to-point ICP from the identity. The reported cost is the mean
/// squared nearest-neighbor distance; a step that would raise it is
/// rejected and ends the run.
pub fn icp(source: &PointCloud, target: &PointCloud, max_iters: usize, tol: f64) -> Result<IcpResult> {
    let index = NearestIndex::new(target)?;
    let n = source.len() as f64;
    let weights = vec![1.0; source.len()];
    let evaluate = |t: &RigidTransform| -> (f64, Vec<Vector3<f64>>) {
        let mut cost = 0.0;
        let matched: Vec<Vector3<f64>> = source
            .points
            .iter()
            .map(|y| {
                let q = t.apply(y);
                let (j, d2) = index.nearest(&q);
                cost += d2;
                target.points[j]
            })
            .collect();
        (cost / n, matched)
    };

    let mut transform = RigidTransform::identity();
    let (mut cost, mut matched) = evaluate(&transform);
    let mut costs = vec![cost];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let Ok(next) = procrustes(&source.points, &matched, &weights) else {
            break;
        };
        let (next_cost, next_matched) = evaluate(&next);
        if next_cost > cost {
            break;
        }
        let decrease = cost - next_cost;
        transform = next;
        cost = next_cost;
        matched = next_matched;
        costs.push(cost);
        if decrease < tol {
            break;
        }
    }
    log::debug!("icp: {iterations} iterations, cost {cost:e}");
    Ok(IcpResult {
        transform,
        iterations,
        cost,
        costs,
    })
}

/// Angle in degrees of the relative rotation `R_gtᵀ R_pred`.
///
/// Evaluated as `atan2(sin φ, cos φ)` with `cos φ = (tr − 1)/2` and `sin φ`
/// from the skew part, which equals `acos` of the clamped trace expression
/// but keeps full precision near 0° and 180°.
pub fn angular_error(r_gt: &Matrix3<f64>, r_pred: &Matrix3<f64>) -> f64 {
    let m = r_gt.transpose() * r_pred;
    let cos = (0.5 * (m.trace() - 1.0)).clamp(-1.0, 1.0);
    let skew = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let sin = (0.5 * skew.norm()).min(1.0);
    sin.atan2(cos).to_degrees()
}

pub fn translation_error(t_gt: &Vector3<f64>, t_pred: &Vector3<f64>) -> f64 {
    (t_gt - t_pred).norm()
}

/// Positions of `probe` under `init · (T_f ⋯ T_1)⁻¹` for `f = 1..=len`.
pub fn compose_trajectory(
    relative: &[RigidTransform],
    init: &RigidTransform,
    probe: &Vector3<f64>,
) -> Vec<Vector3<f64>> {
    let mut chain = RigidTransform::identity();
    relative
        .iter()
        .map(|t| {
            chain = t.compose(&chain);
            init.compose(&chain.inverse()).apply(probe)
        })
        .collect()
}

/// Root mean square of `errors`.
pub fn rmse(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(CoreError::EmptyInput("rmse"));
    }
    Ok((errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: Vec<Vector3<f64>>) -> PointCloud {
        PointCloud::new(points).unwrap()
    }

    #[test]
    fn single_pair_cost() {
        let s = cloud(vec![Vector3::zeros()]);
        let t = cloud(vec![Vector3::x()]);
        let corr = Correspondences {
            pairs: vec![(0, 0, 2.0)],
        };
        assert_eq!(cost_eq1(&RigidTransform::identity(), &s, &t, &corr).unwrap(), 2.0);
    }

    #[test]
    fn identity_cost_is_zero() {
        let pts = vec![Vector3::new(0.1, 0.2, 0.3), Vector3::new(-0.5, 0.0, 0.9)];
        let c = cloud(pts);
        let corr = Correspondences::diagonal(2);
        assert_eq!(cost_eq1(&RigidTransform::identity(), &c, &c, &corr).unwrap(), 0.0);
    }

    #[test]
    fn procrustes_identity() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ];
        let t = procrustes(&pts, &pts, &[1.0; 4]).unwrap();
        assert!((t.rotation - Matrix3::identity()).amax() < 1e-14);
        assert!(t.translation.amax() < 1e-14);
    }

    #[test]
    fn procrustes_rejects_collinear() {
        let pts: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(
            procrustes(&pts, &pts, &[1.0; 5]),
            Err(CoreError::RankDeficient(_))
        ));
        assert!(matches!(
            procrustes(&pts[..2], &pts[..2], &[1.0; 2]),
            Err(CoreError::TooFewPairs(2))
        ));
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = RigidTransform::from_axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2, Vector3::zeros());
        assert!((angular_error(&Matrix3::identity(), &r.rotation) - 90.0).abs() < 1e-12);
    }

    #[test]
    fn three_four_five() {
        assert_eq!(translation_error(&Vector3::zeros(), &Vector3::new(3.0, 4.0, 0.0)), 5.0);
    }

    #[test]
    fn rmse_values() {
        assert_eq!(rmse(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[3.0, 4.0]).unwrap(), 12.5f64.sqrt());
        assert!(rmse(&[]).is_err());
    }

    #[test]
    fn single_step_trajectory() {
        let t = RigidTransform::from_euler_deg([10.0, -20.0, 30.0], Vector3::new(0.5, -1.0, 2.0));
        let p = Vector3::new(1.0, 2.0, 3.0);
        let got = compose_trajectory(&[t], &RigidTransform::identity(), &p);
        let want = t.rotation.transpose() * (p - t.translation);
        assert!((got[0] - want).amax() < 1e-14);
    }
}
