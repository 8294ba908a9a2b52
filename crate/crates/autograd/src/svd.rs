//! 3x3 singular value decomposition with a reverse-mode rule.
//!
//! Singular values are sorted in descending order and each singular vector
//! pair carries a canonical sign (largest-magnitude entry of `u_i` is
//! positive), so `u` and `v` are locally smooth functions of the input away
//! from repeated singular values.

use nalgebra::Matrix3;

/// Magnitude floor for the `s_j^2 - s_i^2` denominators of the backward rule.
pub const SPECTRAL_GAP_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Svd3 {
    pub u: Matrix3<f64>,
    pub s: [f64; 3],
    pub v: Matrix3<f64>,
}

impl Svd3 {
    pub fn reconstruct(&self) -> Matrix3<f64> {
        self.u * Matrix3::from_diagonal(&self.s.into()) * self.v.transpose()
    }
}

/// Decompose `m = u * diag(s) * v^T`.
pub fn svd3(m: &Matrix3<f64>) -> Svd3 {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let sv = svd.singular_values;

    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));

    let mut out_u = Matrix3::zeros();
    let mut out_v = Matrix3::zeros();
    let mut s = [0.0; 3];
    for (dst, &src) in order.iter().enumerate() {
        let mut uc = u.column(src).into_owned();
        let mut vc = v.column(src).into_owned();
        let pivot = (0..3)
            .max_by(|&a, &b| uc[a].abs().total_cmp(&uc[b].abs()).then(b.cmp(&a)))
            .unwrap_or(0);
        if uc[pivot] < 0.0 {
            uc = -uc;
            vc = -vc;
        }
        out_u.set_column(dst, &uc);
        out_v.set_column(dst, &vc);
        s[dst] = sv[src];
    }
    Svd3 {
        u: out_u,
        s,
        v: out_v,
    }
}

/// Gradient of a scalar loss with respect to the decomposed matrix, given
/// the loss gradients with respect to `u`, `s` and `v`.
///
/// Square full-rank case of the standard SVD differential:
/// `dA = U [ (F o (U^T dU - dU^T U)) S + diag(dS) + S (F o (V^T dV - dV^T V)) ] V^T`
/// with `F_ij = 1 / (s_j^2 - s_i^2)` off the diagonal.
pub fn svd3_backward(
    dec: &Svd3,
    grad_u: &Matrix3<f64>,
    grad_s: &[f64; 3],
    grad_v: &Matrix3<f64>,
) -> Matrix3<f64> {
    let Svd3 { u, s, v } = dec;
    let mut f = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                let mut den = s[j] * s[j] - s[i] * s[i];
                if den.abs() < SPECTRAL_GAP_FLOOR {
                    den = if den < 0.0 {
                        -SPECTRAL_GAP_FLOOR
                    } else {
                        SPECTRAL_GAP_FLOOR
                    };
                }
                f[(i, j)] = 1.0 / den;
            }
        }
    }
    let sm = Matrix3::from_diagonal(&(*s).into());
    let ju = u.transpose() * grad_u;
    let jv = v.transpose() * grad_v;
    let left = f.component_mul(&(ju - ju.transpose())) * sm;
    let right = sm * f.component_mul(&(jv - jv.transpose()));
    let mid = Matrix3::from_diagonal(&(*grad_s).into());
    u * (left + mid + right) * v.transpose()
}
