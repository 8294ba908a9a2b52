//! Plain matrix-product loops shared by the forward and backward passes.

use crate::Scalar;

/// `out = beta out + A B` where `A` is `n x k` with strides `sa`, `B` is
/// `k x m` with strides `sb` and `out` is row-major `n x m`. With a zero
/// `beta` the prior contents of `out` are ignored.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Scalar>(
    beta: T,
    a: &[T],
    sa: (usize, usize),
    b: &[T],
    sb: (usize, usize),
    out: &mut [T],
    n: usize,
    k: usize,
    m: usize,
) {
    if n == 0 || m == 0 {
        return;
    }
    if k == 0 {
        if beta == T::zero() {
            out[..n * m].fill(T::zero());
        }
        return;
    }
    let last = |s: (usize, usize), r: usize, c: usize| (r - 1) * s.0 + (c - 1) * s.1;
    assert!(last(sa, n, k) < a.len() && last(sb, k, m) < b.len() && n * m <= out.len());
    let st = |s: (usize, usize)| (s.0 as isize, s.1 as isize);
    // SAFETY: the extents of all three operands were checked above.
    unsafe {
        T::gemm(beta, n, k, m, a.as_ptr(), st(sa), b.as_ptr(), st(sb), out.as_mut_ptr(), (m as isize, 1));
    }
}

/// `out += A (n x k) * B (k x m)`.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    gemm_strided(T::one(), a, (k, 1), b, (m, 1), out, n, k, m);
}

/// `out = A (n x k) * B (k x m)`, overwriting `out`.
pub(crate) fn gemm_nn_set<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    gemm_strided(T::zero(), a, (k, 1), b, (m, 1), out, n, k, m);
}

/// `out += A (n x k) * B^T` where `B` is `m x k`.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    gemm_strided(T::one(), a, (k, 1), b, (1, k), out, n, k, m);
}

/// `out = A (n x k) * B^T`, overwriting `out`.
pub(crate) fn gemm_nt_set<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    gemm_strided(T::zero(), a, (k, 1), b, (1, k), out, n, k, m);
}

/// `out += A^T * B` where `A` is `k x n` and `B` is `k x m`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], k: usize, n: usize, m: usize) {
    gemm_strided(T::one(), a, (1, n), b, (m, 1), out, n, k, m);
}

/// Copies rows `rows` of the row-major `width`-column matrix `src` into
/// consecutive rows of `dst`.
pub(crate) fn gather<T: Scalar>(src: &[T], width: usize, rows: &[usize], dst: &mut Vec<T>) {
    dst.clear();
    for &r in rows {
        dst.extend_from_slice(&src[r * width..(r + 1) * width]);
    }
}

/// The first `len` elements of `buf`, growing it as needed. Contents are
/// unspecified.
pub(crate) fn scratch<T: Scalar>(buf: &mut Vec<T>, len: usize) -> &mut [T] {
    if buf.len() < len {
        buf.resize(len, T::zero());
    }
    &mut buf[..len]
}

/// Adds consecutive rows of `src` onto rows `rows` of `dst`.
pub(crate) fn scatter_add<T: Scalar>(src: &[T], width: usize, rows: &[usize], dst: &mut [T]) {
    for (k, &r) in rows.iter().enumerate() {
        for (d, &s) in dst[r * width..(r + 1) * width].iter_mut().zip(&src[k * width..(k + 1) * width]) {
            *d += s;
        }
    }
}
