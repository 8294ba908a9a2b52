//! Arena tape: every operation appends a node holding its value and the
//! information its backward rule needs. [`Tape::backward`] walks the nodes in
//! exact reverse order and accumulates (`+=`) into each input's gradient.

use nalgebra::Matrix3;

use crate::error::{AutogradError, Result};
use crate::kernels::{gather, gemm_nn, gemm_nn_set, gemm_nt, gemm_nt_set, gemm_tn, scatter_add, scratch};
use crate::svd::{svd3, svd3_backward, Svd3};
use crate::{Scalar, Tensor};

/// Epsilon of the batch and layer normalizations.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, T),
    Relu(Var),
    SoftmaxRows(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        with_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    MaxPoolGrouped {
        x: Var,
        argmax: Vec<i64>,
    },
    GatherRows {
        x: Var,
        index: Vec<i64>,
    },
    IndexedConv {
        x: Var,
        w: Var,
        index: Vec<i64>,
        taps: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Exp(Var),
    Neg(Var),
    Recip(Var),
    Sum(Var),
    SumRows(Var),
    Mse(Var, Var),
    SquaredNorm(Var),
    MaskRows {
        x: Var,
        mask: Vec<bool>,
    },
    Svd3 {
        x: Var,
        dec: Box<Svd3>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Single-threaded by construction; independent tapes may live on
/// independent threads.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(AutogradError::ShapeMismatch {
            op,
            left: a,
            right: b,
        });
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf: gradients are retained after [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Forget gradients so [`Tape::backward`] may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ----- forward operations -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(AutogradError::ShapeMismatch {
                op: "matmul",
                left: (n, k),
                right: (k2, m),
            });
        }
        let mut out = Tensor::zeros(n, m);
        gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            n,
            k,
            m,
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.needs(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(op, va.shape(), vb.shape())?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("hadamard", a, b, |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Hadamard(a, b), rg))
    }

    /// `a + 1 * row`: adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(AutogradError::ShapeMismatch {
                op: "add_row",
                left: va.shape(),
                right: vr.shape(),
            });
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        let rg = self.needs(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// `diag(w) * a` for an `n x 1` weight column `w`.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (va, vw) = (self.value(a), self.value(w));
        if vw.cols() != 1 || vw.rows() != va.rows() {
            return Err(AutogradError::ShapeMismatch {
                op: "scale_rows",
                left: va.shape(),
                right: vw.shape(),
            });
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            let k = vw.data()[r];
            for o in out.row_mut(r) {
                *o *= k;
            }
        }
        let rg = self.needs(&[a, w]);
        Ok(self.push(out, Op::ScaleRows(a, w), rg))
    }

    /// `s * a` for a `1 x 1` tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let vs = self.value(s);
        if vs.shape() != (1, 1) {
            return Err(AutogradError::ShapeMismatch {
                op: "mul_scalar",
                left: self.shape(a),
                right: vs.shape(),
            });
        }
        let k = vs.item();
        let out = self.value(a).map(|x| x * k);
        let rg = self.needs(&[a, s]);
        Ok(self.push(out, Op::MulScalar(a, s), rg))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|x| x * k);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.needs(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Row-wise softmax. Columns with `col_mask[c] == false` get an additive
    /// `-inf` before normalization, so they receive zero probability.
    pub fn softmax_rows(&mut self, a: Var, col_mask: Option<&[bool]>) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        if let Some(mask) = col_mask {
            if mask.len() != cols {
                return Err(AutogradError::ShapeMismatch {
                    op: "softmax_rows",
                    left: (rows, cols),
                    right: (1, mask.len()),
                });
            }
            if !mask.iter().any(|&m| m) {
                return Err(AutogradError::AllMasked("softmax_rows"));
            }
        }
        let keep = |c: usize| col_mask.is_none_or(|m| m[c]);
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = va.row(r);
            let mut mx = T::neg_infinity();
            for (c, &x) in row.iter().enumerate() {
                if keep(c) && x > mx {
                    mx = x;
                }
            }
            let mut total = T::zero();
            let orow = out.row_mut(r);
            for (c, &x) in row.iter().enumerate() {
                if keep(c) {
                    let e = (x - mx).exp();
                    orow[c] = e;
                    total += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    /// Normalizes every column over the rows (the batch axis), then applies
    /// per-column `gamma` and `beta` (`1 x C`). A single row has no batch
    /// statistics and only receives the scale and shift.
    pub fn batch_norm_1d(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let (n, c) = vx.shape();
        for p in [gamma, beta] {
            if self.shape(p) != (1, c) {
                return Err(AutogradError::ShapeMismatch {
                    op: "batch_norm_1d",
                    left: (n, c),
                    right: self.shape(p),
                });
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let with_stats = n > 1;
        let mut xhat = vx.data().to_vec();
        let mut inv_std = vec![T::one(); c];
        if with_stats {
            let nf = T::of(n as f64);
            let eps = T::of(NORM_EPS);
            for j in 0..c {
                let mut mean = T::zero();
                for i in 0..n {
                    mean += vx.data()[i * c + j];
                }
                mean /= nf;
                let mut var = T::zero();
                for i in 0..n {
                    let d = vx.data()[i * c + j] - mean;
                    var += d * d;
                }
                var /= nf;
                let is = T::one() / (var + eps).sqrt();
                inv_std[j] = is;
                for i in 0..n {
                    xhat[i * c + j] = (vx.data()[i * c + j] - mean) * is;
                }
            }
        }
        let mut out = Tensor::zeros(n, c);
        for i in 0..n {
            for j in 0..c {
                out.data_mut()[i * c + j] = g[j] * xhat[i * c + j] + b[j];
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                with_stats,
            },
            rg,
        ))
    }

    /// Normalizes every row over its columns, then applies per-column
    /// `gamma` and `beta` (`1 x C`).
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let (n, c) = vx.shape();
        for p in [gamma, beta] {
            if self.shape(p) != (1, c) {
                return Err(AutogradError::ShapeMismatch {
                    op: "layer_norm_rows",
                    left: (n, c),
                    right: self.shape(p),
                });
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let cf = T::of(c as f64);
        let eps = T::of(NORM_EPS);
        let mut xhat = vec![T::zero(); n * c];
        let mut inv_std = vec![T::zero(); n];
        let mut out = Tensor::zeros(n, c);
        for i in 0..n {
            let row = vx.row(i);
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out.data_mut()[i * c + j] = g[j] * h + b[j];
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Elementwise max over fixed-size groups of rows. `groups` is a flat
    /// list of `group_size` row indices per output row; `-1` stands for an
    /// absent member that contributes a zero row.
    pub fn max_pool_grouped(&mut self, x: Var, groups: &[i64], group_size: usize) -> Result<Var> {
        if group_size == 0 || !groups.len().is_multiple_of(group_size) {
            return Err(AutogradError::Invalid {
                op: "max_pool_grouped",
                msg: format!("{} indices do not form groups of {group_size}", groups.len()),
            });
        }
        let vx = self.value(x);
        let (n, c) = vx.shape();
        let out_rows = groups.len() / group_size;
        let mut out = Tensor::zeros(out_rows, c);
        let mut argmax = vec![-1i64; out_rows * c];
        for (g, members) in groups.chunks(group_size).enumerate() {
            for &m in members {
                if m < -1 || m >= n as i64 {
                    return Err(AutogradError::IndexOutOfRange {
                        op: "max_pool_grouped",
                        index: m,
                        rows: n,
                    });
                }
            }
            for j in 0..c {
                let mut best = T::neg_infinity();
                let mut arg = -1i64;
                for &m in members {
                    let v = if m < 0 { T::zero() } else { vx.get(m as usize, j) };
                    if v > best {
                        best = v;
                        arg = m;
                    }
                }
                out.set(g, j, best);
                argmax[g * c + j] = arg;
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::MaxPoolGrouped { x, argmax }, rg))
    }

    /// Sparse windowed linear map. `index` lists `taps` source rows of `x`
    /// per output row, `-1` for an absent tap; `w` is `taps·C_in x C_out`
    /// with one `C_in`-row block per tap. Equals gathering the windows,
    /// flattening each to one row and multiplying by `w`, but skips absent
    /// taps.
    pub fn indexed_conv(&mut self, x: Var, w: Var, index: &[i64], taps: usize) -> Result<Var> {
        let (n, cin) = self.shape(x);
        let (wr, cout) = self.shape(w);
        if taps == 0 || !index.len().is_multiple_of(taps) {
            return Err(AutogradError::Invalid {
                op: "indexed_conv",
                msg: format!("{} indices do not form windows of {taps}", index.len()),
            });
        }
        if wr != taps * cin {
            return Err(AutogradError::ShapeMismatch {
                op: "indexed_conv",
                left: (n, taps * cin),
                right: (wr, cout),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i < -1 || i >= n as i64) {
            return Err(AutogradError::IndexOutOfRange {
                op: "indexed_conv",
                index: bad,
                rows: n,
            });
        }
        let rows = index.len() / taps;
        let vx = self.value(x);
        let vw = self.value(w);
        let mut out = Tensor::zeros(rows, cout);
        let (mut xg, mut yg) = (Vec::new(), Vec::new());
        for (tap, (dst, src)) in tap_pairs(index, taps).iter().enumerate() {
            if dst.is_empty() {
                continue;
            }
            gather(vx.data(), cin, src, &mut xg);
            let y = scratch(&mut yg, dst.len() * cout);
            let block = &vw.data()[tap * cin * cout..(tap + 1) * cin * cout];
            gemm_nn_set(&xg, block, y, dst.len(), cin, cout);
            scatter_add(y, cout, dst, out.data_mut());
        }
        let rg = self.needs(&[x, w]);
        Ok(self.push(
            out,
            Op::IndexedConv {
                x,
                w,
                index: index.to_vec(),
                taps,
            },
            rg,
        ))
    }

    /// Assembles rows of `x` by index; `-1` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, index: &[i64]) -> Result<Var> {
        let vx = self.value(x);
        let (n, c) = vx.shape();
        let mut out = Tensor::zeros(index.len(), c);
        for (r, &i) in index.iter().enumerate() {
            if i < -1 || i >= n as i64 {
                return Err(AutogradError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    rows: n,
                });
            }
            if i >= 0 {
                out.row_mut(r).copy_from_slice(vx.row(i as usize));
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(AutogradError::Invalid {
                op: "concat_cols",
                msg: "no inputs".into(),
            });
        };
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(AutogradError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(first),
                    right: self.shape(p),
                });
            }
            cols += self.shape(p).1;
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (n, c) = vx.shape();
        if start + len > c || len == 0 {
            return Err(AutogradError::Invalid {
                op: "slice_cols",
                msg: format!("columns {start}..{} of {c}", start + len),
            });
        }
        let out = Tensor::from_fn(n, len, |r, j| vx.get(r, start + j));
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Reinterpret the row-major buffer with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.len() != rows * cols {
            return Err(AutogradError::ShapeMismatch {
                op: "reshape",
                left: vx.shape(),
                right: (rows, cols),
            });
        }
        let out = Tensor::from_vec(rows, cols, vx.data().to_vec())?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        let rg = self.needs(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        let rg = self.needs(&[a]);
        self.push(out, Op::Neg(a), rg)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() / x);
        let rg = self.needs(&[a]);
        self.push(out, Op::Recip(a), rg)
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    /// Column sums, as a `1 x C` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Tensor::zeros(1, va.cols());
        for r in 0..va.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(va.row(r)) {
                *o += v;
            }
        }
        let rg = self.needs(&[a]);
        self.push(out, Op::SumRows(a), rg)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.zip_with("mse", a, b, |x, y| x - y)?;
        let n = T::of(d.len() as f64);
        let out = Tensor::scalar(d.norm_squared() / n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mse(a, b), rg))
    }

    /// Sum of squared entries (squared Frobenius norm).
    pub fn squared_norm(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).norm_squared());
        let rg = self.needs(&[a]);
        self.push(out, Op::SquaredNorm(a), rg)
    }

    /// Zero the rows whose mask entry is false.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let vx = self.value(x);
        if mask.len() != vx.rows() {
            return Err(AutogradError::ShapeMismatch {
                op: "mask_rows",
                left: vx.shape(),
                right: (mask.len(), 1),
            });
        }
        let mut out = vx.clone();
        for (r, &keep) in mask.iter().enumerate() {
            if !keep {
                out.row_mut(r).fill(T::zero());
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            out,
            Op::MaskRows {
                x,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Differentiable SVD of a 3x3 tensor: returns `(u, s, v)` with `s` a
    /// `3 x 1` column of descending singular values.
    pub fn svd3(&mut self, x: Var) -> Result<(Var, Var, Var)> {
        let vx = self.value(x);
        if vx.shape() != (3, 3) {
            return Err(AutogradError::ShapeMismatch {
                op: "svd3",
                left: vx.shape(),
                right: (3, 3),
            });
        }
        if !vx.is_finite() {
            return Err(AutogradError::NonFinite("svd3"));
        }
        let m = Matrix3::from_fn(|r, c| vx.get(r, c).as_f64());
        let dec = svd3(&m);
        let packed = Tensor::from_fn(3, 7, |r, c| {
            T::of(match c {
                0..=2 => dec.u[(r, c)],
                3 => dec.s[r],
                _ => dec.v[(r, c - 4)],
            })
        });
        let rg = self.needs(&[x]);
        let whole = self.push(
            packed,
            Op::Svd3 {
                x,
                dec: Box::new(dec),
            },
            rg,
        );
        let u = self.slice_cols(whole, 0, 3)?;
        let s = self.slice_cols(whole, 3, 1)?;
        let v = self.slice_cols(whole, 4, 3)?;
        Ok((u, s, v))
    }

    // ----- reverse pass ---------------------------------------------------

    /// Populate gradients of the `1 x 1` tensor `loss` with respect to every
    /// node that requires them. Rejects a second call until
    /// [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(AutogradError::BackwardAlreadyRun);
        }
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(AutogradError::NonScalarLoss(r, c));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                propagate(&self.nodes, i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }
}

fn slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
    v: Var,
) -> Option<&'a mut Tensor<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let (r, c) = node.value.shape();
    Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c)))
}

/// Per tap, the output rows using it and the matching source rows.
fn tap_pairs(index: &[i64], taps: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut pairs = vec![(Vec::new(), Vec::new()); taps];
    for (r, window) in index.chunks(taps).enumerate() {
        for (tap, &src) in window.iter().enumerate() {
            if src >= 0 {
                pairs[tap].0.push(r);
                pairs[tap].1.push(src as usize);
            }
        }
    }
    pairs
}

fn propagate<T: Scalar>(nodes: &[Node<T>], i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let out = &nodes[i].value;
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (n, k) = val(*a).shape();
            let m = val(*b).cols();
            if let Some(ga) = slot(nodes, grads, *a) {
                gemm_nt(g.data(), val(*b).data(), ga.data_mut(), n, m, k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gemm_tn(val(*a).data(), g.data(), gb.data_mut(), n, k, m);
            }
        }
        Op::Transpose(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.add_assign(&g.transpose());
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.add_assign(g);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.add_assign(g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.add_assign(g);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (d, &s) in gb.data_mut().iter_mut().zip(g.data()) {
                    *d -= s;
                }
            }
        }
        Op::Hadamard(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, &s), &o) in ga.data_mut().iter_mut().zip(g.data()).zip(val(*b).data()) {
                    *d += s * o;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((d, &s), &o) in gb.data_mut().iter_mut().zip(g.data()).zip(val(*a).data()) {
                    *d += s * o;
                }
            }
        }
        Op::AddRow(a, row) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.add_assign(g);
            }
            if let Some(gr) = slot(nodes, grads, *row) {
                for r in 0..g.rows() {
                    for (d, &s) in gr.data_mut().iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
            }
        }
        Op::ScaleRows(a, w) => {
            let wa = val(*w).data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for r in 0..g.rows() {
                    let k = wa[r];
                    for (d, &s) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                        *d += s * k;
                    }
                }
            }
            if let Some(gw) = slot(nodes, grads, *w) {
                let va = val(*a);
                for r in 0..g.rows() {
                    let dot: T = g.row(r).iter().zip(va.row(r)).map(|(&x, &y)| x * y).sum();
                    gw.data_mut()[r] += dot;
                }
            }
        }
        Op::MulScalar(a, s) => {
            let k = val(*s).item();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (d, &x) in ga.data_mut().iter_mut().zip(g.data()) {
                    *d += x * k;
                }
            }
            if let Some(gs) = slot(nodes, grads, *s) {
                let dot: T = g.data().iter().zip(val(*a).data()).map(|(&x, &y)| x * y).sum();
                gs.data_mut()[0] += dot;
            }
        }
        Op::Scale(a, k) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (d, &x) in ga.data_mut().iter_mut().zip(g.data()) {
                    *d += x * *k;
                }
            }
        }
        Op::Relu(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, &x), &o) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    if o > T::zero() {
                        *d += x;
                    }
                }
            }
        }
        Op::SoftmaxRows(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for r in 0..g.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: T = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((d, &p), &q) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *d += p * (q - dot);
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            with_stats,
        } => {
            let (n, c) = g.shape();
            let gam = val(*gamma).data();
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for i in 0..n {
                    for j in 0..c {
                        gg.data_mut()[j] += g.data()[i * c + j] * xhat[i * c + j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for i in 0..n {
                    for j in 0..c {
                        gb.data_mut()[j] += g.data()[i * c + j];
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                if *with_stats {
                    let nf = T::of(n as f64);
                    for j in 0..c {
                        let mut sum_g = T::zero();
                        let mut sum_gx = T::zero();
                        for i in 0..n {
                            let gh = g.data()[i * c + j] * gam[j];
                            sum_g += gh;
                            sum_gx += gh * xhat[i * c + j];
                        }
                        for i in 0..n {
                            let gh = g.data()[i * c + j] * gam[j];
                            gx.data_mut()[i * c + j] +=
                                inv_std[j] / nf * (nf * gh - sum_g - xhat[i * c + j] * sum_gx);
                        }
                    }
                } else {
                    for i in 0..n {
                        for j in 0..c {
                            gx.data_mut()[i * c + j] += g.data()[i * c + j] * gam[j];
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (n, c) = g.shape();
            let gam = val(*gamma).data();
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for i in 0..n {
                    for j in 0..c {
                        gg.data_mut()[j] += g.data()[i * c + j] * xhat[i * c + j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for i in 0..n {
                    for j in 0..c {
                        gb.data_mut()[j] += g.data()[i * c + j];
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let cf = T::of(c as f64);
                for i in 0..n {
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for j in 0..c {
                        let gh = g.data()[i * c + j] * gam[j];
                        sum_g += gh;
                        sum_gx += gh * xhat[i * c + j];
                    }
                    for j in 0..c {
                        let gh = g.data()[i * c + j] * gam[j];
                        gx.data_mut()[i * c + j] +=
                            inv_std[i] / cf * (cf * gh - sum_g - xhat[i * c + j] * sum_gx);
                    }
                }
            }
        }
        Op::MaxPoolGrouped { x, argmax } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let c = g.cols();
                for (k, &src) in argmax.iter().enumerate() {
                    if src >= 0 {
                        gx.data_mut()[src as usize * c + k % c] += g.data()[k];
                    }
                }
            }
        }
        Op::GatherRows { x, index } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, &src) in index.iter().enumerate() {
                    if src >= 0 {
                        for (d, &s) in gx.row_mut(src as usize).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
        }
        Op::IndexedConv { x, w, index, taps } => {
            let (cin, cout) = (val(*x).cols(), g.cols());
            let span = cin * cout;
            let pairs = tap_pairs(index, *taps);
            let (mut a, mut b) = (Vec::new(), Vec::new());
            if let Some(gx) = slot(nodes, grads, *x) {
                let vw = val(*w);
                for (tap, (dst, src)) in pairs.iter().enumerate() {
                    if dst.is_empty() {
                        continue;
                    }
                    gather(g.data(), cout, dst, &mut a);
                    let y = scratch(&mut b, src.len() * cin);
                    gemm_nt_set(&a, &vw.data()[tap * span..(tap + 1) * span], y, dst.len(), cout, cin);
                    scatter_add(y, cin, src, gx.data_mut());
                }
            }
            if let Some(gw) = slot(nodes, grads, *w) {
                let vx = val(*x);
                for (tap, (dst, src)) in pairs.iter().enumerate() {
                    if dst.is_empty() {
                        continue;
                    }
                    gather(vx.data(), cin, src, &mut a);
                    gather(g.data(), cout, dst, &mut b);
                    let block = &mut gw.data_mut()[tap * span..(tap + 1) * span];
                    gemm_tn(&a, &b, block, dst.len(), cin, cout);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let width = val(p).cols();
                if let Some(gp) = slot(nodes, grads, p) {
                    for r in 0..g.rows() {
                        for (d, &s) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + width]) {
                            *d += s;
                        }
                    }
                }
                offset += width;
            }
        }
        Op::SliceCols { x, start } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let w = g.cols();
                for r in 0..g.rows() {
                    for (d, &s) in gx.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (d, &s) in gx.data_mut().iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
        Op::Exp(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, &s), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *d += s * y;
                }
            }
        }
        Op::Neg(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (d, &s) in ga.data_mut().iter_mut().zip(g.data()) {
                    *d -= s;
                }
            }
        }
        Op::Recip(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, &s), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *d -= s * y * y;
                }
            }
        }
        Op::Sum(a) => {
            let s = g.item();
            if let Some(ga) = slot(nodes, grads, *a) {
                for d in ga.data_mut() {
                    *d += s;
                }
            }
        }
        Op::SumRows(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for r in 0..ga.rows() {
                    for (d, &s) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
        }
        Op::Mse(a, b) => {
            let n = T::of(val(*a).len() as f64);
            let k = T::of(2.0) * g.item() / n;
            let (va, vb) = (val(*a).data(), val(*b).data());
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, &x), &y) in ga.data_mut().iter_mut().zip(va).zip(vb) {
                    *d += k * (x - y);
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((d, &x), &y) in gb.data_mut().iter_mut().zip(va).zip(vb) {
                    *d -= k * (x - y);
                }
            }
        }
        Op::SquaredNorm(a) => {
            let k = T::of(2.0) * g.item();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (d, &x) in ga.data_mut().iter_mut().zip(val(*a).data()) {
                    *d += k * x;
                }
            }
        }
        Op::MaskRows { x, mask } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, &keep) in mask.iter().enumerate() {
                    if keep {
                        for (d, &s) in gx.row_mut(r).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
        }
        Op::Svd3 { x, dec } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let gu = Matrix3::from_fn(|r, c| g.get(r, c).as_f64());
                let gs = [g.get(0, 3).as_f64(), g.get(1, 3).as_f64(), g.get(2, 3).as_f64()];
                let gv = Matrix3::from_fn(|r, c| g.get(r, c + 4).as_f64());
                let ga = svd3_backward(dec, &gu, &gs, &gv);
                for r in 0..3 {
                    for c in 0..3 {
                        gx.data_mut()[r * 3 + c] += T::of(ga[(r, c)]);
                    }
                }
            }
        }
    }
}
