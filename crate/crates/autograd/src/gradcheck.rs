//! Central finite-difference checks of the reverse-mode rules.
//!
//! The numeric side only ever evaluates the forward pass, so it is an
//! independent oracle for every backward rule on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::{Tape, Tensor, Var};

/// Finite-difference step used throughout the float64 checks.
pub const FD_STEP: f64 = 1e-6;
/// Tolerance for ordinary operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the SVD operation.
pub const SVD_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest relative error over all inputs.
    pub max_rel_error: f64,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-6)` per input.
    pub per_input: Vec<f64>,
}

/// Relative error of two gradient buffers in the 2-norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-6)
}

/// Compare the tape gradient of `f` against central differences with step
/// `step` for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut numeric = vec![0.0; inputs[k].len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[k].data()[e];
            work[k].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[e] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        per_input.push(relative_error(&analytic[k], &numeric));
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_error,
        per_input,
    })
}

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Entries bounded away from zero so kinks (relu, max) sit far from the step.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Random weights so the reduced loss exercises every output entry.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.hadamard(out, w)?;
    Ok(tape.sum(p))
}

fn random_rotation(rng: &mut ChaCha8Rng) -> nalgebra::Matrix3<f64> {
    let axis = nalgebra::Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix()
}

/// Well-conditioned 3x3 matrix with singular-value gaps of at least 0.1.
pub fn well_conditioned_3x3(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let s3 = rng.random_range(0.5..1.0);
    let s2 = s3 + rng.random_range(0.1..1.0);
    let s1 = s2 + rng.random_range(0.1..1.0);
    let m = random_rotation(rng)
        * nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(s1, s2, s3))
        * random_rotation(rng).transpose();
    Tensor::from_fn(3, 3, |r, c| m[(r, c)])
}

/// Finite-difference check of every tape operation in isolation on random
/// small tensors drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut record = |name: &'static str, tol: f64, check: GradCheck| {
        out.push(OpCheck {
            name,
            max_rel_error: check.max_rel_error,
            tolerance: tol,
        });
    };

    let (a, b, w) = (uniform(&mut rng, 4, 3), uniform(&mut rng, 3, 5), uniform(&mut rng, 4, 5));
    record(
        "matmul",
        OP_TOLERANCE,
        check_gradients(&[a, b], FD_STEP, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, &w)
        })?,
    );

    let (a, w) = (uniform(&mut rng, 4, 3), uniform(&mut rng, 3, 4));
    record(
        "transpose",
        OP_TOLERANCE,
        check_gradients(&[a], FD_STEP, |t, v| {
            let y = t.transpose(v[0]);
            weighted_sum(t, y, &w)
        })?,
    );

    let (a, b, w) = (uniform(&mut rng, 3, 4), uniform(&mut rng, 3, 4), uniform(&mut rng, 3, 4));
    record(
        "add",
        OP_TOLERANCE,
        check_gradients(&[a.clone(), b.clone()], FD_STEP, |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, &w)
        })?,
    );
    record(
        "sub",
        OP_TOLERANCE,
        check_gradients(&[a.clone(), b.clone()], FD_STEP, |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, &w)
        })?,
    );
    record(
        "hadamard",
        OP_TOLERANCE,
        check_gradients(&[a.clone(), b], FD_STEP, |t, v| {
            let y = t.hadamard(v[0], v[1])?;
            weighted_sum(t, y, &w)
        })?,
    );

    let row = uniform(&mut rng, 1, 4);
    record(
        "add_row",
        OP_TOLERANCE,
        check_gradients(&[a.clone(), row], FD_STEP, |t, v| {
            let y = t.add_row(v[0], v[1])?;
            weighted_sum(t, y, &w)
        })?,
    );

    let col = uniform(&mut rng, 3, 1);
    record(
        "scale_rows",
        OP_TOLERANCE,
        check_gradients(&[a.clone(), col], FD_STEP, |t, v| {
            let y = t.scale_rows(v[0], v[1])?;
            weighted_sum(t, y, &w)
        })?,
    );

    let s = uniform(&mut rng, 1, 1);
    record(
        "mul_scalar",
        OP_TOLERANCE,
        check_gradients(&[a.clone(), s], FD_STEP, |t, v| {
            let y = t.mul_scalar(v[0], v[1])?;
            weighted_sum(t, y, &w)
        })?,
    );
    record(
        "scale",
        OP_TOLERANCE,
        check_gradients(std::slice::from_ref(&a), FD_STEP, |t, v| {
            let y = t.scale(v[0], -1.7);
            weighted_sum(t, y, &w)
        })?,
    );

    let r = away_from_zero(&mut rng, 3, 4);
    record(
        "relu",
        OP_TOLERANCE,
        check_gradients(&[r], FD_STEP, |t, v| {
            let y = t.relu(v[0]);
            weighted_sum(t, y, &w)
        })?,
    );

    let logits = uniform(&mut rng, 3, 4).map(|x| 3.0 * x);
    record(
        "softmax_rows",
        OP_TOLERANCE,
        check_gradients(std::slice::from_ref(&logits), FD_STEP, |t, v| {
            let y = t.softmax_rows(v[0], None)?;
            weighted_sum(t, y, &w)
        })?,
    );
    let mask = [true, false, true, true];
    record(
        "softmax_rows_masked",
        OP_TOLERANCE,
        check_gradients(&[logits], FD_STEP, |t, v| {
            let y = t.softmax_rows(v[0], Some(&mask))?;
            weighted_sum(t, y, &w)
        })?,
    );

    let (x, gamma, beta) = (uniform(&mut rng, 6, 3), uniform(&mut rng, 1, 3), uniform(&mut rng, 1, 3));
    let w6 = uniform(&mut rng, 6, 3);
    record(
        "batch_norm_1d",
        OP_TOLERANCE,
        check_gradients(&[x, gamma.clone(), beta.clone()], FD_STEP, |t, v| {
            let y = t.batch_norm_1d(v[0], v[1], v[2])?;
            weighted_sum(t, y, &w6)
        })?,
    );
    let x1 = uniform(&mut rng, 1, 3);
    let w1 = uniform(&mut rng, 1, 3);
    record(
        "batch_norm_1d_single_row",
        OP_TOLERANCE,
        check_gradients(&[x1, gamma.clone(), beta.clone()], FD_STEP, |t, v| {
            let y = t.batch_norm_1d(v[0], v[1], v[2])?;
            weighted_sum(t, y, &w1)
        })?,
    );
    let xl = uniform(&mut rng, 6, 3);
    record(
        "layer_norm_rows",
        OP_TOLERANCE,
        check_gradients(&[xl, gamma, beta], FD_STEP, |t, v| {
            let y = t.layer_norm_rows(v[0], v[1], v[2])?;
            weighted_sum(t, y, &w6)
        })?,
    );

    let pool_in = away_from_zero(&mut rng, 5, 3);
    let groups: Vec<i64> = vec![0, 1, -1, 2, 3, -1, -1, 4];
    let wp = uniform(&mut rng, 2, 3);
    record(
        "max_pool_grouped",
        OP_TOLERANCE,
        check_gradients(&[pool_in], FD_STEP, |t, v| {
            let y = t.max_pool_grouped(v[0], &groups, 4)?;
            weighted_sum(t, y, &wp)
        })?,
    );

    let g_in = uniform(&mut rng, 4, 3);
    let index = [2i64, -1, 0, 2, 3, -1];
    let wg = uniform(&mut rng, 6, 3);
    record(
        "gather_rows",
        OP_TOLERANCE,
        check_gradients(&[g_in], FD_STEP, |t, v| {
            let y = t.gather_rows(v[0], &index)?;
            weighted_sum(t, y, &wg)
        })?,
    );

    let conv_x = uniform(&mut rng, 4, 2);
    let conv_w = uniform(&mut rng, 6, 3);
    let windows = [0i64, -1, 3, 2, 2, -1, -1, -1, 1];
    let wic = uniform(&mut rng, 3, 3);
    record(
        "indexed_conv",
        OP_TOLERANCE,
        check_gradients(&[conv_x, conv_w], FD_STEP, |t, v| {
            let y = t.indexed_conv(v[0], v[1], &windows, 3)?;
            weighted_sum(t, y, &wic)
        })?,
    );

    let (c1, c2) = (uniform(&mut rng, 3, 2), uniform(&mut rng, 3, 3));
    let wc = uniform(&mut rng, 3, 5);
    record(
        "concat_cols",
        OP_TOLERANCE,
        check_gradients(&[c1, c2], FD_STEP, |t, v| {
            let y = t.concat_cols(&[v[0], v[1]])?;
            weighted_sum(t, y, &wc)
        })?,
    );

    let sl = uniform(&mut rng, 3, 5);
    let ws = uniform(&mut rng, 3, 2);
    record(
        "slice_cols",
        OP_TOLERANCE,
        check_gradients(&[sl], FD_STEP, |t, v| {
            let y = t.slice_cols(v[0], 2, 2)?;
            weighted_sum(t, y, &ws)
        })?,
    );

    let rs = uniform(&mut rng, 4, 3);
    let wr = uniform(&mut rng, 2, 6);
    record(
        "reshape",
        OP_TOLERANCE,
        check_gradients(&[rs], FD_STEP, |t, v| {
            let y = t.reshape(v[0], 2, 6)?;
            weighted_sum(t, y, &wr)
        })?,
    );

    record(
        "exp",
        OP_TOLERANCE,
        check_gradients(std::slice::from_ref(&a), FD_STEP, |t, v| {
            let y = t.exp(v[0]);
            weighted_sum(t, y, &w)
        })?,
    );
    record(
        "neg",
        OP_TOLERANCE,
        check_gradients(std::slice::from_ref(&a), FD_STEP, |t, v| {
            let y = t.neg(v[0]);
            weighted_sum(t, y, &w)
        })?,
    );
    let pos = uniform(&mut rng, 3, 4).map(|x| 1.5 + x);
    record(
        "recip",
        OP_TOLERANCE,
        check_gradients(&[pos], FD_STEP, |t, v| {
            let y = t.recip(v[0]);
            weighted_sum(t, y, &w)
        })?,
    );
    record(
        "sum",
        OP_TOLERANCE,
        check_gradients(std::slice::from_ref(&a), FD_STEP, |t, v| {
            let y = t.sum(v[0]);
            let e = t.exp(y);
            Ok(e)
        })?,
    );
    let wsr = uniform(&mut rng, 1, 4);
    record(
        "sum_rows",
        OP_TOLERANCE,
        check_gradients(std::slice::from_ref(&a), FD_STEP, |t, v| {
            let y = t.sum_rows(v[0]);
            weighted_sum(t, y, &wsr)
        })?,
    );
    let b2 = uniform(&mut rng, 3, 4);
    record(
        "mse",
        OP_TOLERANCE,
        check_gradients(&[a.clone(), b2], FD_STEP, |t, v| t.mse(v[0], v[1]))?,
    );
    record(
        "squared_norm",
        OP_TOLERANCE,
        check_gradients(std::slice::from_ref(&a), FD_STEP, |t, v| Ok(t.squared_norm(v[0])))?,
    );
    let keep = [true, false, true];
    record(
        "mask_rows",
        OP_TOLERANCE,
        check_gradients(&[a], FD_STEP, |t, v| {
            let y = t.mask_rows(v[0], &keep)?;
            weighted_sum(t, y, &w)
        })?,
    );

    let m = well_conditioned_3x3(&mut rng);
    let (wu, wsv, wv, wuv) = (
        uniform(&mut rng, 3, 3),
        uniform(&mut rng, 3, 1),
        uniform(&mut rng, 3, 3),
        uniform(&mut rng, 3, 3),
    );
    record(
        "svd3",
        SVD_TOLERANCE,
        check_gradients(&[m], FD_STEP, |t, v| {
            let (u, s, vv) = t.svd3(v[0])?;
            // Sign-invariant smooth functions of (u, s, v).
            let uu = t.hadamard(u, u)?;
            let vv2 = t.hadamard(vv, vv)?;
            let vt = t.transpose(vv);
            let uvt = t.matmul(u, vt)?;
            let l1 = weighted_sum(t, uu, &wu)?;
            let l2 = weighted_sum(t, s, &wsv)?;
            let l3 = weighted_sum(t, vv2, &wv)?;
            let l4 = weighted_sum(t, uvt, &wuv)?;
            let l12 = t.add(l1, l2)?;
            let l34 = t.add(l3, l4)?;
            t.add(l12, l34)
        })?,
    );

    Ok(out)
}
