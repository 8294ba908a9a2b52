//! Attention residuals, the soft correspondence score and the
//! differentiable weighted Procrustes head.

use bhreg_autograd::{Scalar, Tape, Tensor, Var};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::error::{CoreError, Result};
use crate::nn::{glorot, linear, Bound, ParamStore};
use crate::rigid::RANK_TOLERANCE;
use crate::tree::VOXEL_CELLS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub feedforward_dim: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            model_dim: 512,
            heads: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            feedforward_dim: 1024,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(CoreError::Config(format!(
                "transformer: model_dim {} not divisible into {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.feedforward_dim == 0 {
            return Err(CoreError::Config("transformer: feedforward_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let (m, f) = (self.model_dim, self.feedforward_dim);
        for l in 0..self.encoder_layers {
            init_norm(store, m, &format!("tf.enc{l}.ln1"));
            init_attention(store, rng, m, &format!("tf.enc{l}.attn"));
            init_norm(store, m, &format!("tf.enc{l}.ln2"));
            init_feed_forward(store, rng, m, f, &format!("tf.enc{l}.ff"));
        }
        for l in 0..self.decoder_layers {
            init_norm(store, m, &format!("tf.dec{l}.ln1"));
            init_attention(store, rng, m, &format!("tf.dec{l}.self"));
            init_norm(store, m, &format!("tf.dec{l}.ln2"));
            init_norm(store, m, &format!("tf.dec{l}.ln_mem"));
            init_attention(store, rng, m, &format!("tf.dec{l}.cross"));
            init_norm(store, m, &format!("tf.dec{l}.ln3"));
            init_feed_forward(store, rng, m, f, &format!("tf.dec{l}.ff"));
        }
    }
}

/// Init gain of the projections that write into the residual stream; small
/// values keep the initial score matrix soft.
const RESIDUAL_GAIN: f64 = 0.1;

fn init_norm(store: &mut ParamStore, m: usize, name: &str) {
    store.insert(format!("{name}.g"), Tensor::filled(1, m, 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros(1, m));
}

fn init_attention(store: &mut ParamStore, rng: &mut impl Rng, m: usize, name: &str) {
    for w in ["wq", "wk", "wv"] {
        store.insert(format!("{name}.{w}"), glorot(rng, m, m, 1.0));
    }
    store.insert(format!("{name}.wo"), glorot(rng, m, m, RESIDUAL_GAIN));
}

fn init_feed_forward(store: &mut ParamStore, rng: &mut impl Rng, m: usize, f: usize, name: &str) {
    store.insert(format!("{name}.w1"), glorot(rng, m, f, 2f64.sqrt()));
    store.insert(format!("{name}.b1"), Tensor::zeros(1, f));
    store.insert(format!("{name}.w2"), glorot(rng, f, m, RESIDUAL_GAIN));
    store.insert(format!("{name}.b2"), Tensor::zeros(1, m));
}

fn layer_norm<T: Scalar>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let g = p.var(&format!("{name}.g"))?;
    let b = p.var(&format!("{name}.b"))?;
    Ok(tape.layer_norm_rows(x, g, b)?)
}

/// Multi-head scaled dot-product attention from `queries` onto `keys`;
/// keys whose `key_mask` entry is false get zero weight.
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    name: &str,
    heads: usize,
    queries: Var,
    keys: Var,
    key_mask: &[bool],
) -> Result<Var> {
    let q = tape.matmul(queries, p.var(&format!("{name}.wq"))?)?;
    let k = tape.matmul(keys, p.var(&format!("{name}.wk"))?)?;
    let v = tape.matmul(keys, p.var(&format!("{name}.wv"))?)?;
    let dim = tape.shape(q).1;
    let dh = dim / heads;
    let inv = T::of(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh);
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, inv);
        let a = tape.softmax_rows(logits, Some(key_mask))?;
        outs.push(tape.matmul(a, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok(tape.matmul(joined, p.var(&format!("{name}.wo"))?)?)
}

fn feed_forward<T: Scalar>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = linear(tape, x, p.var(&format!("{name}.w1"))?, Some(p.var(&format!("{name}.b1"))?))?;
    let h = tape.relu(h);
    linear(tape, h, p.var(&format!("{name}.w2"))?, Some(p.var(&format!("{name}.b2"))?))
}

fn residual<T: Scalar>(tape: &mut Tape<T>, x: Var, update: Var, mask: &[bool]) -> Result<Var> {
    let y = tape.add(x, update)?;
    Ok(tape.mask_rows(y, mask)?)
}

/// Residual to add to `a`'s embedding: a pre-norm self-attention encoder
/// over `a`, then decoder layers attending from `a` to `b`.
pub fn contextual_residual<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    config: &TransformerConfig,
    a: &FeatureMap,
    b: &FeatureMap,
) -> Result<Var> {
    let shape = tape.shape(a.features);
    if shape != tape.shape(b.features) || shape != (VOXEL_CELLS, config.model_dim) {
        return Err(CoreError::Config(format!(
            "feature maps {shape:?} and {:?} do not match model_dim {}",
            tape.shape(b.features),
            config.model_dim
        )));
    }
    let heads = config.heads;
    let mut h = a.features;
    for l in 0..config.encoder_layers {
        let n = layer_norm(tape, p, &format!("tf.enc{l}.ln1"), h)?;
        let u = attention(tape, p, &format!("tf.enc{l}.attn"), heads, n, n, &a.mask)?;
        h = residual(tape, h, u, &a.mask)?;
        let n = layer_norm(tape, p, &format!("tf.enc{l}.ln2"), h)?;
        let u = feed_forward(tape, p, &format!("tf.enc{l}.ff"), n)?;
        h = residual(tape, h, u, &a.mask)?;
    }
    for l in 0..config.decoder_layers {
        let n = layer_norm(tape, p, &format!("tf.dec{l}.ln1"), h)?;
        let u = attention(tape, p, &format!("tf.dec{l}.self"), heads, n, n, &a.mask)?;
        h = residual(tape, h, u, &a.mask)?;
        let n = layer_norm(tape, p, &format!("tf.dec{l}.ln2"), h)?;
        let mem = layer_norm(tape, p, &format!("tf.dec{l}.ln_mem"), b.features)?;
        let u = attention(tape, p, &format!("tf.dec{l}.cross"), heads, n, mem, &b.mask)?;
        h = residual(tape, h, u, &a.mask)?;
        let n = layer_norm(tape, p, &format!("tf.dec{l}.ln3"), h)?;
        let u = feed_forward(tape, p, &format!("tf.dec{l}.ff"), n)?;
        h = residual(tape, h, u, &a.mask)?;
    }
    Ok(tape.sub(h, a.features)?)
}

/// Row-stochastic `64 x 64` soft correspondences from augmented source
/// rows `f_y` to augmented target rows `f_x`.
pub fn score_from_embeddings<T: Scalar>(tape: &mut Tape<T>, f_y: Var, f_x: Var, mask_x: &[bool]) -> Result<Var> {
    let xt = tape.transpose(f_x);
    let logits = tape.matmul(f_y, xt)?;
    Ok(tape.softmax_rows(logits, Some(mask_x))?)
}

/// Score between a source map `y` and a target map `x`, each augmented by
/// its contextual residual against the other.
pub fn score<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    config: &TransformerConfig,
    y: &FeatureMap,
    x: &FeatureMap,
) -> Result<Var> {
    let phi_y = contextual_residual(tape, p, config, y, x)?;
    let phi_x = contextual_residual(tape, p, config, x, y)?;
    let fy = tape.add(y.features, phi_y)?;
    let fx = tape.add(x.features, phi_x)?;
    score_from_embeddings(tape, fy, fx, &x.mask)
}

/// Rotation (`3 x 3`) and translation (`3 x 1`) handles on the tape.
#[derive(Clone, Copy, Debug)]
pub struct TransformVars {
    pub rotation: Var,
    pub translation: Var,
}

impl TransformVars {
    pub fn value<T: Scalar>(&self, tape: &Tape<T>) -> crate::rigid::RigidTransform {
        let r = tape.value(self.rotation);
        let t = tape.value(self.translation);
        crate::rigid::RigidTransform::new(
            Matrix3::from_fn(|i, j| r.get(i, j).as_f64()),
            Vector3::from_fn(|i, _| t.get(i, 0).as_f64()),
        )
    }
}

/// Weighted Procrustes between source CoMs and their soft targets
/// `ŷ = S · com_x`, differentiable through `S`.
pub fn svd_head<T: Scalar>(
    tape: &mut Tape<T>,
    s: Var,
    com_y: &[Vector3<f64>],
    com_x: &[Vector3<f64>],
    mass_y: &[f64],
) -> Result<TransformVars> {
    let n = com_y.len();
    if com_x.len() != tape.shape(s).1 {
        return Err(CoreError::LengthMismatch(com_x.len(), tape.shape(s).1));
    }
    if mass_y.len() != n || tape.shape(s).0 != n {
        return Err(CoreError::LengthMismatch(mass_y.len(), n));
    }
    if let Some(&w) = mass_y.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(CoreError::InvalidWeight(w));
    }
    let positive = mass_y.iter().filter(|&&w| w > 0.0).count();
    if positive < 3 {
        return Err(CoreError::TooFewPairs(positive));
    }
    let wsum: f64 = mass_y.iter().sum();
    let ybar = com_y.iter().zip(mass_y).map(|(y, w)| *w * y).sum::<Vector3<f64>>() / wsum;

    let targets = tape.constant(Tensor::from_fn(com_x.len(), 3, |r, c| T::of(com_x[r][c])));
    let yhat = tape.matmul(s, targets)?;
    // H = Σ w (y − ȳ)(ŷ − ŷ̄)ᵀ; the ŷ̄ term vanishes because Σ w (y − ȳ) = 0.
    let lhs = tape.constant(Tensor::from_fn(3, n, |r, c| T::of(mass_y[c] * (com_y[c][r] - ybar[r]))));
    let h = tape.matmul(lhs, yhat)?;
    let wrow = tape.constant(Tensor::from_fn(1, n, |_, c| T::of(mass_y[c] / wsum)));
    let yhat_bar = tape.matmul(wrow, yhat)?;

    let vh = tape.value(yhat);
    let mean_hat = Vector3::from_fn(|i, _| tape.value(yhat_bar).get(0, i).as_f64());
    let (mut spread_y, mut spread_x) = (0.0, 0.0);
    for (l, w) in mass_y.iter().enumerate() {
        spread_y += w * (com_y[l] - ybar).norm_squared();
        let d = Vector3::from_fn(|i, _| vh.get(l, i).as_f64()) - mean_hat;
        spread_x += w * d.norm_squared();
    }
    let scale = (spread_y * spread_x).sqrt();

    let (u, sv, v) = tape.svd3(h)?;
    let singular = [0, 1, 2].map(|i| tape.value(sv).get(i, 0).as_f64());
    if !(scale > 0.0) || singular[1] <= RANK_TOLERANCE * scale {
        return Err(CoreError::RankDeficient(singular));
    }
    let to_m = |t: &Tensor<T>| Matrix3::from_fn(|i, j| t.get(i, j).as_f64());
    let det = (to_m(tape.value(v)) * to_m(tape.value(u)).transpose()).determinant().signum();
    let guard = tape.constant(Tensor::from_fn(3, 3, |i, j| {
        T::of(match (i, j) {
            (2, 2) => det,
            _ if i == j => 1.0,
            _ => 0.0,
        })
    }));
    let vd = tape.matmul(v, guard)?;
    let ut = tape.transpose(u);
    let rotation = tape.matmul(vd, ut)?;
    let ybar_col = tape.constant(Tensor::from_fn(3, 1, |i, _| T::of(ybar[i])));
    let ry = tape.matmul(rotation, ybar_col)?;
    let mean_col = tape.transpose(yhat_bar);
    let translation = tape.sub(mean_col, ry)?;
    Ok(TransformVars { rotation, translation })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        TransformerConfig::default().validate().unwrap();
        let bad = TransformerConfig {
            model_dim: 30,
            heads: 4,
            ..TransformerConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_target_cell_gives_indicator_rows() {
        let mut tape = Tape::<f64>::new();
        let fy = tape.constant(Tensor::from_fn(4, 2, |r, c| (r * 2 + c) as f64));
        let fx = tape.constant(Tensor::from_fn(4, 2, |r, c| (r + c) as f64 * 0.3));
        let s = score_from_embeddings(&mut tape, fy, fx, &[false, false, true, false]).unwrap();
        for r in 0..4 {
            assert_eq!(tape.value(s).row(r), &[0.0, 0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn identity_scores_give_identity() {
        let pts: Vec<Vector3<f64>> = (0..6)
            .map(|i| Vector3::new((i as f64).sin(), (2.0 * i as f64).cos(), 0.3 * i as f64))
            .collect();
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::identity(6));
        let out = svd_head(&mut tape, s, &pts, &pts, &[1.0 / 6.0; 6]).unwrap().value(&tape);
        assert!((out.rotation - Matrix3::identity()).amax() < 1e-13);
        assert!(out.translation.amax() < 1e-13);
    }

    #[test]
    fn uniform_scores_are_rank_deficient() {
        let pts: Vec<Vector3<f64>> = (0..5).map(|i| Vector3::new(i as f64, (i * i) as f64, 1.0 - i as f64)).collect();
        let mean = pts.iter().sum::<Vector3<f64>>() / 5.0;
        let centered: Vec<_> = pts.iter().map(|p| p - mean).collect();
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::filled(5, 5, 0.2));
        let r = svd_head(&mut tape, s, &pts, &centered, &[0.2; 5]);
        assert!(matches!(r, Err(CoreError::RankDeficient(_))));
    }
}
