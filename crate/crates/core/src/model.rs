//! The registration network: encoder, matcher and the multi-pass
//! refinement loop.

use bhreg_autograd::gradcheck::{check_gradients, GradCheck, FD_STEP};
use bhreg_autograd::{AutogradError, Scalar, Tape, Tensor, Var};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{make_pair, normalize, synth_shape, PerturbationSpec, PointCloud, PoseRange};
use crate::encoder::{encode, EncoderConfig};
use crate::error::{CoreError, Result};
use crate::matcher::{score, svd_head, TransformVars, TransformerConfig};
use crate::nn::{Bound, ParamStore};
use crate::rigid::RigidTransform;
use crate::tree::{BhTree, DEFAULT_DEPTH, MAX_DEPTH};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub tree_depth: usize,
    pub encoder: EncoderConfig,
    pub transformer: TransformerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tree_depth: DEFAULT_DEPTH,
            encoder: EncoderConfig::default(),
            transformer: TransformerConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Narrow widths that train in minutes on one core.
    pub fn desk() -> Self {
        Self {
            tree_depth: DEFAULT_DEPTH,
            encoder: EncoderConfig {
                channel_widths: vec![8, 16, 32],
                voxel_width: 32,
                output_cols: 32,
                lift_width: 8,
                ..EncoderConfig::default()
            },
            transformer: TransformerConfig {
                model_dim: 32,
                heads: 4,
                encoder_layers: 1,
                decoder_layers: 1,
                feedforward_dim: 64,
            },
        }
    }

    /// Smallest widths, for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            tree_depth: 5,
            encoder: EncoderConfig {
                channel_widths: vec![2, 2, 3],
                voxel_width: 3,
                output_cols: 4,
                lift_width: 2,
                ..EncoderConfig::default()
            },
            transformer: TransformerConfig {
                model_dim: 4,
                heads: 2,
                encoder_layers: 1,
                decoder_layers: 1,
                feedforward_dim: 4,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.transformer.validate()?;
        if self.tree_depth < self.encoder.finest_depth() || self.tree_depth > MAX_DEPTH {
            return Err(CoreError::Config(format!(
                "tree_depth {} must lie in {}..={MAX_DEPTH}",
                self.tree_depth,
                self.encoder.finest_depth()
            )));
        }
        if self.encoder.output_cols != self.transformer.model_dim {
            return Err(CoreError::Config(format!(
                "encoder output_cols {} differs from transformer model_dim {}",
                self.encoder.output_cols, self.transformer.model_dim
            )));
        }
        Ok(())
    }
}

/// Result of multi-pass registration in the original frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    /// Composition of all passes; maps the source onto the target.
    pub total: RigidTransform,
    /// Increment estimated by each pass.
    pub passes: Vec<RigidTransform>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        config.encoder.init_params(&mut params, &mut rng);
        config.transformer.init_params(&mut params, &mut rng);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(CoreError::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(CoreError::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(CoreError::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn build_tree(&self, cloud: &PointCloud) -> Result<BhTree> {
        BhTree::build(cloud, self.config.tree_depth)
    }

    /// Encode both trees, score and solve; the result maps the normalized
    /// source onto the normalized target.
    pub fn forward_once<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        tree_y: &BhTree,
        tree_x: &BhTree,
    ) -> Result<TransformVars> {
        let fy = encode(tape, params, &self.config.encoder, tree_y)?;
        let fx = encode(tape, params, &self.config.encoder, tree_x)?;
        let s = score(tape, params, &self.config.transformer, &fy, &fx)?;
        svd_head(tape, s, &fy.com, &fx.com, &fy.mass)
    }

    /// Frozen-parameter registration of two trees built in a shared
    /// normalized frame.
    pub fn register_once(&self, tree_y: &BhTree, tree_x: &BhTree) -> Result<RigidTransform> {
        if tree_y.max_depth() != tree_x.max_depth() {
            return Err(CoreError::DepthMismatch(tree_y.max_depth(), tree_x.max_depth()));
        }
        let mut tape = Tape::<f64>::new();
        let p = self.params.bind(&mut tape, false);
        Ok(self.forward_once(&mut tape, &p, tree_y, tree_x)?.value(&tape))
    }

    /// Runs `k0` passes on `tape`. Pass `k` normalizes the source moved by
    /// the estimate of the earlier passes together with the target, rebuilds
    /// both trees and registers them. Returns the accumulated transform
    /// after every pass, in the original frame; gradients do not flow
    /// between passes.
    pub fn forward_passes<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        source: &PointCloud,
        target: &PointCloud,
        k0: usize,
    ) -> Result<Vec<TransformVars>> {
        if k0 == 0 {
            return Err(CoreError::Config("k0 must be at least 1".into()));
        }
        let mut acc = RigidTransform::identity();
        let mut out = Vec::with_capacity(k0);
        for _ in 0..k0 {
            let moved = source.transformed(&acc);
            let (yn, xn, info) = normalize((&moved, target))?;
            let tree_y = self.build_tree(&yn)?;
            let tree_x = self.build_tree(&xn)?;
            let local = self.forward_once(tape, params, &tree_y, &tree_x)?;

            // t = s·t' + c − R c, then compose with the constant estimate so far.
            let col = |tape: &mut Tape<T>, v: &Vector3<f64>| tape.constant(Tensor::from_fn(3, 1, |i, _| T::of(v[i])));
            let scaled = tape.scale(local.translation, T::of(info.scale));
            let c = col(tape, &info.center);
            let rc = tape.matmul(local.rotation, c)?;
            let shifted = tape.add(scaled, c)?;
            let t_pass = tape.sub(shifted, rc)?;
            let r_acc = tape.constant(Tensor::from_fn(3, 3, |i, j| T::of(acc.rotation[(i, j)])));
            let t_acc = col(tape, &acc.translation);
            let rotation = tape.matmul(local.rotation, r_acc)?;
            let moved_t = tape.matmul(local.rotation, t_acc)?;
            let translation = tape.add(moved_t, t_pass)?;
            let total = TransformVars { rotation, translation };
            acc = total.value(tape);
            out.push(total);
        }
        Ok(out)
    }

    pub fn register_iterative(&self, source: &PointCloud, target: &PointCloud, k0: usize) -> Result<Refinement> {
        let mut tape = Tape::<f64>::new();
        let p = self.params.bind(&mut tape, false);
        let totals = self.forward_passes(&mut tape, &p, source, target, k0)?;
        let mut prev = RigidTransform::identity();
        let mut passes = Vec::with_capacity(k0);
        for tv in &totals {
            let total = tv.value(&tape);
            passes.push(total.compose(&prev.inverse()));
            prev = total;
        }
        Ok(Refinement { total: prev, passes })
    }
}
/// Finite-difference check of encode, score and solve with respect to
/// every parameter of a tiny network on a random synthetic pair. The loss
/// is a fixed random linear functional of `R` and `t`.
pub fn pipeline_gradcheck(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(ModelConfig::tiny(), rng.random())?;
    let shape = synth_shape(160, &mut rng)?;
    let pair = make_pair(&shape, &PerturbationSpec::clean(), &PoseRange::default(), rng.random())?;
    let (yn, xn, _) = normalize((&pair.source, &pair.target))?;
    let (ty, tx) = (model.build_tree(&yn)?, model.build_tree(&xn)?);
    let wr = Tensor::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
    let wt = Tensor::from_fn(3, 1, |_, _| rng.random_range(-1.0..1.0));
    let names = model.params.names();
    let check = check_gradients(&model.params.tensors(), FD_STEP, |tape, vars: &[Var]| {
        let p = Bound::from_vars(&names, vars);
        let out = model.forward_once(tape, &p, &ty, &tx).map_err(|e| match e {
            CoreError::Autograd(a) => a,
            other => AutogradError::Invalid {
                op: "forward_once",
                msg: other.to_string(),
            },
        })?;
        let (cr, ct) = (tape.constant(wr.clone()), tape.constant(wt.clone()));
        let a = tape.hadamard(out.rotation, cr)?;
        let b = tape.hadamard(out.translation, ct)?;
        let (a, b) = (tape.sum(a), tape.sum(b));
        tape.add(a, b)
    })?;
    Ok(check)
}

