//! Pose loss with learnable balancing, Adam, the training loop,
//! checkpoints and evaluation.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use bhreg_autograd::{Scalar, Tape, Tensor, Var};
use log::{info, warn};
use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{make_pair, reorient, synth_shapes, PerturbationKind, PerturbationSpec, PoseRange, TrainSample};
use crate::error::{CoreError, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{ParamStore, StoredTensor};
use crate::rigid::{angular_error, rmse, translation_error, RigidTransform};

pub const CHECKPOINT_FORMAT: &str = "bhreg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Learnable log-variance weights of the rotation and translation terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossState {
    pub sigma_r: f64,
    pub sigma_t: f64,
}

/// Scalar precision of the training tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Float64,
    Float32,
}

impl std::str::FromStr for Profile {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float64" | "f64" => Ok(Profile::Float64),
            "float32" | "f32" => Ok(Profile::Float32),
            _ => Err(CoreError::Config(format!("unknown profile {s}"))),
        }
    }
}

/// Weight of pass `k` (counted from zero) in the total loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassWeighting {
    /// `(1/2)^k`.
    #[default]
    FromZero,
    /// `(1/2)^(k+1)`.
    FromOne,
    /// `(1/2)^(k0−1−k)`, favoring the last pass.
    Reversed,
}

impl PassWeighting {
    pub fn weights(self, k0: usize) -> Vec<f64> {
        (0..k0)
            .map(|k| {
                let e = match self {
                    PassWeighting::FromZero => k,
                    PassWeighting::FromOne => k + 1,
                    PassWeighting::Reversed => k0 - 1 - k,
                };
                0.5f64.powi(e as i32)
            })
            .collect()
    }
}

fn constant_matrix<T: Scalar>(tape: &mut Tape<T>, m: &Matrix3<f64>) -> Var {
    tape.constant(Tensor::from_fn(3, 3, |i, j| T::of(m[(i, j)])))
}

/// `exp(−σ_R)·‖R_predᵀ R_gt − I‖² + σ_R + exp(−σ_t)·‖t_pred − t_gt‖² + σ_t`.
/// `sigma_r` and `sigma_t` are `1 x 1`.
pub fn loss_pass<T: Scalar>(
    tape: &mut Tape<T>,
    r_pred: Var,
    t_pred: Var,
    r_gt: &Matrix3<f64>,
    t_gt: &Vector3<f64>,
    sigma_r: Var,
    sigma_t: Var,
) -> Result<Var> {
    let rt = tape.transpose(r_pred);
    let gt = constant_matrix(tape, r_gt);
    let prod = tape.matmul(rt, gt)?;
    let eye = tape.constant(Tensor::identity(3));
    let dr = tape.sub(prod, eye)?;
    let l_r = tape.squared_norm(dr);
    let tg = tape.constant(Tensor::from_fn(3, 1, |i, _| T::of(t_gt[i])));
    let dt = tape.sub(t_pred, tg)?;
    let l_t = tape.squared_norm(dt);
    let term = |tape: &mut Tape<T>, l: Var, sigma: Var| -> Result<Var> {
        let ns = tape.neg(sigma);
        let w = tape.exp(ns);
        let weighted = tape.mul_scalar(l, w)?;
        Ok(tape.add(weighted, sigma)?)
    };
    let a = term(tape, l_r, sigma_r)?;
    let b = term(tape, l_t, sigma_t)?;
    Ok(tape.add(a, b)?)
}

/// Weighted sum of per-pass losses.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, per_pass: &[Var], weighting: PassWeighting) -> Result<Var> {
    if per_pass.is_empty() {
        return Err(CoreError::EmptyInput("total_loss"));
    }
    let weights = weighting.weights(per_pass.len());
    let mut acc = tape.scale(per_pass[0], T::of(weights[0]));
    for (&l, &w) in per_pass.iter().zip(&weights).skip(1) {
        let s = tape.scale(l, T::of(w));
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

/// Adam with bias correction. Parameters whose gradient is identically
/// zero are skipped, moments included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Advance the shared step counter; call once before the updates of
    /// one optimizer step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut [f64], grad: &[f64]) {
        if grad.iter().all(|&g| g == 0.0) {
            return;
        }
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; param.len()]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; param.len()]);
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..param.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            param[i] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Gradients of one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: BTreeMap<String, Tensor<f64>>,
    pub sigma_r: f64,
    pub sigma_t: f64,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        let p: f64 = self.params.values().map(|t| t.norm_squared()).sum();
        (p + self.sigma_r * self.sigma_r + self.sigma_t * self.sigma_t).sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.params.values_mut() {
            t.scale_in_place(k);
        }
        self.sigma_r *= k;
        self.sigma_t *= k;
    }

    fn accumulate(&mut self, other: &Gradients) {
        for (k, t) in &other.params {
            match self.params.get_mut(k) {
                Some(acc) => acc.add_assign(t),
                None => {
                    self.params.insert(k.clone(), t.clone());
                }
            }
        }
        self.sigma_r += other.sigma_r;
        self.sigma_t += other.sigma_t;
    }

    /// Rescale so the global 2-norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm {
            self.scale(max_norm / n);
        }
        n
    }
}

/// Loss of one sample over `k0` passes and its gradients.
pub fn sample_gradients<T: Scalar>(
    model: &Model,
    loss: &LossState,
    sample: &TrainSample,
    k0: usize,
    weighting: PassWeighting,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::<T>::new();
    let bound = model.params.bind(&mut tape, true);
    let sr = tape.param(Tensor::scalar(T::of(loss.sigma_r)));
    let st = tape.param(Tensor::scalar(T::of(loss.sigma_t)));
    let totals = model.forward_passes(&mut tape, &bound, &sample.source, &sample.target, k0)?;
    let mut per_pass = Vec::with_capacity(k0);
    for tv in totals {
        per_pass.push(loss_pass(
            &mut tape,
            tv.rotation,
            tv.translation,
            &sample.gt.rotation,
            &sample.gt.translation,
            sr,
            st,
        )?);
    }
    let total = total_loss(&mut tape, &per_pass, weighting)?;
    let value = tape.value(total).item().as_f64();
    tape.backward(total)?;
    let grad_of = |v: Var| tape.grad(v).map_or(0.0, |g| g.item().as_f64());
    Ok((
        value,
        Gradients {
            params: bound.grads(&tape),
            sigma_r: grad_of(sr),
            sigma_t: grad_of(st),
        },
    ))
}

/// Synthetic pair set options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_shapes: usize,
    pub val_shapes: usize,
    pub max_angle_deg: f64,
    pub max_translation: f64,
    /// Fraction of points replaced in the noisy half of the pairs.
    pub noise_level: f64,
    /// Draw fresh poses and noise for the training pairs every epoch.
    pub resample_pairs: bool,
    /// Give every training shape a random orientation when pairs are redrawn.
    pub reorient: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_shapes: 256,
            val_shapes: 64,
            max_angle_deg: 30.0,
            max_translation: 0.3,
            noise_level: 0.05,
            resample_pairs: true,
            reorient: true,
        }
    }
}

impl DataConfig {
    pub fn pose_range(&self) -> PoseRange {
        PoseRange {
            max_angle_deg: self.max_angle_deg,
            max_translation: self.max_translation,
        }
    }

    /// Even indices clean, odd indices with Gaussian noise.
    pub fn spec_for(&self, index: usize) -> PerturbationSpec {
        if index.is_multiple_of(2) {
            PerturbationSpec::clean()
        } else {
            PerturbationSpec::new(PerturbationKind::GaussianNoise, self.noise_level)
        }
    }

    pub fn pairs(&self, shapes: &[crate::cloud::PointCloud], seed: u64) -> Result<Vec<TrainSample>> {
        let pose = self.pose_range();
        shapes
            .iter()
            .enumerate()
            .map(|(i, s)| make_pair(s, &self.spec_for(i), &pose, mix_seed(seed, i as u64)))
            .collect()
    }

    /// Fresh training pairs for one epoch.
    pub fn epoch_pairs(&self, shapes: &[crate::cloud::PointCloud], seed: u64) -> Result<Vec<TrainSample>> {
        if !self.reorient {
            return self.pairs(shapes, seed);
        }
        let turned = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| reorient(s, &mut ChaCha8Rng::seed_from_u64(mix_seed(seed ^ 0x5EED, i as u64))))
            .collect::<Result<Vec<_>>>()?;
        self.pairs(&turned, seed)
    }

    /// Training shapes, training pairs and validation pairs.
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        let train_shapes = synth_shapes(self.train_shapes, mix_seed(seed, 1))?;
        let val_shapes = synth_shapes(self.val_shapes, mix_seed(seed, 2))?;
        Ok(Dataset {
            train: self.pairs(&train_shapes, mix_seed(seed, 3))?,
            val: self.pairs(&val_shapes, mix_seed(seed, 4))?,
            train_shapes,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train_shapes: Vec<crate::cloud::PointCloud>,
    pub train: Vec<TrainSample>,
    pub val: Vec<TrainSample>,
}

/// SplitMix-style seed derivation.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch: usize,
    pub k0: usize,
    pub seed: u64,
    pub profile: Profile,
    pub clip_norm: f64,
    pub pass_weighting: PassWeighting,
    /// Wall-clock limit for the epoch loop; training stops early when one more
    /// epoch as long as the last would overrun it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_seconds: Option<f64>,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 50,
            batch: 4,
            k0: 3,
            seed: 0,
            profile: Profile::Float64,
            clip_norm: 5.0,
            pass_weighting: PassWeighting::FromZero,
            max_seconds: None,
            model: ModelConfig::desk(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if self.k0 == 0 {
            return bad("k0 must be at least 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.max_seconds.is_some_and(|m| !(m > 0.0)) {
            return bad("max_seconds must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub format_version: u32,
    pub model: ModelConfig,
    pub params: BTreeMap<String, StoredTensor>,
    pub loss_state: LossState,
    pub optimizer: Adam,
    /// Epochs completed.
    pub epoch: usize,
    /// Every random draw of epoch `e` derives from `(seed, e)`.
    pub seed: u64,
    pub val_phi_rmse: Option<f64>,
    pub val_dt_rmse: Option<f64>,
}

impl Checkpoint {
    pub fn new(model: &Model, loss_state: LossState, optimizer: Adam, epoch: usize, seed: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            format_version: CHECKPOINT_VERSION,
            model: model.config.clone(),
            params: model.params.to_stored(),
            loss_state,
            optimizer,
            epoch,
            seed,
            val_phi_rmse: None,
            val_dt_rmse: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(CoreError::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(CoreError::Checkpoint(format!("unsupported version {}", ck.format_version)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.model.clone(), ParamStore::from_stored(&self.params)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub index: usize,
    pub phi_deg: f64,
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub phi_rmse: f64,
    pub dt_rmse: f64,
    pub phi_mean: f64,
    pub dt_mean: f64,
    /// Samples where the network failed and the identity was used.
    pub failures: usize,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,phi_deg,dt\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.index, r.phi_deg, r.dt));
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "samples={} phi_rmse={:.4} dt_rmse={:.5} phi_mean={:.4} dt_mean={:.5} failures={}",
            self.rows.len(),
            self.phi_rmse,
            self.dt_rmse,
            self.phi_mean,
            self.dt_mean,
            self.failures
        )
    }

    /// Single figure used to pick the best checkpoint: rotation RMSE in
    /// radians plus translation RMSE.
    pub fn selection_score(&self) -> f64 {
        self.phi_rmse.to_radians() + self.dt_rmse
    }
}

/// Metrics of given predictions against the ground truth of `samples`.
pub fn evaluate_transforms(samples: &[TrainSample], predictions: &[RigidTransform]) -> Result<EvalReport> {
    if samples.len() != predictions.len() {
        return Err(CoreError::LengthMismatch(samples.len(), predictions.len()));
    }
    if samples.is_empty() {
        return Err(CoreError::EmptyInput("evaluate"));
    }
    let rows: Vec<EvalRow> = samples
        .iter()
        .zip(predictions)
        .enumerate()
        .map(|(index, (s, p))| EvalRow {
            index,
            phi_deg: angular_error(&s.gt.rotation, &p.rotation),
            dt: translation_error(&s.gt.translation, &p.translation),
        })
        .collect();
    let phi: Vec<f64> = rows.iter().map(|r| r.phi_deg).collect();
    let dt: Vec<f64> = rows.iter().map(|r| r.dt).collect();
    let n = rows.len() as f64;
    Ok(EvalReport {
        phi_rmse: rmse(&phi)?,
        dt_rmse: rmse(&dt)?,
        phi_mean: phi.iter().sum::<f64>() / n,
        dt_mean: dt.iter().sum::<f64>() / n,
        rows,
        failures: 0,
    })
}

/// Run the network with `passes` refinement passes over every sample.
pub fn evaluate(model: &Model, samples: &[TrainSample], passes: usize) -> Result<EvalReport> {
    let outcomes: Vec<Result<RigidTransform>> = samples
        .par_iter()
        .map(|s| model.register_iterative(&s.source, &s.target, passes).map(|r| r.total))
        .collect();
    let mut failures = 0;
    let mut preds = Vec::with_capacity(samples.len());
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(t) => preds.push(t),
            Err(e @ (CoreError::RankDeficient(_) | CoreError::TooFewPairs(_))) => {
                warn!("sample {i}: {e}; scoring the identity");
                failures += 1;
                preds.push(RigidTransform::identity());
            }
            Err(e) => return Err(e),
        }
    }
    let mut report = evaluate_transforms(samples, &preds)?;
    report.failures = failures;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_phi_rmse: f64,
    pub val_dt_rmse: f64,
    pub skipped: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation score.
    pub best: Checkpoint,
    /// State after the last epoch.
    pub last: Checkpoint,
    pub history: Vec<EpochLog>,
    /// Mean training loss before any update.
    pub initial_loss: f64,
}

fn batch_gradients(
    profile: Profile,
    model: &Model,
    loss: &LossState,
    batch: &[&TrainSample],
    k0: usize,
    weighting: PassWeighting,
) -> Vec<Result<(f64, Gradients)>> {
    batch
        .par_iter()
        .map(|s| match profile {
            Profile::Float64 => sample_gradients::<f64>(model, loss, s, k0, weighting),
            Profile::Float32 => sample_gradients::<f32>(model, loss, s, k0, weighting),
        })
        .collect()
}

/// Mean loss over `samples` without updating anything.
pub fn mean_loss(config: &TrainConfig, model: &Model, loss: &LossState, samples: &[TrainSample]) -> Result<f64> {
    let refs: Vec<&TrainSample> = samples.iter().collect();
    let mut total = 0.0;
    let mut n = 0usize;
    for r in batch_gradients(config.profile, model, loss, &refs, config.k0, config.pass_weighting) {
        match r {
            Ok((l, _)) => {
                total += l;
                n += 1;
            }
            Err(CoreError::RankDeficient(_) | CoreError::TooFewPairs(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(total / n.max(1) as f64)
}

/// Train from a fresh initialization. `shapes` feed per-epoch pair
/// resampling when enabled; otherwise the fixed `train` pairs are used.
pub fn train(
    config: &TrainConfig,
    shapes: &[crate::cloud::PointCloud],
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    epochs: usize,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(CoreError::EmptyInput("train"));
    }
    let mut model = Model::new(config.model.clone(), mix_seed(config.seed, 0))?;
    let mut loss = LossState::default();
    let mut adam = Adam::new(config.learning_rate);
    info!(
        "training {} parameters on {} pairs, {} validation pairs",
        model.params.size(),
        train_set.len(),
        val_set.len()
    );
    let initial_loss = mean_loss(config, &model, &loss, train_set)?;
    info!("epoch 0 loss {initial_loss:.6}");

    let mut history = Vec::with_capacity(epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    let run_started = Instant::now();
    let mut completed = 0;
    for epoch in 1..=epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 1000 + epoch as u64));
        let resampled;
        let pairs: &[TrainSample] = if config.data.resample_pairs && !shapes.is_empty() && epoch > 1 {
            resampled = config.data.epoch_pairs(shapes, mix_seed(config.seed, 2000 + epoch as u64))?;
            &resampled
        } else {
            train_set
        };
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);

        let (mut loss_sum, mut seen, mut skipped) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(config.batch) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &pairs[i]).collect();
            let results = batch_gradients(config.profile, &model, &loss, &batch, config.k0, config.pass_weighting);
            let mut acc: Option<Gradients> = None;
            let mut used = 0usize;
            for r in results {
                match r {
                    Ok((l, g)) => {
                        if !l.is_finite() {
                            return Err(CoreError::Diverged { epoch });
                        }
                        loss_sum += l;
                        seen += 1;
                        used += 1;
                        match acc.as_mut() {
                            Some(a) => a.accumulate(&g),
                            None => acc = Some(g),
                        }
                    }
                    Err(CoreError::RankDeficient(_) | CoreError::TooFewPairs(_)) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            let Some(mut grads) = acc else { continue };
            grads.scale(1.0 / used as f64);
            if !grads.norm().is_finite() {
                return Err(CoreError::Diverged { epoch });
            }
            grads.clip(config.clip_norm);
            adam.begin_step();
            for (name, p) in model.params.iter_mut() {
                if let Some(g) = grads.params.get(name) {
                    adam.update(name, p.data_mut(), g.data());
                }
            }
            adam.update("loss.sigma_r", std::slice::from_mut(&mut loss.sigma_r), &[grads.sigma_r]);
            adam.update("loss.sigma_t", std::slice::from_mut(&mut loss.sigma_t), &[grads.sigma_t]);
        }
        let train_loss = loss_sum / seen.max(1) as f64;
        if !train_loss.is_finite() {
            return Err(CoreError::Diverged { epoch });
        }

        let mut ck = Checkpoint::new(&model, loss, adam.clone(), epoch, config.seed);
        let (vp, vt) = if val_set.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let report = evaluate(&model, val_set, config.k0)?;
            ck.val_phi_rmse = Some(report.phi_rmse);
            ck.val_dt_rmse = Some(report.dt_rmse);
            let score = report.selection_score();
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, ck.clone()));
            }
            (report.phi_rmse, report.dt_rmse)
        };
        let log = EpochLog {
            epoch,
            train_loss,
            val_phi_rmse: vp,
            val_dt_rmse: vt,
            skipped,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch} loss {train_loss:.6} val phi_rmse {vp:.3} dt_rmse {vt:.4} sigma ({:.3}, {:.3}) skipped {skipped} {:.1}s",
            loss.sigma_r, loss.sigma_t, log.seconds
        );
        history.push(log);
        completed = epoch;
        let seconds = history.last().map_or(0.0, |l: &EpochLog| l.seconds);
        if config.max_seconds.is_some_and(|m| run_started.elapsed().as_secs_f64() + seconds > m) {
            info!("time budget reached after {epoch} epochs");
            break;
        }
    }
    let last = Checkpoint::new(&model, loss, adam, completed, config.seed);
    let best = best.map_or_else(|| last.clone(), |(_, c)| c);
    Ok(TrainOutcome {
        best,
        last,
        history,
        initial_loss,
    })
}
