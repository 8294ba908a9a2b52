use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use bhreg_autograd::gradcheck::{op_suite, OP_TOLERANCE};
use bhreg_core::cloud::{normalize, normalize_cloud, read_xyz, synth_shape, write_xyz, PointCloud, TrainSample};
use bhreg_core::model::{pipeline_gradcheck, Model, ModelConfig};
use bhreg_core::rigid::{angular_error, compose_trajectory, icp, procrustes, translation_error, RigidTransform};
use bhreg_core::training::{evaluate, evaluate_transforms, train, Checkpoint, DataConfig, TrainConfig};
use bhreg_core::tree::BhTree;
use bhreg_core::CoreError;
use log::{info, warn};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{CliError, Result};
use crate::files::{self, join, transform_fields, TRANSFORM_COLUMNS};
use crate::{
    BenchArgs, BuildTreeArgs, Cli, Command, EvalArgs, GradcheckArgs, MakeCloudArgs, MakeDataArgs, Method,
    RegisterArgs, Split, TrainArgs, TrajectoryArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    let out = match &cli.command {
        Command::BuildTree(a) => build_tree(a)?,
        Command::Register(a) => register(a)?,
        Command::Train(a) => train_cmd(cli, a)?,
        Command::Eval(a) => eval(cli, a)?,
        Command::Trajectory(a) => trajectory(a)?,
        Command::Gradcheck(a) => gradcheck(cli, a)?,
        Command::Bench(a) => bench(cli, a)?,
        Command::MakeData(a) => make_data(cli, a)?,
        Command::MakeCloud(a) => make_cloud(cli, a)?,
    };
    emit(&out)
}

fn emit(text: &str) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(text.as_bytes())
        .and_then(|_| stdout.flush())
        .map_err(|e| CliError::io("<stdout>", e))
}

fn load_cloud(path: &Path, normalize_first: bool) -> Result<PointCloud> {
    let cloud = read_xyz(path)?;
    Ok(if normalize_first { normalize_cloud(&cloud)?.0 } else { cloud })
}

fn load_model(path: Option<&Path>) -> Result<Model> {
    let path = path.ok_or_else(|| CliError::Usage("--model is required for this method".into()))?;
    Ok(Checkpoint::load(path)?.model()?)
}

fn build_tree(a: &BuildTreeArgs) -> Result<String> {
    let cloud = load_cloud(&a.input, a.normalize)?;
    let started = Instant::now();
    let tree = BhTree::build(&cloud, a.depth)?;
    info!("built depth-{} tree over {} points in {:?}", a.depth, cloud.len(), started.elapsed());
    if let Some(path) = &a.dump {
        std::fs::write(path, tree.dump()).map_err(|e| CliError::io(path, e))?;
    }
    let mut out = String::from("depth,nodes,points\n");
    for (d, level) in tree.levels().iter().enumerate() {
        let points: u64 = level.count.iter().map(|&c| u64::from(c)).sum();
        let _ = writeln!(out, "{d},{},{points}", level.len());
    }
    Ok(out)
}

const REGISTER_HEADER: &str = "method,iterations,phi_deg,dt";

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Icp => "icp",
        Method::ProcrustesGt => "procrustes-gt",
        Method::Rpsrnet => "rpsrnet",
        Method::Identity => "identity",
    }
}

/// Estimate plus the iteration or pass count of the method.
fn estimate(
    method: Method,
    model: Option<&Model>,
    source: &PointCloud,
    target: &PointCloud,
    passes: usize,
    max_iters: usize,
    tol: f64,
) -> Result<(RigidTransform, usize)> {
    Ok(match method {
        Method::Identity => (RigidTransform::identity(), 0),
        Method::ProcrustesGt => {
            let weights = vec![1.0; source.len()];
            (procrustes(&source.points, &target.points, &weights)?, 1)
        }
        Method::Icp => {
            let r = icp(source, target, max_iters, tol)?;
            (r.transform, r.iterations)
        }
        Method::Rpsrnet => {
            let model = model.ok_or_else(|| CliError::Usage("--model is required for rpsrnet".into()))?;
            (model.register_iterative(source, target, passes)?.total, passes)
        }
    })
}

fn register(a: &RegisterArgs) -> Result<String> {
    let source = read_xyz(&a.source)?;
    let target = read_xyz(&a.target)?;
    let model = match a.method {
        Method::Rpsrnet => Some(load_model(a.model.as_deref())?),
        _ => None,
    };
    let (t, iterations) = estimate(a.method, model.as_ref(), &source, &target, a.passes, a.max_iters, a.tol)?;
    let (phi, dt) = match &a.gt {
        Some(path) => {
            let gt = files::read_transform(path)?;
            let phi = angular_error(&gt.rotation, &t.rotation);
            let dt = translation_error(&gt.translation, &t.translation);
            info!("phi {phi:.6} deg, dt {dt:.3e}");
            (phi.to_string(), dt.to_string())
        }
        None => (String::new(), String::new()),
    };
    if let Some(path) = &a.out {
        std::fs::write(path, files::format_transforms(&[t])).map_err(|e| CliError::io(path, e))?;
    }
    Ok(format!(
        "{REGISTER_HEADER},{TRANSFORM_COLUMNS}\n{},{iterations},{phi},{dt},{}\n",
        method_name(a.method),
        join(&transform_fields(&t))
    ))
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<String> {
    let mut config = match &a.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(profile) = cli.profile {
        config.profile = profile;
    }
    if let Some(epochs) = a.epochs {
        config.epochs = epochs;
    }
    config.validate()?;
    info!("resolved configuration:\n{}", config.to_toml());
    let data = config.data.generate(config.seed)?;
    let outcome = train(&config, &data.train_shapes, &data.train, &data.val, config.epochs)?;
    outcome.best.save(&a.out)?;
    if let Some(path) = &a.last {
        outcome.last.save(path)?;
    }
    info!(
        "best epoch {} val phi_rmse {:?} dt_rmse {:?}; saved {}",
        outcome.best.epoch,
        outcome.best.val_phi_rmse,
        outcome.best.val_dt_rmse,
        a.out.display()
    );
    let mut out = String::from("epoch,train_loss,val_phi_rmse,val_dt_rmse,skipped\n");
    let _ = writeln!(out, "0,{},,,0", outcome.initial_loss);
    for e in &outcome.history {
        let _ = writeln!(out, "{},{},{},{},{}", e.epoch, e.train_loss, e.val_phi_rmse, e.val_dt_rmse, e.skipped);
    }
    Ok(out)
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<String> {
    let model = match a.method {
        Method::Rpsrnet => Some(load_model(a.model.as_deref())?),
        _ => None,
    };
    let samples: Vec<TrainSample> = match &a.data {
        Some(dir) => files::read_pairs(dir)?,
        None => {
            let seed = match (cli.seed, &a.model) {
                (Some(s), _) => s,
                (None, Some(path)) => Checkpoint::load(path)?.seed,
                (None, None) => 0,
            };
            let cfg = DataConfig {
                train_shapes: 0,
                ..DataConfig::default()
            };
            cfg.generate(seed)?.val
        }
    };
    let report = match &model {
        Some(m) => evaluate(m, &samples, a.passes)?,
        None => {
            let preds = samples
                .par_iter()
                .map(|s| {
                    estimate(a.method, None, &s.source, &s.target, a.passes, a.max_iters, 1e-10).map(|(t, _)| t)
                })
                .collect::<Result<Vec<_>>>()?;
            evaluate_transforms(&samples, &preds)?
        }
    };
    info!("{} passes={}: {}", method_name(a.method), a.passes, report.summary());
    Ok(report.to_csv())
}

fn trajectory(a: &TrajectoryArgs) -> Result<String> {
    let relative = files::read_transforms(&a.input)?;
    let init = match &a.init {
        Some(path) => files::read_transform(path)?,
        None => RigidTransform::identity(),
    };
    let [x, y, z] = a.probe[..] else {
        return Err(CliError::Usage("--probe takes three comma separated numbers".into()));
    };
    let probe = Vector3::new(x, y, z);
    let mut out = String::from("frame,x,y,z\n");
    for (f, p) in compose_trajectory(&relative, &init, &probe).iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{}", f + 1, p.x, p.y, p.z);
    }
    Ok(out)
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<String> {
    let seed = cli.seed.unwrap_or(0);
    let mut out = String::from("check,max_rel_error,tolerance,passed\n");
    let mut failed = 0;
    let mut row = |out: &mut String, name: &str, err: f64, tol: f64| {
        let ok = err <= tol;
        failed += usize::from(!ok);
        let _ = writeln!(out, "{name},{err:e},{tol:e},{ok}");
    };
    for c in op_suite(seed)? {
        row(&mut out, c.name, c.max_rel_error, c.tolerance);
    }
    if !a.ops_only {
        let c = pipeline_gradcheck(seed)?;
        row(&mut out, "pipeline", c.max_rel_error, OP_TOLERANCE);
    }
    if failed > 0 {
        emit(&out)?;
        return Err(CliError::ChecksFailed(failed));
    }
    Ok(out)
}

/// Mean, sample standard deviation, median and minimum in milliseconds.
fn stats(ms: &mut [f64]) -> [f64; 4] {
    let n = ms.len() as f64;
    let mean = ms.iter().sum::<f64>() / n;
    let var = ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    ms.sort_by(f64::total_cmp);
    let mid = ms.len() / 2;
    let median = if ms.len().is_multiple_of(2) { 0.5 * (ms[mid - 1] + ms[mid]) } else { ms[mid] };
    [mean, var.sqrt(), median, ms[0]]
}

fn time_ms<T>(repeats: usize, mut f: impl FnMut() -> bhreg_core::Result<T>) -> Result<Vec<f64>> {
    (0..repeats)
        .map(|_| {
            let started = Instant::now();
            f()?;
            Ok(started.elapsed().as_secs_f64() * 1e3)
        })
        .collect()
}

fn bench(cli: &Cli, a: &BenchArgs) -> Result<String> {
    if a.repeats == 0 {
        return Err(CliError::Usage("--repeats must be positive".into()));
    }
    let cloud = load_cloud(&a.input, true)?;
    let mut out = String::from("stage,points,depth,repeats,mean_ms,std_ms,median_ms,min_ms\n");
    let line = |out: &mut String, stage: &str, depth: usize, mut ms: Vec<f64>| {
        let s = stats(&mut ms);
        info!("{stage}: median {:.3} ms", s[2]);
        let _ = writeln!(out, "{stage},{},{depth},{},{}", cloud.len(), a.repeats, join(&s));
    };
    let build = time_ms(a.repeats, || BhTree::build(&cloud, a.depth))?;
    line(&mut out, "tree_build", a.depth, build);

    if !a.skip_inference {
        let model = match &a.model {
            Some(path) => Checkpoint::load(path)?.model()?,
            None => Model::new(ModelConfig::desk(), cli.seed.unwrap_or(0))?,
        };
        let depth = model.config.tree_depth;
        let moved = cloud.transformed(&RigidTransform::from_euler_deg([10.0, 5.0, 3.0], Vector3::new(0.05, 0.0, 0.0)));
        let (yn, xn, _) = normalize((&moved, &cloud))?;
        let (ty, tx) = (model.build_tree(&yn)?, model.build_tree(&xn)?);
        let once = time_ms(a.repeats, || match model.register_once(&ty, &tx) {
            Err(CoreError::RankDeficient(_)) => Ok(RigidTransform::identity()),
            other => other,
        })?;
        line(&mut out, "inference", depth, once);
        let end_to_end = time_ms(a.repeats, || match model.register_iterative(&moved, &cloud, 1) {
            Err(CoreError::RankDeficient(_)) => Ok(RigidTransform::identity()),
            other => other.map(|r| r.total),
        })?;
        line(&mut out, "register_pass", depth, end_to_end);
    }
    Ok(out)
}

fn make_data(cli: &Cli, a: &MakeDataArgs) -> Result<String> {
    let mut cfg = DataConfig {
        max_angle_deg: a.max_angle,
        max_translation: a.max_translation,
        noise_level: a.noise_level,
        ..DataConfig::default()
    };
    match (a.split, a.count) {
        (Split::Train, c) => {
            cfg.train_shapes = c.unwrap_or(cfg.train_shapes);
            cfg.val_shapes = 0;
        }
        (Split::Val, c) => {
            cfg.val_shapes = c.unwrap_or(cfg.val_shapes);
            cfg.train_shapes = 0;
        }
    }
    let data = cfg.generate(cli.seed.unwrap_or(0))?;
    let samples = match a.split {
        Split::Train => data.train,
        Split::Val => data.val,
    };
    files::write_pairs(&a.out, &samples)?;
    let mut out = format!("index,points,perturbation,{TRANSFORM_COLUMNS}\n");
    for (i, s) in samples.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{}",
            s.source.len(),
            s.perturbation.kind.name(),
            join(&transform_fields(&s.gt))
        );
    }
    if samples.is_empty() {
        warn!("no pairs written");
    }
    Ok(out)
}

fn make_cloud(cli: &Cli, a: &MakeCloudArgs) -> Result<String> {
    if a.points == 0 {
        return Err(CliError::Usage("--points must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
    let cloud = synth_shape(a.points, &mut rng)?;
    write_xyz(&a.out, &cloud)?;
    Ok(format!("points\n{}\n", cloud.len()))
}
