//! Hierarchical tree-convolution encoder producing a 64-row feature map per
//! cloud.

use bhreg_autograd::{Scalar, Tape, Tensor, Var};
use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{glorot, linear, Bound, ParamStore};
use crate::tree::{BhTree, VoxelGrid, VOXEL_CELLS, VOXEL_DEPTH};

/// Number of taps in the tree convolution window: the node and its 26
/// neighbors in lexicographic `(dz, dy, dx)` order.
pub const CONV_TAPS: usize = 27;
/// Position of the node itself in the window.
pub const CENTER_TAP: usize = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Batch,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Position,
    Density,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Position => "enc.pos",
            Branch::Density => "enc.den",
        }
    }

    fn input_dim(self) -> usize {
        match self {
            Branch::Position => 3,
            Branch::Density => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Tree depths with a convolution unit, finest first.
    pub depths_used: Vec<usize>,
    /// Input width of the unit at each depth in `depths_used`.
    pub channel_widths: Vec<usize>,
    /// Width after the last unit, carried into the voxel grid.
    pub voxel_width: usize,
    pub output_cols: usize,
    pub lift_width: usize,
    pub norm_mode: NormMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depths_used: vec![5, 4, 3],
            channel_widths: vec![32, 64, 128],
            voxel_width: 256,
            output_cols: 512,
            lift_width: 32,
            norm_mode: NormMode::Batch,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::Config(format!("encoder: {msg}")));
        let d = &self.depths_used;
        if d.is_empty() {
            return bad("depths_used is empty".into());
        }
        if d.last() != Some(&(VOXEL_DEPTH + 1)) || d.windows(2).any(|w| w[0] != w[1] + 1) {
            return bad(format!("depths_used {d:?} must descend by one down to {}", VOXEL_DEPTH + 1));
        }
        if self.channel_widths.len() != d.len() {
            return bad(format!(
                "{} channel widths for {} depths",
                self.channel_widths.len(),
                d.len()
            ));
        }
        let mut widths = self.channel_widths.clone();
        widths.push(self.voxel_width);
        if widths.contains(&0) || self.output_cols == 0 {
            return bad("widths must be positive".into());
        }
        if widths.windows(2).any(|w| w[0] > w[1]) {
            return bad(format!("widths {widths:?} must not shrink with coarsening"));
        }
        if self.lift_width != self.channel_widths[0] {
            return bad(format!(
                "lift_width {} differs from the first channel width {}",
                self.lift_width, self.channel_widths[0]
            ));
        }
        Ok(())
    }

    pub fn finest_depth(&self) -> usize {
        self.depths_used[0]
    }

    fn out_width(&self, unit: usize) -> usize {
        self.channel_widths.get(unit + 1).copied().unwrap_or(self.voxel_width)
    }

    /// Add freshly initialized encoder parameters to `store`.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for branch in [Branch::Position, Branch::Density] {
            let p = branch.prefix();
            store.insert(format!("{p}.lift.w"), glorot(rng, branch.input_dim(), self.lift_width, 1.0));
            store.insert(format!("{p}.lift.b"), Tensor::zeros(1, self.lift_width));
            for (u, &d) in self.depths_used.iter().enumerate() {
                let (cin, cout) = (self.channel_widths[u], self.out_width(u));
                store.insert(format!("{p}.conv{d}.w"), glorot(rng, CONV_TAPS * cin, cout, 2f64.sqrt()));
                match self.norm_mode {
                    NormMode::Batch => {
                        store.insert(format!("{p}.bn{d}.gamma"), Tensor::filled(1, cout, 1.0));
                        store.insert(format!("{p}.bn{d}.beta"), Tensor::zeros(1, cout));
                    }
                    NormMode::None => {
                        store.insert(format!("{p}.conv{d}.b"), Tensor::zeros(1, cout));
                    }
                }
            }
        }
        store.insert("enc.fc.w", glorot(rng, self.voxel_width, self.output_cols, 0.25));
        store.insert("enc.fc.b", Tensor::zeros(1, self.output_cols));
    }
}

/// Encoded cloud: one feature row per depth-2 cell in Morton order.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    /// `64 x output_cols` tape handle; rows of empty cells are zero.
    pub features: Var,
    pub mask: [bool; VOXEL_CELLS],
    pub mass: [f64; VOXEL_CELLS],
    pub com: [Vector3<f64>; VOXEL_CELLS],
}

/// Flat gather index of the 27-tap window of every node at `depth`.
pub fn conv_window(tree: &BhTree, depth: usize) -> Vec<i64> {
    let table = tree.neighbors(depth);
    let mut index = Vec::with_capacity(table.len() * CONV_TAPS);
    for (i, slots) in table.iter().enumerate() {
        index.extend(slots[..CENTER_TAP].iter().map(|&s| s as i64));
        index.push(i as i64);
        index.extend(slots[CENTER_TAP..].iter().map(|&s| s as i64));
    }
    index
}

/// Indexed convolution over the 27-node neighborhood. `weights` is
/// `27·C_in x C_out`, tap-major.
pub fn tree_conv<T: Scalar>(
    tape: &mut Tape<T>,
    tree: &BhTree,
    depth: usize,
    features: Var,
    weights: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let n = populated(tree, depth)?.len();
    let (rows, cin) = tape.shape(features);
    if rows != n {
        return Err(CoreError::LengthMismatch(rows, n));
    }
    if tape.shape(weights).0 != CONV_TAPS * cin {
        return Err(CoreError::LengthMismatch(tape.shape(weights).0, CONV_TAPS * cin));
    }
    let y = tape.indexed_conv(features, weights, &conv_window(tree, depth), CONV_TAPS)?;
    Ok(match bias {
        Some(b) => tape.add_row(y, b)?,
        None => y,
    })
}

/// Elementwise max over the children of every node at `depth − 1`; empty
/// children count as zero rows.
pub fn child_max_pool<T: Scalar>(tape: &mut Tape<T>, tree: &BhTree, depth: usize, features: Var) -> Result<Var> {
    if depth == 0 {
        return Err(CoreError::InvalidDepth(0));
    }
    let rows = tape.shape(features).0;
    let n = populated(tree, depth)?.len();
    if rows != n {
        return Err(CoreError::LengthMismatch(rows, n));
    }
    let parents = tree.level(depth - 1);
    let groups: Vec<i64> = parents.children.iter().flatten().map(|&c| c as i64).collect();
    Ok(tape.max_pool_grouped(features, &groups, 8)?)
}

fn populated(tree: &BhTree, depth: usize) -> Result<&crate::tree::Level> {
    if depth > tree.max_depth() {
        return Err(CoreError::DepthUnpopulated {
            depth,
            max_depth: tree.max_depth(),
        });
    }
    Ok(tree.level(depth))
}

/// Positive per-node weights rescaled to mean one.
pub fn density_input(weights: &[f64]) -> Vec<f64> {
    let total = crate::tree::neumaier_sum(weights);
    let n = weights.len() as f64;
    weights.iter().map(|w| w / total * n).collect()
}

/// Per-node branch input at `depth`: cell CoMs, or inverse density
/// rescaled to mean one.
pub fn branch_input(tree: &BhTree, depth: usize, branch: Branch) -> Result<Tensor<f64>> {
    let level = populated(tree, depth)?;
    let n = level.len();
    Ok(match branch {
        Branch::Position => Tensor::from_fn(n, 3, |r, c| level.com[r][c]),
        Branch::Density => {
            let d = density_input(&level.inv_density);
            Tensor::from_fn(n, 1, |r, _| d[r])
        }
    })
}

/// One embedding branch: lift, then conv + norm + relu + pool per depth,
/// then scatter into the `4³` grid.
pub fn encode_branch<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound,
    config: &EncoderConfig,
    tree: &BhTree,
    grid: &VoxelGrid,
    branch: Branch,
) -> Result<Var> {
    let p = branch.prefix();
    let input = tape.constant(branch_input(tree, config.finest_depth(), branch)?.cast());
    let mut h = linear(tape, input, params.var(&format!("{p}.lift.w"))?, Some(params.var(&format!("{p}.lift.b"))?))?;
    for &d in &config.depths_used {
        let w = params.var(&format!("{p}.conv{d}.w"))?;
        h = match config.norm_mode {
            NormMode::Batch => {
                let h = tree_conv(tape, tree, d, h, w, None)?;
                let g = params.var(&format!("{p}.bn{d}.gamma"))?;
                let b = params.var(&format!("{p}.bn{d}.beta"))?;
                tape.batch_norm_1d(h, g, b)?
            }
            NormMode::None => {
                let b = params.var(&format!("{p}.conv{d}.b"))?;
                tree_conv(tape, tree, d, h, w, Some(b))?
            }
        };
        h = tape.relu(h);
        h = child_max_pool(tape, tree, d, h)?;
    }
    let cells: Vec<i64> = grid.node.iter().map(|&i| i as i64).collect();
    Ok(tape.gather_rows(h, &cells)?)
}

/// Hadamard fusion of the two branch outputs followed by the shared per-row
/// fully connected map.
pub fn fuse<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound,
    position: Var,
    density: Var,
    grid: &VoxelGrid,
) -> Result<FeatureMap> {
    let mask = grid.mask();
    let fused = tape.hadamard(position, density)?;
    let fused = tape.mask_rows(fused, &mask)?;
    let out = linear(tape, fused, params.var("enc.fc.w")?, Some(params.var("enc.fc.b")?))?;
    let features = tape.mask_rows(out, &mask)?;
    Ok(FeatureMap {
        features,
        mask,
        mass: grid.mass,
        com: grid.com,
    })
}

pub fn encode<T: Scalar>(tape: &mut Tape<T>, params: &Bound, config: &EncoderConfig, tree: &BhTree) -> Result<FeatureMap> {
    let grid = tree.tree_to_voxel()?;
    let pos = encode_branch(tape, params, config, tree, &grid, Branch::Position)?;
    let den = encode_branch(tape, params, config, tree, &grid, Branch::Density)?;
    fuse(tape, params, pos, den, &grid)
}
