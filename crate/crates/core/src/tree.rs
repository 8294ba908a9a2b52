//! Barnes-Hut octree over a normalized cloud.
//!
//! Every depth `0..=d0` is stored as a structure of arrays holding the
//! non-empty cells of the `2^d` grid in Morton order. A cell's label is
//! `(8^d − 1)/7 + code`, so the children of label `i` are `8i+1 ..= 8i+8`.
//! A point that becomes a leaf above `d0` is carried down as a single-point
//! cell flagged `propagated`, so every depth partitions the whole cloud.

use std::fmt::Write as _;
use std::sync::OnceLock;

use nalgebra::Vector3;

use crate::cloud::{NormalizationInfo, PointCloud};
use crate::error::{CoreError, Result};

pub const MAX_DEPTH: usize = 10;
pub const DEFAULT_DEPTH: usize = 6;
/// Marker for an absent child or neighbor.
pub const EMPTY: i32 = -1;
pub const NEIGHBOR_SLOTS: usize = 26;
/// Depth whose `4 x 4 x 4` grid backs [`BhTree::tree_to_voxel`].
pub const VOXEL_DEPTH: usize = 2;
pub const VOXEL_CELLS: usize = 64;

/// Same-depth neighbor offsets `(dz, dy, dx)` in lexicographic order.
pub const NEIGHBOR_OFFSETS: [[i32; 3]; NEIGHBOR_SLOTS] = neighbor_offsets();

const fn neighbor_offsets() -> [[i32; 3]; NEIGHBOR_SLOTS] {
    let mut out = [[0; 3]; NEIGHBOR_SLOTS];
    let mut k = 0;
    let mut i = 0;
    while i < 27 {
        if i != 13 {
            out[k] = [(i / 9) - 1, ((i / 3) % 3) - 1, (i % 3) - 1];
            k += 1;
        }
        i += 1;
    }
    out
}

/// Slot holding the opposite offset of `slot`.
pub fn mirror_slot(slot: usize) -> usize {
    NEIGHBOR_SLOTS - 1 - slot
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Internal,
    Leaf,
}

/// Labels of the eight children of `label`, in Morton order.
pub fn child_labels(label: u64) -> [u64; 8] {
    std::array::from_fn(|k| 8 * label + 1 + k as u64)
}

/// Inverse of [`child_labels`]; `None` for the root.
pub fn parent_label(label: u64) -> Option<u64> {
    (label > 0).then(|| (label - 1) / 8)
}

/// First label used at `depth`.
pub fn label_offset(depth: usize) -> u64 {
    ((1u64 << (3 * depth)) - 1) / 7
}

fn spread(v: u32) -> u32 {
    let mut x = v & 0x3ff;
    x = (x | (x << 16)) & 0x0300_00ff;
    x = (x | (x << 8)) & 0x0300_f00f;
    x = (x | (x << 4)) & 0x030c_30c3;
    (x | (x << 2)) & 0x0924_9249
}

fn compact(v: u32) -> u32 {
    let mut x = v & 0x0924_9249;
    x = (x | (x >> 2)) & 0x030c_30c3;
    x = (x | (x >> 4)) & 0x0300_f00f;
    x = (x | (x >> 8)) & 0x0300_00ff;
    (x | (x >> 16)) & 0x3ff
}

/// Interleave grid coordinates with `z` most significant within each octant.
pub fn morton_encode(ix: u32, iy: u32, iz: u32) -> u32 {
    spread(ix) | (spread(iy) << 1) | (spread(iz) << 2)
}

pub fn morton_decode(code: u32) -> [u32; 3] {
    [compact(code), compact(code >> 1), compact(code >> 2)]
}

/// Index of the `2^depth` grid cell holding coordinate `v ∈ [-1, 1]`; a value
/// on a cell boundary goes to the upper cell.
pub fn cell_coord(v: f64, depth: usize) -> u32 {
    let n = 1i64 << depth;
    let nf = n as f64;
    let boundary = |k: i64| -1.0 + 2.0 * k as f64 / nf;
    let mut i = (((v + 1.0) * 0.5 * nf).floor() as i64).clamp(0, n - 1);
    if i > 0 && v < boundary(i) {
        i -= 1;
    } else if i + 1 < n && v >= boundary(i + 1) {
        i += 1;
    }
    i as u32
}

/// Center and half-length of the cell with Morton `code` at `depth`.
pub fn cell_geometry(code: u32, depth: usize) -> (Vector3<f64>, f64) {
    let half = 1.0 / (1u64 << depth) as f64;
    let [ix, iy, iz] = morton_decode(code);
    let c = |i: u32| -1.0 + (2 * i + 1) as f64 * half;
    (Vector3::new(c(ix), c(iy), c(iz)), half)
}

/// Non-empty cells of one depth in Morton order.
#[derive(Debug, Default)]
pub struct Level {
    pub codes: Vec<u32>,
    pub count: Vec<u32>,
    pub com: Vec<Vector3<f64>>,
    /// Normalized inverse density: `(N / count) / Σ (N / count)`.
    pub inv_density: Vec<f64>,
    /// First position of the cell's points in [`BhTree::order`].
    pub start: Vec<u32>,
    /// Index of the parent at the previous depth (0 for the root).
    pub parent: Vec<u32>,
    /// Child index at the next depth per octant, or [`EMPTY`].
    pub children: Vec<[i32; 8]>,
    pub kind: Vec<NodeKind>,
    /// Single-point cell below the depth where its point became a leaf.
    pub propagated: Vec<bool>,
    neighbors: OnceLock<Vec<[i32; NEIGHBOR_SLOTS]>>,
}

impl Level {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn index_of_code(&self, code: u32) -> Option<usize> {
        self.codes.binary_search(&code).ok()
    }
}

/// A node record assembled from the per-depth arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub depth: usize,
    pub index: usize,
    pub label: u64,
    pub kind: NodeKind,
    pub propagated: bool,
    pub count: u32,
    pub com: Vector3<f64>,
    pub inv_density: f64,
    pub cell_center: Vector3<f64>,
    pub cell_half_length: f64,
    pub parent: Option<usize>,
    pub children: [Option<usize>; 8],
}

/// Depth-2 voxelization: cell `i` is the node with Morton code `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    /// Depth-2 node index per cell, or [`EMPTY`].
    pub node: [i32; VOXEL_CELLS],
    /// `count / N`; zero for empty cells.
    pub mass: [f64; VOXEL_CELLS],
    /// Zero for empty cells.
    pub com: [Vector3<f64>; VOXEL_CELLS],
}

impl VoxelGrid {
    pub fn occupied(&self, cell: usize) -> bool {
        self.node[cell] != EMPTY
    }

    pub fn mask(&self) -> [bool; VOXEL_CELLS] {
        std::array::from_fn(|i| self.occupied(i))
    }
}

#[derive(Debug)]
pub struct BhTree {
    levels: Vec<Level>,
    /// Point indices sorted by deepest-level Morton code.
    order: Vec<u32>,
    /// Points in `order`.
    sorted: Vec<Vector3<f64>>,
    total: usize,
}

impl BhTree {
    /// Build the tree of depth `max_depth` over a cloud inside `[-1, 1]^3`.
    pub fn build(cloud: &PointCloud, max_depth: usize) -> Result<Self> {
        if !(1..=MAX_DEPTH).contains(&max_depth) {
            return Err(CoreError::InvalidDepth(max_depth));
        }
        if cloud.is_empty() {
            return Err(CoreError::EmptyCloud);
        }
        let n = cloud.len();
        let mut keys = Vec::with_capacity(n);
        for (i, p) in cloud.points.iter().enumerate() {
            if !p.iter().all(|v| (-1.0..=1.0).contains(v)) {
                return Err(CoreError::OutOfBounds { index: i });
            }
            let code = morton_encode(
                cell_coord(p.x, max_depth),
                cell_coord(p.y, max_depth),
                cell_coord(p.z, max_depth),
            );
            keys.push(((code as u64) << 32) | i as u64);
        }
        radix_sort_by_code(&mut keys, 3 * max_depth);
        // Canonical order inside a cell so sums do not depend on input order.
        let mut i = 0;
        while i < n {
            let code = keys[i] >> 32;
            let mut j = i + 1;
            while j < n && keys[j] >> 32 == code {
                j += 1;
            }
            if j - i > 1 {
                keys[i..j].sort_unstable_by(|&a, &b| {
                    let (pa, pb) = (&cloud.points[a as u32 as usize], &cloud.points[b as u32 as usize]);
                    pa.x.total_cmp(&pb.x)
                        .then(pa.y.total_cmp(&pb.y))
                        .then(pa.z.total_cmp(&pb.z))
                        .then(a.cmp(&b))
                });
            }
            i = j;
        }

        let order: Vec<u32> = keys.iter().map(|k| *k as u32).collect();
        let sorted: Vec<Vector3<f64>> = order.iter().map(|&i| cloud.points[i as usize]).collect();

        // Deepest level straight from the sorted points.
        let mut levels: Vec<Level> = (0..=max_depth).map(|_| Level::default()).collect();
        let mut sums: Vec<Vector3<f64>> = Vec::new();
        {
            let deep = &mut levels[max_depth];
            let mut i = 0;
            while i < n {
                let code = (keys[i] >> 32) as u32;
                let mut sum = Vector3::zeros();
                let mut j = i;
                while j < n && (keys[j] >> 32) as u32 == code {
                    sum += sorted[j];
                    j += 1;
                }
                deep.codes.push(code);
                deep.count.push((j - i) as u32);
                deep.start.push(i as u32);
                sums.push(sum);
                i = j;
            }
            deep.children = vec![[EMPTY; 8]; deep.codes.len()];
            deep.parent = vec![0; deep.codes.len()];
            deep.com = sums.iter().zip(&deep.count).map(|(s, &c)| s / c as f64).collect();
        }

        // Coarser levels by merging runs of siblings.
        for d in (0..max_depth).rev() {
            let (head, tail) = levels.split_at_mut(d + 1);
            let (coarse, fine) = (&mut head[d], &mut tail[0]);
            let m = fine.codes.len();
            let mut coarse_sums = Vec::with_capacity(m / 2 + 1);
            let mut i = 0;
            while i < m {
                let pcode = fine.codes[i] >> 3;
                let pidx = coarse.codes.len();
                let mut children = [EMPTY; 8];
                let mut count = 0;
                let mut sum = Vector3::zeros();
                let mut j = i;
                while j < m && fine.codes[j] >> 3 == pcode {
                    children[(fine.codes[j] & 7) as usize] = j as i32;
                    fine.parent[j] = pidx as u32;
                    count += fine.count[j];
                    sum += sums[j];
                    j += 1;
                }
                coarse.codes.push(pcode);
                coarse.count.push(count);
                coarse.start.push(fine.start[i]);
                coarse.children.push(children);
                coarse_sums.push(sum);
                i = j;
            }
            coarse.parent = vec![0; coarse.codes.len()];
            coarse.com = coarse_sums.iter().zip(&coarse.count).map(|(s, &c)| s / c as f64).collect();
            sums = coarse_sums;
        }

        for d in 0..=max_depth {
            let (head, tail) = levels.split_at_mut(d);
            let level = &mut tail[0];
            let len = level.codes.len();
            level.propagated = match head.last() {
                None => vec![false; len],
                Some(up) => level
                    .parent
                    .iter()
                    .map(|&p| up.count[p as usize] == 1)
                    .collect(),
            };
            level.kind = level
                .count
                .iter()
                .map(|&c| if c == 1 || d == max_depth { NodeKind::Leaf } else { NodeKind::Internal })
                .collect();
            let raw: Vec<f64> = level.count.iter().map(|&c| n as f64 / c as f64).collect();
            let total = neumaier_sum(&raw);
            level.inv_density = raw.iter().map(|r| r / total).collect();
        }

        Ok(Self {
            levels,
            order,
            sorted,
            total: n,
        })
    }

    pub fn max_depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn total_points(&self) -> usize {
        self.total
    }

    pub fn level(&self, depth: usize) -> &Level {
        &self.levels[depth]
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    /// Point indices in Morton order; node `i` of a depth encloses
    /// `order[start[i] .. start[i] + count[i]]`.
    pub fn order(&self) -> &[u32] {
        &self.order
    }

    /// Points in Morton order.
    pub fn sorted_points(&self) -> &[Vector3<f64>] {
        &self.sorted
    }

    /// Enclosed points of node `index` at `depth`, in Morton order.
    pub fn node_points(&self, depth: usize, index: usize) -> &[Vector3<f64>] {
        let l = &self.levels[depth];
        let s = l.start[index] as usize;
        &self.sorted[s..s + l.count[index] as usize]
    }

    pub fn label(&self, depth: usize, index: usize) -> u64 {
        label_offset(depth) + self.levels[depth].codes[index] as u64
    }

    pub fn labels(&self, depth: usize) -> Vec<u64> {
        let off = label_offset(depth);
        self.levels[depth].codes.iter().map(|&c| off + c as u64).collect()
    }

    pub fn index_of(&self, depth: usize, label: u64) -> Option<usize> {
        let off = label_offset(depth);
        let code = label.checked_sub(off)?;
        if code >= 1u64 << (3 * depth) {
            return None;
        }
        self.levels.get(depth)?.index_of_code(code as u32)
    }

    pub fn node(&self, depth: usize, index: usize) -> Node {
        let l = &self.levels[depth];
        let (cell_center, cell_half_length) = cell_geometry(l.codes[index], depth);
        let children = if depth < self.max_depth() {
            l.children[index].map(|c| (c != EMPTY).then_some(c as usize))
        } else {
            [None; 8]
        };
        Node {
            depth,
            index,
            label: self.label(depth, index),
            kind: l.kind[index],
            propagated: l.propagated[index],
            count: l.count[index],
            com: l.com[index],
            inv_density: l.inv_density[index],
            cell_center,
            cell_half_length,
            parent: (depth > 0).then_some(l.parent[index] as usize),
            children,
        }
    }

    /// Neighbor table of every node at `depth`, computed on first use.
    pub fn neighbors(&self, depth: usize) -> &[[i32; NEIGHBOR_SLOTS]] {
        let level = &self.levels[depth];
        level.neighbors.get_or_init(|| {
            let side = 1i32 << depth;
            // Dense code -> index table for the shallow depths; binary search beyond.
            let dense: Option<Vec<i32>> = (depth <= DENSE_LOOKUP_DEPTH).then(|| {
                let mut t = vec![EMPTY; 1 << (3 * depth)];
                for (i, &c) in level.codes.iter().enumerate() {
                    t[c as usize] = i as i32;
                }
                t
            });
            let lookup = |code: u32| match &dense {
                Some(t) => t[code as usize],
                None => level.index_of_code(code).map_or(EMPTY, |i| i as i32),
            };
            level
                .codes
                .iter()
                .map(|&code| {
                    let [ix, iy, iz] = morton_decode(code).map(|v| v as i32);
                    NEIGHBOR_OFFSETS.map(|[dz, dy, dx]| {
                        let (x, y, z) = (ix + dx, iy + dy, iz + dz);
                        if x < 0 || y < 0 || z < 0 || x >= side || y >= side || z >= side {
                            return EMPTY;
                        }
                        lookup(morton_encode(x as u32, y as u32, z as u32))
                    })
                })
                .collect()
        })
    }

    /// The 26 same-depth neighbors of the node with `label`.
    pub fn neighbor_indices(&self, depth: usize, label: u64) -> Result<[i32; NEIGHBOR_SLOTS]> {
        if depth > self.max_depth() {
            return Err(CoreError::DepthUnpopulated {
                depth,
                max_depth: self.max_depth(),
            });
        }
        let idx = self.index_of(depth, label).ok_or(CoreError::EmptyNode { depth, label })?;
        Ok(self.neighbors(depth)[idx])
    }

    /// Map the depth-2 nodes into a dense `4 x 4 x 4` grid, zero-filling
    /// empty cells.
    pub fn tree_to_voxel(&self) -> Result<VoxelGrid> {
        if self.max_depth() < VOXEL_DEPTH {
            return Err(CoreError::DepthUnpopulated {
                depth: VOXEL_DEPTH,
                max_depth: self.max_depth(),
            });
        }
        let l = &self.levels[VOXEL_DEPTH];
        let mut grid = VoxelGrid {
            node: [EMPTY; VOXEL_CELLS],
            mass: [0.0; VOXEL_CELLS],
            com: [Vector3::zeros(); VOXEL_CELLS],
        };
        for (i, &code) in l.codes.iter().enumerate() {
            let c = code as usize;
            grid.node[c] = i as i32;
            grid.mass[c] = l.count[i] as f64 / self.total as f64;
            grid.com[c] = l.com[i];
        }
        Ok(grid)
    }

    /// One line per node: `depth label count com_x com_y com_z inv_density`.
    pub fn dump(&self) -> String {
        let mut out = String::from("# depth label count com_x com_y com_z inv_density\n");
        for (d, l) in self.levels.iter().enumerate() {
            for i in 0..l.len() {
                let c = l.com[i];
                let _ = writeln!(
                    out,
                    "{d} {} {} {} {} {} {}",
                    self.label(d, i),
                    l.count[i],
                    c.x,
                    c.y,
                    c.z,
                    l.inv_density[i]
                );
            }
        }
        out
    }
}

const LEAF_SCAN: u32 = 8;

/// Deepest level whose neighbor search uses a dense code table.
const DENSE_LOOKUP_DEPTH: usize = 6;

/// Stable LSD radix sort of `(code << 32) | index` keys on the code bits.
fn radix_sort_by_code(keys: &mut Vec<u64>, bits: usize) {
    const RADIX_BITS: usize = 11;
    let mut buf = vec![0u64; keys.len()];
    let mut shift = 32;
    while shift < 32 + bits {
        let mut counts = [0usize; 1 << RADIX_BITS];
        let mask = (1u64 << RADIX_BITS) - 1;
        for &k in keys.iter() {
            counts[((k >> shift) & mask) as usize] += 1;
        }
        let mut acc = 0;
        for c in counts.iter_mut() {
            let n = *c;
            *c = acc;
            acc += n;
        }
        for &k in keys.iter() {
            let b = ((k >> shift) & mask) as usize;
            buf[counts[b]] = k;
            counts[b] += 1;
        }
        std::mem::swap(keys, &mut buf);
        shift += RADIX_BITS;
    }
}

fn box_distance2(q: &Vector3<f64>, center: &Vector3<f64>, half: f64) -> f64 {
    // Shrunk slightly so rounding never prunes a cell holding a tied point.
    (0..3)
        .map(|a| {
            let e = ((q[a] - center[a]).abs() - half).max(0.0);
            e * e
        })
        .sum::<f64>()
        * (1.0 - 1e-12)
}

/// Compensated sum.
pub fn neumaier_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Nearest-neighbor index over an arbitrary cloud, backed by a tree built on
/// a bounding-box normalized copy.
#[derive(Debug)]
pub struct NearestIndex {
    tree: BhTree,
    info: NormalizationInfo,
    raw: Vec<Vector3<f64>>,
}

impl NearestIndex {
    pub fn new(cloud: &PointCloud) -> Result<Self> {
        let (lo, hi) = cloud.bounds();
        let info = NormalizationInfo::from_bounds(lo, hi).unwrap_or(NormalizationInfo {
            center: lo,
            scale: 1.0,
        });
        let normed = info.apply_cloud(cloud);
        let depth = ((cloud.len() as f64).log(8.0).ceil() as usize).clamp(2, 8);
        let tree = BhTree::build(&normed, depth)?;
        let raw = tree.order.iter().map(|&i| cloud.points[i as usize]).collect();
        Ok(Self { tree, info, raw })
    }

    /// `(index, squared distance)` of the point of the indexed cloud closest
    /// to `q`, with distances evaluated on the raw coordinates.
    pub fn nearest(&self, q: &Vector3<f64>) -> (usize, f64) {
        let qn = self.info.apply(q);
        let scale2 = self.info.scale * self.info.scale;
        let t = &self.tree;
        let mut best = (usize::MAX, f64::INFINITY);
        let mut stack: Vec<(usize, usize, f64)> = vec![(0, 0, 0.0)];
        let max_depth = t.max_depth();
        while let Some((d, i, bound)) = stack.pop() {
            if bound * scale2 > best.1 {
                continue;
            }
            let l = &t.levels[d];
            if d == max_depth || l.count[i] <= LEAF_SCAN {
                let s = l.start[i] as usize;
                for k in s..s + l.count[i] as usize {
                    let d2 = (self.raw[k] - q).norm_squared();
                    let idx = t.order[k] as usize;
                    if d2 < best.1 || (d2 == best.1 && idx < best.0) {
                        best = (idx, d2);
                    }
                }
                continue;
            }
            let mut kids: Vec<(usize, f64)> = l.children[i]
                .iter()
                .filter(|&&c| c != EMPTY)
                .map(|&c| {
                    let c = c as usize;
                    let (center, half) = cell_geometry(t.levels[d + 1].codes[c], d + 1);
                    (c, box_distance2(&qn, &center, half))
                })
                .collect();
            kids.sort_by(|a, b| b.1.total_cmp(&a.1));
            stack.extend(kids.into_iter().map(|(c, b)| (d + 1, c, b)));
        }
        best
    }
}

/// Linear-scan reference for [`NearestIndex::nearest`].
pub fn nearest_linear(points: &[Vector3<f64>], q: &Vector3<f64>) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d2 = (p - q).norm_squared();
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    best
}
