//! Static-obstacle world model.
//!
//! An [`OccupancyGrid`] stores raw occupancy (what was observed or generated)
//! and inflated occupancy (raw dilated by the agent radius). Planning queries
//! use the inflated layer; ground-truth audits use the raw layer. Outside
//! the grid, the inflated layer reads occupied and the raw layer free.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::io::{self, Read, Write};

use log::debug;
use thiserror::Error;

use crate::trajectory::{BSplineTrajectory, Vec3};

const RAW: u8 = 0b01;
const INFLATED: u8 = 0b10;

#[derive(Debug, Error)]
pub enum EnvironmentError {
    #[error("resolution must be positive, got {0}")]
    BadResolution(f64),
    #[error("grid dimensions must be at least 1 per axis, got {0:?}")]
    BadDimensions([usize; 3]),
    #[error("inflation must be non-negative, got {0}")]
    BadInflation(f64),
    #[error("path endpoint {0:?} is occupied or outside the grid")]
    BlockedEndpoint(Vec3),
    #[error("no safe path found between the segment endpoints")]
    NoPath,
    #[error("malformed grid snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Axis-aligned voxel grid of static obstacles.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    resolution: f64,
    origin: Vec3,
    dims: [usize; 3],
    inflation: f64,
    cells: Vec<u8>,
    kernel: Vec<[i64; 3]>,
}

/// Voxel index triple.
pub type VoxelIndex = [usize; 3];

impl OccupancyGrid {
    pub fn new(
        resolution: f64,
        origin: Vec3,
        dims: [usize; 3],
        inflation: f64,
    ) -> Result<Self, EnvironmentError> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(EnvironmentError::BadResolution(resolution));
        }
        if dims.contains(&0) {
            return Err(EnvironmentError::BadDimensions(dims));
        }
        if !(inflation >= 0.0 && inflation.is_finite()) {
            return Err(EnvironmentError::BadInflation(inflation));
        }
        Ok(Self {
            resolution,
            origin,
            dims,
            inflation,
            cells: vec![0; dims[0] * dims[1] * dims[2]],
            kernel: inflation_kernel(resolution, inflation),
        })
    }

    /// Grid covering the box `[min, max]`.
    pub fn from_bounds(
        min: Vec3,
        max: Vec3,
        resolution: f64,
        inflation: f64,
    ) -> Result<Self, EnvironmentError> {
        let extent = max - min;
        let dims = [0, 1, 2].map(|k| ((extent[k] / resolution).ceil().max(1.0)) as usize);
        Self::new(resolution, min, dims, inflation)
    }

    /// Empty grid with the same geometry.
    pub fn empty_like(&self) -> Self {
        Self {
            cells: vec![0; self.cells.len()],
            ..self.clone()
        }
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn inflation(&self) -> f64 {
        self.inflation
    }

    pub fn max_corner(&self) -> Vec3 {
        self.origin + Vec3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * self.resolution
    }

    pub fn voxel_count(&self) -> usize {
        self.cells.len()
    }

    pub fn index_of(&self, p: &Vec3) -> Option<VoxelIndex> {
        let mut idx = [0usize; 3];
        for k in 0..3 {
            let f = ((p[k] - self.origin[k]) / self.resolution).floor();
            if !(f >= 0.0 && f < self.dims[k] as f64) {
                return None;
            }
            idx[k] = f as usize;
        }
        Some(idx)
    }

    pub fn in_bounds(&self, p: &Vec3) -> bool {
        self.index_of(p).is_some()
    }

    pub fn linear(&self, idx: VoxelIndex) -> usize {
        (idx[2] * self.dims[1] + idx[1]) * self.dims[0] + idx[0]
    }

    pub fn unlinear(&self, lin: usize) -> VoxelIndex {
        let x = lin % self.dims[0];
        let y = (lin / self.dims[0]) % self.dims[1];
        let z = lin / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    pub fn voxel_center(&self, idx: VoxelIndex) -> Vec3 {
        self.origin
            + Vec3::new(
                idx[0] as f64 + 0.5,
                idx[1] as f64 + 0.5,
                idx[2] as f64 + 0.5,
            ) * self.resolution
    }

    fn voxel_min(&self, idx: VoxelIndex) -> Vec3 {
        self.origin + Vec3::new(idx[0] as f64, idx[1] as f64, idx[2] as f64) * self.resolution
    }

    fn offset(&self, idx: VoxelIndex, d: [i64; 3]) -> Option<VoxelIndex> {
        let mut out = [0usize; 3];
        for k in 0..3 {
            let v = idx[k] as i64 + d[k];
            if v < 0 || v >= self.dims[k] as i64 {
                return None;
            }
            out[k] = v as usize;
        }
        Some(out)
    }

    /// Marks a voxel as raw-occupied and dilates it into the inflated layer.
    pub fn set_voxel(&mut self, idx: VoxelIndex) {
        let lin = self.linear(idx);
        if self.cells[lin] & RAW != 0 {
            return;
        }
        self.cells[lin] |= RAW;
        for i in 0..self.kernel.len() {
            if let Some(n) = self.offset(idx, self.kernel[i]) {
                let l = self.linear(n);
                self.cells[l] |= INFLATED;
            }
        }
    }

    /// Marks the voxel containing `p`; returns false when `p` is out of bounds.
    pub fn set_occupied(&mut self, p: &Vec3) -> bool {
        match self.index_of(p) {
            Some(idx) => {
                self.set_voxel(idx);
                true
            }
            None => false,
        }
    }

    /// Marks every voxel whose center lies inside the vertical cylinder.
    pub fn add_cylinder(&mut self, center_xy: (f64, f64), radius: f64, z_min: f64, z_max: f64) {
        let lo = Vec3::new(center_xy.0 - radius, center_xy.1 - radius, z_min);
        let hi = Vec3::new(center_xy.0 + radius, center_xy.1 + radius, z_max);
        self.for_each_center_in_box(lo, hi, |grid, idx, c| {
            let dx = c.x - center_xy.0;
            let dy = c.y - center_xy.1;
            if dx * dx + dy * dy <= radius * radius {
                grid.set_voxel(idx);
            }
        });
    }

    /// Marks every voxel whose center lies inside the axis-aligned box.
    pub fn add_box(&mut self, min: Vec3, max: Vec3) {
        self.for_each_center_in_box(min, max, |grid, idx, _| grid.set_voxel(idx));
    }

    fn for_each_center_in_box(
        &mut self,
        lo: Vec3,
        hi: Vec3,
        mut f: impl FnMut(&mut Self, VoxelIndex, Vec3),
    ) {
        let mut range = [(0usize, 0usize); 3];
        for k in 0..3 {
            let a = ((lo[k] - self.origin[k]) / self.resolution - 0.5).ceil().max(0.0);
            let b = ((hi[k] - self.origin[k]) / self.resolution - 0.5)
                .floor()
                .min(self.dims[k] as f64 - 1.0);
            if b < a {
                return;
            }
            range[k] = (a as usize, b as usize);
        }
        for z in range[2].0..=range[2].1 {
            for y in range[1].0..=range[1].1 {
                for x in range[0].0..=range[0].1 {
                    let idx = [x, y, z];
                    let c = self.voxel_center(idx);
                    f(self, idx, c);
                }
            }
        }
    }

    pub fn voxel_occupied(&self, idx: VoxelIndex) -> bool {
        self.cells[self.linear(idx)] & INFLATED != 0
    }

    pub fn voxel_raw(&self, idx: VoxelIndex) -> bool {
        self.cells[self.linear(idx)] & RAW != 0
    }

    /// Inflated occupancy at `p`; out-of-bounds is occupied.
    pub fn is_occupied(&self, p: &Vec3) -> bool {
        self.index_of(p).is_none_or(|idx| self.voxel_occupied(idx))
    }

    /// Raw (un-inflated) occupancy at `p`; out-of-bounds is free.
    pub fn is_raw_occupied(&self, p: &Vec3) -> bool {
        self.index_of(p).is_some_and(|idx| self.voxel_raw(idx))
    }

    pub fn raw_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c & RAW != 0).count()
    }

    pub fn inflated_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c & INFLATED != 0).count()
    }

    pub fn raw_voxels(&self) -> impl Iterator<Item = VoxelIndex> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c & RAW != 0)
            .map(|(i, _)| self.unlinear(i))
    }

    /// Copies every raw voxel of `other` (same geometry) into this grid.
    pub fn merge_raw_from(&mut self, other: &OccupancyGrid) {
        for idx in other.raw_voxels().collect::<Vec<_>>() {
            self.set_voxel(idx);
        }
    }

    /// Whether the straight segment `a -> b` stays in free (inflated) space.
    pub fn segment_is_free(&self, a: &Vec3, b: &Vec3) -> bool {
        let len = (b - a).norm();
        let n = (len / (0.25 * self.resolution)).ceil().max(1.0) as usize;
        (0..=n).all(|i| !self.is_occupied(&(a + (b - a) * (i as f64 / n as f64))))
    }

    /// Distance from `p` to the closest raw-occupied voxel box within
    /// `search_radius`, or `None` if there is none that close.
    pub fn distance_to_raw(&self, p: &Vec3, search_radius: f64) -> Option<f64> {
        let r = (search_radius / self.resolution).ceil() as i64 + 1;
        let center = [0, 1, 2].map(|k| ((p[k] - self.origin[k]) / self.resolution).floor() as i64);
        let mut best: Option<f64> = None;
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let c = [center[0] + dx, center[1] + dy, center[2] + dz];
                    if (0..3).any(|k| c[k] < 0 || c[k] >= self.dims[k] as i64) {
                        continue;
                    }
                    let idx = [c[0] as usize, c[1] as usize, c[2] as usize];
                    if !self.voxel_raw(idx) {
                        continue;
                    }
                    let lo = self.voxel_min(idx);
                    let mut d2 = 0.0;
                    for k in 0..3 {
                        let g = (lo[k] - p[k]).max(p[k] - (lo[k] + self.resolution)).max(0.0);
                        d2 += g * g;
                    }
                    let d = d2.sqrt();
                    if d <= search_radius && best.is_none_or(|b| d < b) {
                        best = Some(d);
                    }
                }
            }
        }
        best
    }

    /// Distance along the unit ray `dir` from `origin` to the first raw
    /// occupied voxel, up to `max_dist`. Voxel traversal (Amanatides-Woo).
    pub fn raycast(&self, origin: &Vec3, dir: &Vec3, max_dist: f64) -> Option<f64> {
        let (mut t, t_exit) = self.clip_ray(origin, dir, max_dist)?;
        let start = origin + dir * (t + 1e-9);
        let mut idx = [0i64; 3];
        for k in 0..3 {
            let f = ((start[k] - self.origin[k]) / self.resolution).floor();
            idx[k] = (f as i64).clamp(0, self.dims[k] as i64 - 1);
        }
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for k in 0..3 {
            if dir[k] > 0.0 {
                step[k] = 1;
                let boundary = self.origin[k] + (idx[k] + 1) as f64 * self.resolution;
                t_max[k] = (boundary - origin[k]) / dir[k];
                t_delta[k] = self.resolution / dir[k];
            } else if dir[k] < 0.0 {
                step[k] = -1;
                let boundary = self.origin[k] + idx[k] as f64 * self.resolution;
                t_max[k] = (boundary - origin[k]) / dir[k];
                t_delta[k] = -self.resolution / dir[k];
            }
        }
        loop {
            let v = [idx[0] as usize, idx[1] as usize, idx[2] as usize];
            if self.voxel_raw(v) {
                return Some(t);
            }
            let k = if t_max[0] < t_max[1] {
                if t_max[0] < t_max[2] { 0 } else { 2 }
            } else if t_max[1] < t_max[2] {
                1
            } else {
                2
            };
            t = t_max[k];
            if t > t_exit {
                return None;
            }
            idx[k] += step[k];
            if idx[k] < 0 || idx[k] >= self.dims[k] as i64 {
                return None;
            }
            t_max[k] += t_delta[k];
        }
    }

    /// Parametric interval `[t_enter, t_exit]` of the ray inside the grid box.
    fn clip_ray(&self, origin: &Vec3, dir: &Vec3, max_dist: f64) -> Option<(f64, f64)> {
        let lo = self.origin;
        let hi = self.max_corner();
        let mut t0: f64 = 0.0;
        let mut t1 = max_dist;
        for k in 0..3 {
            if dir[k].abs() < 1e-15 {
                if origin[k] < lo[k] || origin[k] >= hi[k] {
                    return None;
                }
            } else {
                let a = (lo[k] - origin[k]) / dir[k];
                let b = (hi[k] - origin[k]) / dir[k];
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
        }
        (t0 <= t1).then_some((t0, t1))
    }

    /// Nearest free voxel center to `p` within `max_radius`, by expanding shells.
    pub fn nearest_free(&self, p: &Vec3, max_radius: f64) -> Option<Vec3> {
        if !self.is_occupied(p) {
            return Some(*p);
        }
        let center = self.index_of(p)?;
        let max_r = (max_radius / self.resolution).ceil() as i64;
        for r in 1..=max_r {
            let mut best: Option<(f64, usize, Vec3)> = None;
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let Some(n) = self.offset(center, [dx, dy, dz]) else {
                            continue;
                        };
                        if self.voxel_occupied(n) {
                            continue;
                        }
                        let c = self.voxel_center(n);
                        let d = (c - p).norm();
                        let lin = self.linear(n);
                        if best.is_none_or(|(bd, bl, _)| d < bd || (d == bd && lin < bl)) {
                            best = Some((d, lin, c));
                        }
                    }
                }
            }
            if let Some((_, _, c)) = best {
                return Some(c);
            }
        }
        None
    }
}

/// Offsets of voxels whose box lies closer than `inflation` to the central box.
fn inflation_kernel(resolution: f64, inflation: f64) -> Vec<[i64; 3]> {
    if inflation <= 0.0 {
        return vec![[0, 0, 0]];
    }
    let r = (inflation / resolution).ceil() as i64 + 1;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                let gap = |d: i64| ((d.abs() - 1).max(0)) as f64 * resolution;
                let dist2 = gap(dx).powi(2) + gap(dy).powi(2) + gap(dz).powi(2);
                if dist2 < inflation * inflation {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Safe path search

/// Result of a grid search between two free points.
#[derive(Debug, Clone)]
pub struct SafePath {
    /// Voxels visited by the search path, start to goal.
    pub voxels: Vec<VoxelIndex>,
    /// Length of the voxel path under 26-connectivity, meters.
    pub graph_length: f64,
    /// Line-of-sight simplified polyline from `a` to `b`.
    pub polyline: Vec<Vec3>,
}

impl SafePath {
    pub fn polyline_length(&self) -> f64 {
        polyline_length(&self.polyline)
    }
}

pub fn polyline_length(pts: &[Vec3]) -> f64 {
    pts.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Point at arc-length fraction `frac` in `[0, 1]` along a polyline.
pub fn polyline_point_at_fraction(pts: &[Vec3], frac: f64) -> Vec3 {
    let total = polyline_length(pts);
    if pts.len() < 2 || total <= 0.0 {
        return pts[0];
    }
    let mut remaining = frac.clamp(0.0, 1.0) * total;
    for w in pts.windows(2) {
        let len = (w[1] - w[0]).norm();
        if remaining <= len {
            return if len > 0.0 {
                w[0] + (w[1] - w[0]) * (remaining / len)
            } else {
                w[0]
            };
        }
        remaining -= len;
    }
    *pts.last().unwrap()
}

#[derive(Copy, Clone, PartialEq)]
struct OpenNode {
    f: f64,
    lin: usize,
}

impl Eq for OpenNode {}

impl Ord for OpenNode {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on (f, linear index).
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.lin.cmp(&self.lin))
    }
}

impl PartialOrd for OpenNode {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Expansion budget of one A* query.
pub const MAX_SEARCH_EXPANSIONS: usize = 400_000;

/// A* over the inflated grid with 26-connectivity and a Euclidean heuristic.
///
/// Ties in the open list are broken by lower linear voxel index, so results
/// are deterministic.
pub fn find_safe_path(
    grid: &OccupancyGrid,
    a: &Vec3,
    b: &Vec3,
) -> Result<SafePath, EnvironmentError> {
    if grid.is_occupied(a) {
        return Err(EnvironmentError::BlockedEndpoint(*a));
    }
    if grid.is_occupied(b) {
        return Err(EnvironmentError::BlockedEndpoint(*b));
    }
    let start = clamp_index(grid, a);
    let goal = clamp_index(grid, b);
    if grid.voxel_occupied(start) || grid.voxel_occupied(goal) {
        return Err(EnvironmentError::NoPath);
    }
    let voxels = astar(grid, start, goal).ok_or(EnvironmentError::NoPath)?;
    let graph_length = voxel_path_length(grid, &voxels);
    let mut raw: Vec<Vec3> = Vec::with_capacity(voxels.len() + 2);
    raw.push(*a);
    raw.extend(voxels.iter().skip(1).take(voxels.len().saturating_sub(2)).map(|v| grid.voxel_center(*v)));
    raw.push(*b);
    Ok(SafePath {
        voxels,
        graph_length,
        polyline: shortcut(grid, &raw),
    })
}

fn clamp_index(grid: &OccupancyGrid, p: &Vec3) -> VoxelIndex {
    let dims = grid.dims();
    [0, 1, 2].map(|k| {
        let f = ((p[k] - grid.origin()[k]) / grid.resolution()).floor();
        (f.max(0.0) as usize).min(dims[k] - 1)
    })
}

fn voxel_path_length(grid: &OccupancyGrid, voxels: &[VoxelIndex]) -> f64 {
    voxels
        .windows(2)
        .map(|w| {
            let d2: i64 = (0..3).map(|k| (w[1][k] as i64 - w[0][k] as i64).pow(2)).sum();
            (d2 as f64).sqrt() * grid.resolution()
        })
        .sum()
}

fn astar(grid: &OccupancyGrid, start: VoxelIndex, goal: VoxelIndex) -> Option<Vec<VoxelIndex>> {
    let res = grid.resolution();
    let goal_c = grid.voxel_center(goal);
    let h = |v: VoxelIndex| (grid.voxel_center(v) - goal_c).norm();
    let start_lin = grid.linear(start);
    let goal_lin = grid.linear(goal);
    let mut g: HashMap<usize, f64> = HashMap::new();
    let mut parent: HashMap<usize, usize> = HashMap::new();
    let mut closed: HashMap<usize, ()> = HashMap::new();
    let mut open = BinaryHeap::new();
    g.insert(start_lin, 0.0);
    open.push(OpenNode { f: h(start), lin: start_lin });
    let mut expansions = 0;
    while let Some(OpenNode { lin, .. }) = open.pop() {
        if closed.insert(lin, ()).is_some() {
            continue;
        }
        if lin == goal_lin {
            let mut path = vec![grid.unlinear(lin)];
            let mut cur = lin;
            while let Some(&p) = parent.get(&cur) {
                path.push(grid.unlinear(p));
                cur = p;
            }
            path.reverse();
            return Some(path);
        }
        expansions += 1;
        if expansions > MAX_SEARCH_EXPANSIONS {
            debug!("safe path search exhausted its expansion budget");
            return None;
        }
        let cur = grid.unlinear(lin);
        let g_cur = g[&lin];
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let Some(n) = grid.offset(cur, [dx, dy, dz]) else {
                        continue;
                    };
                    if grid.voxel_occupied(n) {
                        continue;
                    }
                    let nl = grid.linear(n);
                    if closed.contains_key(&nl) {
                        continue;
                    }
                    let step = (((dx * dx + dy * dy + dz * dz) as f64).sqrt()) * res;
                    let cand = g_cur + step;
                    if g.get(&nl).is_none_or(|&old| cand < old) {
                        g.insert(nl, cand);
                        parent.insert(nl, lin);
                        open.push(OpenNode { f: cand + h(n), lin: nl });
                    }
                }
            }
        }
    }
    None
}

/// Greedy line-of-sight pruning: from each kept vertex jump to the furthest
/// vertex still visible.
fn shortcut(grid: &OccupancyGrid, pts: &[Vec3]) -> Vec<Vec3> {
    if pts.len() <= 2 {
        return pts.to_vec();
    }
    let mut out = vec![pts[0]];
    let mut i = 0;
    while i < pts.len() - 1 {
        let mut j = pts.len() - 1;
        while j > i + 1 && !grid.segment_is_free(&pts[i], &pts[j]) {
            j -= 1;
        }
        out.push(pts[j]);
        i = j;
    }
    out
}

// ---------------------------------------------------------------------------
// {p, v} pairs

/// Anchor on an obstacle surface plus outward unit direction, attached to one
/// control point. The control point's obstacle distance is `(Q - p) . v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PvPair {
    pub anchor: Vec3,
    pub direction: Vec3,
    pub owner_index: usize,
    pub obstacle_id: usize,
}

impl PvPair {
    pub fn distance(&self, q: &Vec3) -> f64 {
        distance_to_obstacle(self, q)
    }
}

/// Signed planar distance of `q` to the pair's obstacle; positive is safe.
pub fn distance_to_obstacle(pair: &PvPair, q: &Vec3) -> f64 {
    (q - pair.anchor).dot(&pair.direction)
}

/// Anchor search configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorSearch {
    /// March step, meters.
    pub step: f64,
    /// Give up after marching this far, meters.
    pub max_distance: f64,
}

impl AnchorSearch {
    pub fn for_grid(grid: &OccupancyGrid) -> Self {
        Self {
            step: grid.resolution() / 2.0,
            max_distance: 5.0,
        }
    }
}

/// Marches from `from` along unit `dir` until the first occupied-to-free
/// transition; returns the boundary point refined by bisection.
///
/// When `from` is free the march first has to enter an obstacle. Outside
/// the grid counts as occupied. Returns `None` if the march exceeds the
/// configured distance before exiting an obstacle.
pub fn march_to_exit(
    grid: &OccupancyGrid,
    from: &Vec3,
    dir: &Vec3,
    search: &AnchorSearch,
) -> Option<Vec3> {
    let mut inside = grid.is_occupied(from);
    let mut last_occ = *from;
    let n = (search.max_distance / search.step).ceil() as usize;
    for k in 1..=n {
        let p = from + dir * (k as f64 * search.step);
        let occ = grid.is_occupied(&p);
        if occ {
            inside = true;
            last_occ = p;
        } else if inside {
            // Boundary lies between last_occ and p.
            let (mut lo, mut hi) = (last_occ, p);
            for _ in 0..20 {
                let mid = (lo + hi) * 0.5;
                if grid.is_occupied(&mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(hi);
        }
    }
    None
}

/// Builds a pair for control point `q` (index `owner`) with direction toward
/// `target`. `None` when `q` is free, the direction is degenerate, or the
/// anchor march fails.
pub fn pair_from_probe(
    grid: &OccupancyGrid,
    q: &Vec3,
    target: &Vec3,
    owner: usize,
    search: &AnchorSearch,
) -> Option<PvPair> {
    if !grid.is_occupied(q) {
        return None;
    }
    let d = target - q;
    let len = d.norm();
    if len < 1e-9 {
        return None;
    }
    let dir = d / len;
    match march_to_exit(grid, q, &dir, search) {
        Some(anchor) => Some(PvPair {
            anchor,
            direction: dir,
            owner_index: owner,
            obstacle_id: 0,
        }),
        None => {
            debug!("anchor march from control point {owner} did not leave the obstacle");
            None
        }
    }
}

/// Pairs for every in-collision control point influencing `segment`.
///
/// Each colliding control point is matched to the point on the safe path
/// `gamma` at the same normalized arc-length fraction, measured along the
/// polyline `gamma[0] -> colliding control points -> gamma[last]`.
pub fn generate_pv_pairs(
    grid: &OccupancyGrid,
    traj: &BSplineTrajectory,
    segment: &CollidingSegment,
    gamma: &[Vec3],
    search: &AnchorSearch,
) -> Vec<PvPair> {
    if gamma.len() < 2 {
        return Vec::new();
    }
    let pts = traj.control_points();
    let (lo, hi) = segment.control_index_range(traj);
    let colliding: Vec<usize> = (lo..=hi).filter(|&i| grid.is_occupied(&pts[i])).collect();
    if colliding.is_empty() {
        return Vec::new();
    }
    let mut chain = Vec::with_capacity(colliding.len() + 2);
    chain.push(gamma[0]);
    chain.extend(colliding.iter().map(|&i| pts[i]));
    chain.push(*gamma.last().unwrap());
    let total = polyline_length(&chain);
    let mut acc = 0.0;
    let mut out = Vec::new();
    for (k, &i) in colliding.iter().enumerate() {
        acc += (chain[k + 1] - chain[k]).norm();
        let frac = if total > 0.0 {
            acc / total
        } else {
            (k + 1) as f64 / (colliding.len() + 1) as f64
        };
        let target = polyline_point_at_fraction(gamma, frac);
        if let Some(pair) = pair_from_probe(grid, &pts[i], &target, i, search) {
            out.push(pair);
        }
    }
    out
}

/// Adds pairs to `set`, numbering them per control point and skipping
/// near-duplicates of pairs already attached to the same control point.
pub fn merge_pairs(set: &mut Vec<PvPair>, new_pairs: impl IntoIterator<Item = PvPair>, resolution: f64) {
    for mut p in new_pairs {
        let same_owner = set.iter().filter(|e| e.owner_index == p.owner_index);
        let mut count = 0;
        let mut duplicate = false;
        for e in same_owner {
            count += 1;
            if (e.anchor - p.anchor).norm() < resolution && e.direction.dot(&p.direction) > 0.9 {
                duplicate = true;
            }
        }
        if !duplicate {
            p.obstacle_id = count;
            set.push(p);
        }
    }
}

// ---------------------------------------------------------------------------
// Trajectory collision checks

/// Maximal time interval whose samples are all in collision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollidingSegment {
    pub t_start: f64,
    pub t_end: f64,
    /// Last free sample before the interval, if any.
    pub before: Option<(f64, Vec3)>,
    /// First free sample after the interval, if any.
    pub after: Option<(f64, Vec3)>,
}

impl CollidingSegment {
    /// Inclusive range of control point indices influencing the interval.
    pub fn control_index_range(&self, traj: &BSplineTrajectory) -> (usize, usize) {
        let (lo, _) = traj.basis_weights_clamped(self.t_start);
        let (hi, _) = traj.basis_weights_clamped(self.t_end);
        (lo, (hi + traj.degree()).min(traj.control_points().len() - 1))
    }
}

/// Sampling step for collision checks: at most one grid cell of travel.
pub fn collision_sample_step(traj: &BSplineTrajectory, spacing: f64) -> f64 {
    let speed = traj.max_control_speed().max(1e-3);
    (spacing / speed).clamp(traj.duration() / 20_000.0, traj.knot_interval())
}

/// All colliding intervals of `traj` in `[from, end]`, sampled so that
/// consecutive samples are at most `spacing` meters apart.
pub fn colliding_segments_with_spacing(
    grid: &OccupancyGrid,
    traj: &BSplineTrajectory,
    from: f64,
    spacing: f64,
) -> Vec<CollidingSegment> {
    let step = collision_sample_step(traj, spacing);
    let samples = traj.sample(from, traj.end_time(), step);
    let mut out = Vec::new();
    let mut i = 0;
    while i < samples.len() {
        if grid.is_occupied(&samples[i].1) {
            let start = i;
            while i + 1 < samples.len() && grid.is_occupied(&samples[i + 1].1) {
                i += 1;
            }
            out.push(CollidingSegment {
                t_start: samples[start].0,
                t_end: samples[i].0,
                before: start.checked_sub(1).map(|j| samples[j]),
                after: samples.get(i + 1).copied(),
            });
        }
        i += 1;
    }
    out
}

pub fn colliding_segments(grid: &OccupancyGrid, traj: &BSplineTrajectory) -> Vec<CollidingSegment> {
    colliding_segments_with_spacing(grid, traj, traj.start_time(), grid.resolution() / 2.0)
}

/// Earliest colliding interval, `(t_start, t_end)`.
pub fn first_colliding_segment(grid: &OccupancyGrid, traj: &BSplineTrajectory) -> Option<(f64, f64)> {
    colliding_segments(grid, traj)
        .first()
        .map(|s| (s.t_start, s.t_end))
}

/// Whether any sample of `traj` after `from` (spaced at most `spacing`) hits
/// the inflated grid.
pub fn trajectory_collides(grid: &OccupancyGrid, traj: &BSplineTrajectory, from: f64, spacing: f64) -> bool {
    let step = collision_sample_step(traj, spacing);
    traj.sample(from, traj.end_time(), step)
        .iter()
        .any(|(_, p)| grid.is_occupied(p))
}

// ---------------------------------------------------------------------------
// Snapshots

const SNAPSHOT_MAGIC: &[u8; 4] = b"OGRD";
const SNAPSHOT_VERSION: u8 = 1;

impl OccupancyGrid {
    /// Writes header (resolution, inflation, origin, dims) followed by
    /// run-length-encoded raw occupancy: a run count, then alternating
    /// free/occupied run lengths starting with free. Little-endian.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<(), EnvironmentError> {
        let mut runs: Vec<u32> = Vec::new();
        let mut current = false;
        let mut len: u32 = 0;
        for &c in &self.cells {
            let occ = c & RAW != 0;
            if occ != current {
                runs.push(len);
                current = occ;
                len = 0;
            }
            len += 1;
        }
        runs.push(len);
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&[SNAPSHOT_VERSION])?;
        w.write_all(&self.resolution.to_le_bytes())?;
        w.write_all(&self.inflation.to_le_bytes())?;
        for k in 0..3 {
            w.write_all(&self.origin[k].to_le_bytes())?;
        }
        for d in self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&(runs.len() as u32).to_le_bytes())?;
        for r in runs {
            w.write_all(&r.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self, EnvironmentError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let bad = |m: &str| EnvironmentError::Snapshot(m.to_string());
        if buf.len() < 4 + 1 + 8 * 5 + 4 * 4 || &buf[..4] != SNAPSHOT_MAGIC {
            return Err(bad("missing header"));
        }
        if buf[4] != SNAPSHOT_VERSION {
            return Err(bad("unsupported version"));
        }
        let mut off = 5;
        let mut f64_next = || {
            let v = f64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
            off += 8;
            v
        };
        let resolution = f64_next();
        let inflation = f64_next();
        let origin = Vec3::new(f64_next(), f64_next(), f64_next());
        let u32_at = |o: usize| -> Option<u32> {
            buf.get(o..o + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        };
        let dims = [
            u32_at(off).unwrap() as usize,
            u32_at(off + 4).unwrap() as usize,
            u32_at(off + 8).unwrap() as usize,
        ];
        let run_count = u32_at(off + 12).unwrap() as usize;
        off += 16;
        let mut grid = Self::new(resolution, origin, dims, inflation)?;
        let mut pos = 0usize;
        let mut occ = false;
        for i in 0..run_count {
            let len = u32_at(off + 4 * i).ok_or_else(|| bad("truncated runs"))? as usize;
            if pos + len > grid.cells.len() {
                return Err(bad("runs exceed grid size"));
            }
            if occ {
                for lin in pos..pos + len {
                    let idx = grid.unlinear(lin);
                    grid.set_voxel(idx);
                }
            }
            pos += len;
            occ = !occ;
        }
        if pos != grid.cells.len() {
            return Err(bad("runs do not cover the grid"));
        }
        Ok(grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid(dims: [usize; 3], inflation: f64) -> OccupancyGrid {
        OccupancyGrid::new(0.1, Vec3::zeros(), dims, inflation).unwrap()
    }

    #[test]
    fn construction_validates() {
        assert!(OccupancyGrid::new(0.0, Vec3::zeros(), [1, 1, 1], 0.0).is_err());
        assert!(OccupancyGrid::new(0.1, Vec3::zeros(), [1, 0, 1], 0.0).is_err());
        assert!(OccupancyGrid::new(0.1, Vec3::zeros(), [1, 1, 1], -0.1).is_err());
    }

    #[test]
    fn empty_grid_is_free_inside() {
        let g = grid([10, 10, 10], 0.2);
        for p in [Vec3::new(0.5, 0.5, 0.5), Vec3::new(0.0, 0.99, 0.0)] {
            assert!(!g.is_occupied(&p));
        }
        for p in [Vec3::new(-3.0, 1.0, 0.0), Vec3::new(100.0, 0.0, 0.0)] {
            assert!(g.is_occupied(&p));
            assert!(!g.is_raw_occupied(&p));
        }
    }

    #[test]
    fn occupied_voxel_and_out_of_bounds() {
        let mut g = grid([10, 10, 10], 0.0);
        g.set_occupied(&Vec3::new(0.05, 0.05, 0.05));
        assert!(g.is_occupied(&Vec3::new(0.01, 0.09, 0.02)));
        assert!(!g.is_occupied(&Vec3::new(0.11, 0.05, 0.05)));
        assert!(g.is_occupied(&Vec3::new(-0.01, 0.05, 0.05)));
        assert!(!g.is_raw_occupied(&Vec3::new(-0.01, 0.05, 0.05)));
    }

    #[test]
    fn inflation_covers_points_just_inside_the_radius() {
        let infl = 0.23;
        let mut g = OccupancyGrid::new(0.1, Vec3::new(-1.0, -1.0, -1.0), [20, 20, 20], infl).unwrap();
        g.set_occupied(&Vec3::new(0.05, 0.05, 0.05));
        // +x face of the voxel [0, 0.1]^3 sits at x = 0.1.
        let eps = 1e-3;
        assert!(g.is_occupied(&Vec3::new(0.1 + infl - eps, 0.05, 0.05)));
        // Along a diagonal from the box corner.
        let diag = Vec3::new(1.0, 1.0, 0.0).normalize();
        assert!(g.is_occupied(&(Vec3::new(0.1, 0.1, 0.05) + diag * (infl - eps))));
        // Raw occupancy is contained in inflated occupancy.
        for idx in g.raw_voxels().collect::<Vec<_>>() {
            assert!(g.voxel_occupied(idx));
        }
        assert!(!g.is_raw_occupied(&Vec3::new(0.25, 0.05, 0.05)));
        assert!(!g.is_occupied(&Vec3::new(0.1 + infl + 0.11, 0.05, 0.05)));
    }

    #[test]
    fn distance_is_signed_and_linear() {
        let pair = PvPair {
            anchor: Vec3::zeros(),
            direction: Vec3::x(),
            owner_index: 0,
            obstacle_id: 0,
        };
        assert_eq!(distance_to_obstacle(&pair, &Vec3::new(1.0, 0.0, 0.0)), 1.0);
        assert_eq!(distance_to_obstacle(&pair, &Vec3::zeros()), 0.0);
        let up = PvPair { direction: Vec3::z(), ..pair };
        assert_eq!(distance_to_obstacle(&up, &Vec3::new(0.0, 0.0, -2.0)), -2.0);
        let q = Vec3::new(0.3, -0.2, 0.9);
        for alpha in [-1.5, 0.0, 0.25, 3.0] {
            assert_relative_eq!(
                distance_to_obstacle(&up, &(q + up.direction * alpha)),
                distance_to_obstacle(&up, &q) + alpha,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn straight_path_in_empty_grid() {
        let g = grid([30, 30, 10], 0.0);
        let a = Vec3::new(0.25, 0.25, 0.5);
        let b = Vec3::new(2.75, 1.75, 0.5);
        let path = find_safe_path(&g, &a, &b).unwrap();
        assert_eq!(path.polyline, vec![a, b]);
    }

    #[test]
    fn path_through_wall_gap() {
        // Wall at x in [1.0, 1.2] spanning y in [0, 3], with a gap at y in [2.0, 2.4].
        let mut g = grid([30, 30, 3], 0.0);
        g.add_box(Vec3::new(1.0, 0.0, 0.0), Vec3::new(1.2, 2.0, 0.3));
        g.add_box(Vec3::new(1.0, 2.4, 0.0), Vec3::new(1.2, 3.0, 0.3));
        let a = Vec3::new(0.25, 0.55, 0.15);
        let b = Vec3::new(2.55, 0.55, 0.15);
        let path = find_safe_path(&g, &a, &b).unwrap();
        assert!(path.voxels.iter().all(|v| !g.voxel_occupied(*v)));
        let crossing = path
            .voxels
            .iter()
            .find(|v| v[0] == 11)
            .expect("path crosses the wall plane");
        assert!((20..24).contains(&crossing[1]));
        for w in path.polyline.windows(2) {
            assert!(g.segment_is_free(&w[0], &w[1]));
        }
    }

    #[test]
    fn blocked_endpoint_and_enclosed_goal() {
        let mut g = grid([10, 10, 10], 0.0);
        g.add_box(Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.3, 0.3, 0.3));
        assert!(matches!(
            find_safe_path(&g, &Vec3::new(0.15, 0.15, 0.15), &Vec3::new(0.85, 0.85, 0.85)),
            Err(EnvironmentError::BlockedEndpoint(_))
        ));
        // Hollow shell around the goal.
        let mut g = grid([10, 10, 10], 0.0);
        g.add_box(Vec3::new(0.3, 0.3, 0.3), Vec3::new(0.7, 0.7, 0.7));
        let inner = [4, 4, 4];
        let lin = g.linear(inner);
        g.cells[lin] = 0;
        assert!(matches!(
            find_safe_path(&g, &Vec3::new(0.05, 0.05, 0.05), &g.voxel_center(inner)),
            Err(EnvironmentError::NoPath)
        ));
    }

    #[test]
    fn pair_on_box_obstacle_points_up() {
        // Box obstacle z in [0, 1], half-height 0.5 around its center.
        let mut g = OccupancyGrid::new(0.1, Vec3::new(-2.0, -2.0, -1.0), [40, 40, 40], 0.0).unwrap();
        g.add_box(Vec3::new(-0.5, -0.5, 0.0), Vec3::new(0.5, 0.5, 1.0));
        let q = Vec3::new(0.0, 0.0, 0.5);
        let pair = pair_from_probe(&g, &q, &Vec3::new(0.0, 0.0, 2.0), 4, &AnchorSearch::for_grid(&g)).unwrap();
        assert_relative_eq!(pair.direction, Vec3::z(), epsilon = 1e-12);
        assert!((pair.anchor.z - 1.0).abs() < 0.1);
        assert!((distance_to_obstacle(&pair, &q) + 0.5).abs() < 0.1);
        assert_eq!(pair.owner_index, 4);
        assert!(pair_from_probe(&g, &Vec3::new(1.5, 0.0, 0.5), &Vec3::zeros(), 0, &AnchorSearch::for_grid(&g)).is_none());
    }

    #[test]
    fn march_that_leaves_the_grid_fails() {
        let mut g = grid([10, 10, 10], 0.0);
        g.add_box(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 0.5));
        let search = AnchorSearch::for_grid(&g);
        assert!(march_to_exit(&g, &Vec3::new(0.5, 0.5, 0.25), &-Vec3::z(), &search).is_none());
        assert!(march_to_exit(&g, &Vec3::new(0.5, 0.5, 0.25), &Vec3::z(), &search).is_some());
    }

    fn straight(from: Vec3, to: Vec3, n: usize, dt: f64) -> BSplineTrajectory {
        let pts = (0..n).map(|i| from + (to - from) * (i as f64 / (n - 1) as f64)).collect();
        BSplineTrajectory::new(3, pts, dt, 0.0).unwrap()
    }

    #[test]
    fn colliding_segment_detection() {
        let mut g = OccupancyGrid::new(0.1, Vec3::new(-1.0, -2.0, -1.0), [60, 40, 20], 0.0).unwrap();
        let traj = straight(Vec3::new(0.0, 0.0, 0.0), Vec3::new(4.0, 0.0, 0.0), 10, 0.5);
        assert_eq!(first_colliding_segment(&g, &traj), None);
        g.add_box(Vec3::new(1.9, -1.0, -0.5), Vec3::new(2.1, 1.0, 0.5));
        let (t0, t1) = first_colliding_segment(&g, &traj).unwrap();
        assert!(t0 < t1);
        let p0 = traj.evaluate(t0).unwrap();
        let p1 = traj.evaluate(t1).unwrap();
        assert!(p0.x >= 1.9 - 0.1 && p0.x <= 2.1);
        assert!(p1.x >= 1.9 && p1.x <= 2.1 + 0.1);
    }

    #[test]
    fn fully_inside_trajectory_collides_everywhere() {
        let mut g = grid([20, 20, 20], 0.0);
        g.add_box(Vec3::zeros(), Vec3::new(2.0, 2.0, 2.0));
        let traj = straight(Vec3::new(0.5, 0.5, 0.5), Vec3::new(1.5, 1.5, 1.5), 6, 0.3);
        let (t0, t1) = first_colliding_segment(&g, &traj).unwrap();
        assert_eq!((t0, t1), traj.domain());
    }

    #[test]
    fn free_control_points_get_no_pairs() {
        let mut g = OccupancyGrid::new(0.1, Vec3::new(-1.0, -3.0, -1.0), [60, 60, 20], 0.0).unwrap();
        g.add_box(Vec3::new(1.5, -0.5, -0.5), Vec3::new(2.5, 0.5, 0.5));
        let traj = straight(Vec3::zeros(), Vec3::new(4.0, 0.0, 0.0), 9, 0.5);
        let seg = colliding_segments(&g, &traj)[0];
        let a = seg.before.unwrap().1;
        let b = seg.after.unwrap().1;
        let path = find_safe_path(&g, &a, &b).unwrap();
        let pairs = generate_pv_pairs(&g, &traj, &seg, &path.polyline, &AnchorSearch::for_grid(&g));
        assert!(!pairs.is_empty());
        for p in &pairs {
            assert!(g.is_occupied(&traj.control_points()[p.owner_index]));
            assert_relative_eq!(p.direction.norm(), 1.0, epsilon = 1e-9);
            assert!(distance_to_obstacle(p, &traj.control_points()[p.owner_index]) < 0.0);
        }
    }

    #[test]
    fn merge_numbers_and_dedupes() {
        let base = PvPair {
            anchor: Vec3::zeros(),
            direction: Vec3::x(),
            owner_index: 3,
            obstacle_id: 0,
        };
        let mut set = Vec::new();
        merge_pairs(&mut set, [base, base, PvPair { direction: Vec3::y(), ..base }], 0.1);
        assert_eq!(set.len(), 2);
        assert_eq!(set[1].obstacle_id, 1);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut g = OccupancyGrid::new(0.1, Vec3::new(-1.0, 2.0, 0.0), [17, 9, 5], 0.15).unwrap();
        g.add_cylinder((0.0, 2.5), 0.2, 0.0, 0.5);
        g.set_occupied(&Vec3::new(0.55, 2.05, 0.45));
        let mut bytes = Vec::new();
        g.write_snapshot(&mut bytes).unwrap();
        let back = OccupancyGrid::read_snapshot(bytes.as_slice()).unwrap();
        assert_eq!(back.cells, g.cells);
        assert_eq!(back.dims(), g.dims());
        assert_eq!(back.origin(), g.origin());
        assert!(OccupancyGrid::read_snapshot(&bytes[..10]).is_err());
    }

    #[test]
    fn raycast_hits_voxel_face() {
        let mut g = OccupancyGrid::new(0.1, Vec3::new(-1.0, -1.0, -1.0), [40, 20, 20], 0.0).unwrap();
        g.add_box(Vec3::new(2.0, -0.2, -0.2), Vec3::new(2.2, 0.2, 0.2));
        let d = g.raycast(&Vec3::new(0.0, 0.01, 0.01), &Vec3::x(), 5.0).unwrap();
        assert_relative_eq!(d, 2.0, epsilon = 1e-9);
        assert!(g.raycast(&Vec3::new(0.0, 0.01, 0.01), &-Vec3::x(), 5.0).is_none());
        assert!(g.raycast(&Vec3::new(0.0, 0.01, 0.01), &Vec3::x(), 1.5).is_none());
        // From outside the grid.
        let d = g.raycast(&Vec3::new(-3.0, 0.01, 0.01), &Vec3::x(), 10.0).unwrap();
        assert_relative_eq!(d, 5.0, epsilon = 1e-9);
    }

    #[test]
    fn distance_to_raw_obstacles() {
        let mut g = grid([20, 20, 20], 0.0);
        g.add_box(Vec3::new(1.0, 1.0, 1.0), Vec3::new(1.1, 1.1, 1.1));
        let d = g.distance_to_raw(&Vec3::new(1.35, 1.05, 1.05), 1.0).unwrap();
        assert_relative_eq!(d, 0.25, epsilon = 1e-9);
        assert!(g.distance_to_raw(&Vec3::new(0.05, 0.05, 0.05), 0.5).is_none());
    }

    #[test]
    fn nearest_free_escapes_obstacle() {
        let mut g = grid([20, 20, 20], 0.0);
        g.add_box(Vec3::new(0.5, 0.5, 0.5), Vec3::new(1.5, 1.5, 1.5));
        let p = Vec3::new(0.65, 1.0, 1.0);
        let f = g.nearest_free(&p, 1.0).unwrap();
        assert!(!g.is_occupied(&f));
        assert!((f - p).norm() < 0.25);
    }
}
