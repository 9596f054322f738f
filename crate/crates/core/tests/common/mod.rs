//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::Rng;
use swarmplan::environment::VoxelIndex;
use swarmplan::{BSplineTrajectory, OccupancyGrid, Vec3};

/// Cox–de Boor recursion on the uniform knot vector `u_j = start + (j - p) dt`.
pub fn cox_de_boor_basis(i: usize, p: usize, knots: &[f64], t: f64) -> f64 {
    if p == 0 {
        return if knots[i] <= t && t < knots[i + 1] { 1.0 } else { 0.0 };
    }
    let mut out = 0.0;
    let d1 = knots[i + p] - knots[i];
    if d1 > 0.0 {
        out += (t - knots[i]) / d1 * cox_de_boor_basis(i, p - 1, knots, t);
    }
    let d2 = knots[i + p + 1] - knots[i + 1];
    if d2 > 0.0 {
        out += (knots[i + p + 1] - t) / d2 * cox_de_boor_basis(i + 1, p - 1, knots, t);
    }
    out
}

pub fn cox_de_boor(traj: &BSplineTrajectory, t: f64) -> Vec3 {
    let p = traj.degree();
    let ctrl = traj.control_points();
    let knots: Vec<f64> = (0..ctrl.len() + p + 1)
        .map(|j| traj.start_time() + (j as f64 - p as f64) * traj.knot_interval())
        .collect();
    ctrl.iter()
        .enumerate()
        .fold(Vec3::zeros(), |acc, (i, q)| acc + q * cox_de_boor_basis(i, p, &knots, t))
}

pub fn random_trajectory<R: Rng>(rng: &mut R, degree: usize, n: usize, spread: f64) -> BSplineTrajectory {
    let ctrl = (0..n)
        .map(|_| {
            Vec3::new(
                rng.gen_range(-spread..spread),
                rng.gen_range(-spread..spread),
                rng.gen_range(-spread..spread),
            )
        })
        .collect();
    let dt = rng.gen_range(0.1..1.0);
    let start = rng.gen_range(-10.0..10.0);
    BSplineTrajectory::new(degree, ctrl, dt, start).unwrap()
}

/// Central finite-difference gradient of `f` with respect to every control
/// point coordinate.
pub fn fd_gradient<F: Fn(&[Vec3]) -> f64>(f: F, ctrl: &[Vec3], h: f64) -> Vec<Vec3> {
    let mut x = ctrl.to_vec();
    let mut out = vec![Vec3::zeros(); ctrl.len()];
    for i in 0..ctrl.len() {
        for k in 0..3 {
            let orig = x[i][k];
            x[i][k] = orig + h;
            let up = f(&x);
            x[i][k] = orig - h;
            let down = f(&x);
            x[i][k] = orig;
            out[i][k] = (up - down) / (2.0 * h);
        }
    }
    out
}

/// `|a - b| / max(|b|, floor)` over the stacked gradient.
pub fn relative_error(analytic: &[Vec3], numeric: &[Vec3], floor: f64) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).norm_squared()).sum();
    let norm: f64 = numeric.iter().map(|b| b.norm_squared()).sum();
    diff.sqrt() / norm.sqrt().max(floor)
}

/// Shortest 26-connected path length through free voxels of the inflated
/// layer, by plain Dijkstra.
pub fn dijkstra_length(grid: &OccupancyGrid, start: VoxelIndex, goal: VoxelIndex) -> Option<f64> {
    let dims = grid.dims();
    let n = grid.voxel_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    let s = grid.linear(start);
    dist[s] = 0.0;
    // Non-negative floats order the same as their bit patterns.
    heap.push(Reverse((0u64, s)));
    let goal_lin = grid.linear(goal);
    while let Some(Reverse((_, lin))) = heap.pop() {
        if lin == goal_lin {
            return Some(dist[lin]);
        }
        let v = grid.unlinear(lin);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if (dx, dy, dz) == (0, 0, 0) {
                        continue;
                    }
                    let nb = [v[0] as i64 + dx, v[1] as i64 + dy, v[2] as i64 + dz];
                    if (0..3).any(|k| nb[k] < 0 || nb[k] >= dims[k] as i64) {
                        continue;
                    }
                    let nb = [nb[0] as usize, nb[1] as usize, nb[2] as usize];
                    if grid.voxel_occupied(nb) {
                        continue;
                    }
                    let step = (((dx * dx + dy * dy + dz * dz) as f64).sqrt()) * grid.resolution();
                    let nl = grid.linear(nb);
                    let cand = dist[lin] + step;
                    if cand < dist[nl] - 1e-12 {
                        dist[nl] = cand;
                        heap.push(Reverse((cand.to_bits(), nl)));
                    }
                }
            }
        }
    }
    None
}

/// Colliding time intervals from uniform dense sampling at `step` seconds.
pub fn dense_collision_intervals(grid: &OccupancyGrid, traj: &BSplineTrajectory, step: f64) -> Vec<(f64, f64)> {
    let (t0, t1) = traj.domain();
    let n = ((t1 - t0) / step).ceil() as usize;
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut open: Option<f64> = None;
    let mut last = t0;
    for i in 0..=n {
        let t = (t0 + i as f64 * step).min(t1);
        let hit = grid.is_occupied(&traj.evaluate_clamped(t));
        match (hit, open) {
            (true, None) => open = Some(t),
            (false, Some(s)) => {
                out.push((s, last));
                open = None;
            }
            _ => {}
        }
        last = t;
    }
    if let Some(s) = open {
        out.push((s, last));
    }
    out
}
