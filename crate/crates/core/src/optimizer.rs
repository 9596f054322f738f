//! Trajectory optimization over B-spline control points.
//!
//! The objective is a weighted sum of smoothness, obstacle collision,
//! dynamic feasibility, terminal progress and swarm separation terms. Cost
//! functions add their gradient into a caller-provided buffer with one entry
//! per control point.

use std::time::{Duration, Instant};

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{
    colliding_segments, find_safe_path, generate_pv_pairs, march_to_exit, merge_pairs, AnchorSearch,
    CollidingSegment, OccupancyGrid, PvPair,
};
use crate::lbfgs::{self, LbfgsParams};
use crate::message::AgentId;
use crate::trajectory::{BSplineTrajectory, TrajectoryError, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("invalid cost weights: all weights must be finite and non-negative")]
    BadWeights,
    #[error("trajectory error: {0}")]
    Trajectory(#[from] TrajectoryError),
    #[error("no collision-free candidate after {rebuilds} rebuild rounds")]
    AllInfeasible {
        rebuilds: usize,
        best: Box<PlanOutcome>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub smoothness: f64,
    pub collision: f64,
    pub feasibility: f64,
    pub terminal: f64,
    pub swarm: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            smoothness: 1.0,
            collision: 0.5,
            feasibility: 0.1,
            terminal: 0.5,
            swarm: 0.5,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<(), PlanError> {
        let all = [self.smoothness, self.collision, self.feasibility, self.terminal, self.swarm];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(PlanError::BadWeights)
        }
    }
}

/// Shape of a one-sided polynomial penalty.
///
/// Values at or below `threshold - epsilon` cost nothing; beyond that the
/// cost is `(violation / scale)^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierParams {
    pub scale: f64,
    pub exponent: u32,
    pub epsilon: f64,
    pub threshold: f64,
}

impl BarrierParams {
    pub fn new(scale: f64, exponent: u32, epsilon: f64, threshold: f64) -> Self {
        assert!(scale > 0.0, "barrier scale must be positive");
        assert!(exponent >= 2, "barrier exponent must be at least 2");
        Self {
            scale,
            exponent,
            epsilon,
            threshold,
        }
    }
}

/// Penalty and its derivative with respect to `value`.
pub fn soft_barrier(value: f64, params: &BarrierParams) -> (f64, f64) {
    let violation = value - (params.threshold - params.epsilon);
    if violation <= 0.0 {
        return (0.0, 0.0);
    }
    let x = violation / params.scale;
    let n = params.exponent as i32;
    (x.powi(n), n as f64 * x.powi(n - 1) / params.scale)
}

/// Sum of squared second and third control point differences.
pub fn smoothness_cost(ctrl: &[Vec3], grad: &mut [Vec3]) -> f64 {
    let mut cost = 0.0;
    for i in 0..ctrl.len().saturating_sub(2) {
        let a = ctrl[i + 2] - ctrl[i + 1] * 2.0 + ctrl[i];
        cost += a.norm_squared();
        grad[i] += a * 2.0;
        grad[i + 1] -= a * 4.0;
        grad[i + 2] += a * 2.0;
    }
    for i in 0..ctrl.len().saturating_sub(3) {
        let j = ctrl[i + 3] - ctrl[i + 2] * 3.0 + ctrl[i + 1] * 3.0 - ctrl[i];
        cost += j.norm_squared();
        grad[i] -= j * 2.0;
        grad[i + 1] += j * 6.0;
        grad[i + 2] -= j * 6.0;
        grad[i + 3] += j * 2.0;
    }
    cost
}

/// Obstacle penalty: barrier on `clearance - d` for every pair, where `d` is
/// the owner's signed distance to the pair's plane.
pub fn collision_cost(
    ctrl: &[Vec3],
    pairs: &[PvPair],
    clearance: f64,
    barrier: &BarrierParams,
    grad: &mut [Vec3],
) -> f64 {
    let mut cost = 0.0;
    for pair in pairs {
        let q = &ctrl[pair.owner_index];
        let d = pair.distance(q);
        let (c, dc) = soft_barrier(clearance - d, barrier);
        cost += c;
        grad[pair.owner_index] -= pair.direction * dc;
    }
    cost
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicLimits {
    /// m/s, per axis.
    pub v_max: f64,
    /// m/s², per axis.
    pub a_max: f64,
}

impl Default for DynamicLimits {
    fn default() -> Self {
        Self { v_max: 2.0, a_max: 3.0 }
    }
}

/// Barrier shape for the dynamic limits, expressed relative to each limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsBarrier {
    /// Barrier scale as a fraction of the limit.
    pub scale_fraction: f64,
    pub exponent: u32,
    /// Margin as a fraction of the limit.
    pub epsilon_fraction: f64,
}

impl Default for DynamicsBarrier {
    fn default() -> Self {
        Self {
            scale_fraction: 0.1,
            exponent: 3,
            epsilon_fraction: 0.05,
        }
    }
}

impl DynamicsBarrier {
    fn params(&self, limit: f64) -> BarrierParams {
        BarrierParams::new(
            self.scale_fraction * limit,
            self.exponent,
            self.epsilon_fraction * limit,
            limit,
        )
    }
}

/// Per-axis barrier on velocity and acceleration control points.
pub fn feasibility_cost(
    ctrl: &[Vec3],
    dt: f64,
    limits: &DynamicLimits,
    shape: &DynamicsBarrier,
    grad: &mut [Vec3],
) -> f64 {
    let vb = shape.params(limits.v_max);
    let ab = shape.params(limits.a_max);
    let mut cost = 0.0;
    for i in 0..ctrl.len().saturating_sub(1) {
        let v = (ctrl[i + 1] - ctrl[i]) / dt;
        for k in 0..3 {
            let (c, dc) = soft_barrier(v[k].abs(), &vb);
            if c > 0.0 {
                cost += c;
                let g = dc * v[k].signum() / dt;
                grad[i + 1][k] += g;
                grad[i][k] -= g;
            }
        }
    }
    let dt2 = dt * dt;
    for i in 0..ctrl.len().saturating_sub(2) {
        let a = (ctrl[i + 2] - ctrl[i + 1] * 2.0 + ctrl[i]) / dt2;
        for k in 0..3 {
            let (c, dc) = soft_barrier(a[k].abs(), &ab);
            if c > 0.0 {
                cost += c;
                let g = dc * a[k].signum() / dt2;
                grad[i + 2][k] += g;
                grad[i + 1][k] -= 2.0 * g;
                grad[i][k] += g;
            }
        }
    }
    cost
}

/// Squared distance from the mean of the last `degree + 1` control points to
/// `goal`.
pub fn terminal_cost(ctrl: &[Vec3], degree: usize, goal: &Vec3, grad: &mut [Vec3]) -> f64 {
    let k = (degree + 1).min(ctrl.len());
    if k == 0 {
        return 0.0;
    }
    let tail = ctrl.len() - k;
    let mean = ctrl[tail..].iter().fold(Vec3::zeros(), |acc, q| acc + q) / k as f64;
    let diff = mean - goal;
    let g = diff * (2.0 / k as f64);
    for gi in grad[tail..].iter_mut() {
        *gi += g;
    }
    diff.norm_squared()
}

/// A remote agent's trajectory as known to the planner.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteTrajectory {
    pub agent_id: AgentId,
    pub trajectory: BSplineTrajectory,
    pub received_at: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwarmConstraintSet {
    pub own_id: AgentId,
    pub remotes: Vec<RemoteTrajectory>,
    /// Required ellipsoidal separation, meters.
    pub clearance: f64,
    /// Vertical axis ratio `c > 1`; the metric is `diag(1, 1, 1/c)`.
    pub ellipsoid_ratio: f64,
    pub epsilon: f64,
    /// Penalty scale; the integrand is `(d / scale)^2`.
    pub scale: f64,
}

impl SwarmConstraintSet {
    pub fn empty(own_id: AgentId) -> Self {
        Self {
            own_id,
            remotes: Vec::new(),
            clearance: 0.5,
            ellipsoid_ratio: 3.0,
            epsilon: 0.05,
            scale: 1.0,
        }
    }

    /// Ellipsoidal norm `|E^(1/2) d|`.
    pub fn ellipsoidal_norm(&self, d: &Vec3) -> f64 {
        (d.x * d.x + d.y * d.y + d.z * d.z / self.ellipsoid_ratio).sqrt()
    }

    /// Signed swarm distance: ellipsoidal norm minus `clearance + epsilon`.
    pub fn signed_distance(&self, own: &Vec3, remote: &Vec3) -> f64 {
        self.ellipsoidal_norm(&(own - remote)) - (self.clearance + self.epsilon)
    }
}

/// Precomputed quadrature for the swarm term of one trajectory shape.
///
/// Valid for any control points with the degree, knot interval and start
/// time the term was built for.
#[derive(Debug, Clone)]
pub struct SwarmTerm {
    degree: usize,
    clearance: f64,
    epsilon: f64,
    inv_c: f64,
    scale: f64,
    /// `(first control index, quadrature weight, remote position)` per sample.
    samples: Vec<(usize, f64, Vec3)>,
    /// `degree + 1` basis weights per sample.
    basis: Vec<f64>,
}

impl SwarmTerm {
    /// Quadrature over `[max(own start, now, remote start), own end]` for each
    /// remote, at `samples_per_knot` samples per knot interval. Remote
    /// trajectories hold their end points outside their domain.
    pub fn new(
        own: &BSplineTrajectory,
        constraints: &SwarmConstraintSet,
        now: f64,
        samples_per_knot: usize,
    ) -> Self {
        let mut samples = Vec::new();
        let mut basis = Vec::new();
        let h_target = own.knot_interval() / samples_per_knot.max(1) as f64;
        for remote in constraints.remotes.iter().filter(|r| r.agent_id != constraints.own_id) {
            let t_s = own.start_time().max(now).max(remote.trajectory.start_time());
            let t_e = own.end_time();
            if t_e <= t_s {
                continue;
            }
            let n = ((t_e - t_s) / h_target).ceil().max(1.0) as usize;
            let h = (t_e - t_s) / n as f64;
            for i in 0..=n {
                let t = t_s + h * i as f64;
                let w = if i == 0 || i == n { 0.5 * h } else { h };
                let (first, weights) = own.basis_weights_clamped(t);
                samples.push((first, w, remote.trajectory.evaluate_clamped(t)));
                basis.extend(weights);
            }
        }
        Self {
            degree: own.degree(),
            clearance: constraints.clearance,
            epsilon: constraints.epsilon,
            inv_c: 1.0 / constraints.ellipsoid_ratio,
            scale: constraints.scale,
            samples,
            basis,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn position(&self, ctrl: &[Vec3], s: usize) -> Vec3 {
        let k = self.degree + 1;
        let first = self.samples[s].0;
        self.basis[s * k..(s + 1) * k]
            .iter()
            .zip(&ctrl[first..first + k])
            .fold(Vec3::zeros(), |acc, (w, q)| acc + q * *w)
    }

    pub fn cost(&self, ctrl: &[Vec3], grad: &mut [Vec3]) -> f64 {
        let k = self.degree + 1;
        let limit = self.clearance + self.epsilon;
        let mut cost = 0.0;
        for (s, &(first, w, remote)) in self.samples.iter().enumerate() {
            let delta = self.position(ctrl, s) - remote;
            let r = (delta.x * delta.x + delta.y * delta.y + delta.z * delta.z * self.inv_c).sqrt();
            let d = r - limit;
            if d >= 0.0 {
                continue;
            }
            let ds = d / self.scale;
            cost += w * ds * ds;
            if r > 1e-12 {
                let dr = Vec3::new(delta.x, delta.y, delta.z * self.inv_c) / r;
                let g = dr * (2.0 * w * ds / self.scale);
                for j in 0..k {
                    grad[first + j] += g * self.basis[s * k + j];
                }
            }
        }
        cost
    }

    /// Smallest ellipsoidal center distance over the quadrature samples.
    pub fn min_distance(&self, ctrl: &[Vec3]) -> Option<f64> {
        (0..self.samples.len())
            .map(|s| {
                let d = self.position(ctrl, s) - self.samples[s].2;
                (d.x * d.x + d.y * d.y + d.z * d.z * self.inv_c).sqrt()
            })
            .min_by(f64::total_cmp)
    }
}

/// Swarm separation penalty for `traj` against every remote trajectory.
pub fn swarm_cost(
    traj: &BSplineTrajectory,
    constraints: &SwarmConstraintSet,
    now: f64,
    grad: &mut [Vec3],
) -> f64 {
    SwarmTerm::new(traj, constraints, now, 2).cost(traj.control_points(), grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub weights: CostWeights,
    pub collision_barrier: BarrierParams,
    /// Target distance beyond the inflated obstacle surface, meters.
    pub obstacle_clearance: f64,
    pub limits: DynamicLimits,
    pub dynamics_barrier: DynamicsBarrier,
    pub max_iterations: usize,
    pub max_rebuilds: usize,
    pub lbfgs_memory: usize,
    pub swarm_samples_per_knot: usize,
    /// Lateral offset applied to control points that start inside another
    /// agent's clearance, so that symmetric encounters pass on the right.
    pub symmetry_nudge: f64,
    pub anchor_step: Option<f64>,
    pub anchor_max_distance: f64,
    pub variants: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            weights: CostWeights::default(),
            collision_barrier: BarrierParams::new(0.05, 3, 0.05, 0.0),
            obstacle_clearance: 0.1,
            limits: DynamicLimits::default(),
            dynamics_barrier: DynamicsBarrier::default(),
            max_iterations: 60,
            max_rebuilds: 6,
            lbfgs_memory: 8,
            swarm_samples_per_knot: 2,
            symmetry_nudge: 0.05,
            anchor_step: None,
            anchor_max_distance: 5.0,
            variants: true,
        }
    }
}

impl PlannerConfig {
    pub fn anchor_search(&self, grid: &OccupancyGrid) -> AnchorSearch {
        let mut s = AnchorSearch::for_grid(grid);
        if let Some(step) = self.anchor_step {
            s.step = step;
        }
        s.max_distance = self.anchor_max_distance;
        s
    }

    fn lbfgs(&self) -> LbfgsParams {
        LbfgsParams {
            memory: self.lbfgs_memory,
            max_iterations: self.max_iterations,
            ..LbfgsParams::default()
        }
    }
}

/// Unweighted per-term costs plus the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CostBreakdown {
    pub smoothness: f64,
    pub collision: f64,
    pub feasibility: f64,
    pub terminal: f64,
    pub swarm: f64,
    pub total: f64,
}

/// Full objective over a trajectory's control points.
pub struct Objective<'a> {
    pub degree: usize,
    pub knot_interval: f64,
    pub goal: Vec3,
    pub pairs: &'a [PvPair],
    pub swarm: &'a SwarmTerm,
    pub config: &'a PlannerConfig,
}

impl Objective<'_> {
    /// Evaluates the objective; `grad` is overwritten with the weighted
    /// gradient.
    pub fn evaluate(&self, ctrl: &[Vec3], grad: &mut [Vec3]) -> CostBreakdown {
        let w = &self.config.weights;
        let mut scratch = vec![Vec3::zeros(); ctrl.len()];
        for g in grad.iter_mut() {
            *g = Vec3::zeros();
        }
        let add = |weight: f64, scratch: &mut Vec<Vec3>, grad: &mut [Vec3]| {
            for (g, s) in grad.iter_mut().zip(scratch.iter_mut()) {
                *g += *s * weight;
                *s = Vec3::zeros();
            }
        };
        let mut b = CostBreakdown {
            smoothness: smoothness_cost(ctrl, &mut scratch),
            ..Default::default()
        };
        add(w.smoothness, &mut scratch, grad);
        b.collision = collision_cost(
            ctrl,
            self.pairs,
            self.config.obstacle_clearance,
            &self.config.collision_barrier,
            &mut scratch,
        );
        add(w.collision, &mut scratch, grad);
        b.feasibility = feasibility_cost(
            ctrl,
            self.knot_interval,
            &self.config.limits,
            &self.config.dynamics_barrier,
            &mut scratch,
        );
        add(w.feasibility, &mut scratch, grad);
        b.terminal = terminal_cost(ctrl, self.degree, &self.goal, &mut scratch);
        add(w.terminal, &mut scratch, grad);
        b.swarm = self.swarm.cost(ctrl, &mut scratch);
        add(w.swarm, &mut scratch, grad);
        b.total = w.smoothness * b.smoothness
            + w.collision * b.collision
            + w.feasibility * b.feasibility
            + w.terminal * b.terminal
            + w.swarm * b.swarm;
        b
    }
}

/// Total objective of a finished trajectory, evaluated from scratch.
pub fn total_cost(
    traj: &BSplineTrajectory,
    pairs: &[PvPair],
    constraints: &SwarmConstraintSet,
    goal: &Vec3,
    config: &PlannerConfig,
) -> CostBreakdown {
    let swarm = SwarmTerm::new(traj, constraints, traj.start_time(), config.swarm_samples_per_knot);
    let objective = Objective {
        degree: traj.degree(),
        knot_interval: traj.knot_interval(),
        goal: *goal,
        pairs,
        swarm: &swarm,
        config,
    };
    let mut grad = vec![Vec3::zeros(); traj.control_points().len()];
    objective.evaluate(traj.control_points(), &mut grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantKind {
    Base,
    Inverted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub trajectory: BSplineTrajectory,
    pub cost: CostBreakdown,
    pub pairs: Vec<PvPair>,
    pub iterations: usize,
    pub rebuilds: usize,
    /// No sampled obstacle collision after the trajectory's initial point.
    pub feasible: bool,
    pub min_swarm_distance: Option<f64>,
    pub wall_time: Duration,
}

/// Pairs for one colliding interval. Uses the safe path between the free
/// samples around the interval; control points that get no pair that way
/// are pushed toward the nearest free space instead.
pub fn pairs_for_segment(
    grid: &OccupancyGrid,
    traj: &BSplineTrajectory,
    segment: &CollidingSegment,
    search: &AnchorSearch,
) -> Vec<PvPair> {
    let mut pairs = Vec::new();
    if let (Some((_, a)), Some((_, b))) = (segment.before, segment.after) {
        match find_safe_path(grid, &a, &b) {
            Ok(path) => pairs = generate_pv_pairs(grid, traj, segment, &path.polyline, search),
            Err(e) => debug!("no safe path around segment [{:.3}, {:.3}]: {e}", segment.t_start, segment.t_end),
        }
    }
    if pairs.is_empty() {
        pairs = fallback_pairs(grid, traj, segment, search);
    }
    pairs
}

fn fallback_pairs(
    grid: &OccupancyGrid,
    traj: &BSplineTrajectory,
    segment: &CollidingSegment,
    search: &AnchorSearch,
) -> Vec<PvPair> {
    let radius = search.max_distance.min(2.0);
    let pts = traj.control_points();
    let (lo, hi) = segment.control_index_range(traj);
    let mut out = Vec::new();
    for (i, q) in pts.iter().enumerate().take(hi + 1).skip(lo) {
        if !grid.is_occupied(q) {
            continue;
        }
        let Some(target) = grid.nearest_free(q, radius) else {
            continue;
        };
        if let Some(p) = crate::environment::pair_from_probe(grid, q, &target, i, search) {
            out.push(p);
        }
    }
    if !out.is_empty() {
        return out;
    }
    // The curve collides between free control points: push the most
    // influential control point away from the deepest sample.
    let t_mid = 0.5 * (segment.t_start + segment.t_end);
    let s = traj.evaluate_clamped(t_mid);
    let Some(target) = grid.nearest_free(&s, radius) else {
        return out;
    };
    let d = target - s;
    if d.norm() < 1e-9 {
        return out;
    }
    let dir = d.normalize();
    if let Some(anchor) = march_to_exit(grid, &s, &dir, search) {
        let (first, w) = traj.basis_weights_clamped(t_mid);
        let j = (0..w.len()).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap_or(0);
        out.push(PvPair {
            anchor,
            direction: dir,
            owner_index: first + j,
            obstacle_id: 0,
        });
    }
    out
}

/// Pairs for every colliding interval of `traj`.
pub fn initial_pairs(grid: &OccupancyGrid, traj: &BSplineTrajectory, search: &AnchorSearch) -> Vec<PvPair> {
    let mut pairs = Vec::new();
    for seg in colliding_segments(grid, traj) {
        let new = pairs_for_segment(grid, traj, &seg, search);
        merge_pairs(&mut pairs, new, grid.resolution());
    }
    pairs
}

/// Colliding intervals that do not start at the trajectory's first point;
/// an interval containing the start cannot be changed by the optimizer.
fn avoidable_collisions(grid: &OccupancyGrid, traj: &BSplineTrajectory) -> Vec<CollidingSegment> {
    colliding_segments(grid, traj)
        .into_iter()
        .filter(|s| s.before.is_some())
        .collect()
}

/// Knot time around which control point `i` has most influence.
fn control_point_time(traj: &BSplineTrajectory, i: usize) -> f64 {
    traj.start_time() + (i as f64 - (traj.degree() as f64 - 1.0) / 2.0) * traj.knot_interval()
}

fn apply_symmetry_nudge(
    ctrl: &mut [Vec3],
    traj: &BSplineTrajectory,
    constraints: &SwarmConstraintSet,
    free: std::ops::Range<usize>,
    nudge: f64,
) {
    if nudge <= 0.0 || constraints.remotes.is_empty() {
        return;
    }
    for i in free {
        let t = control_point_time(traj, i);
        let conflict = constraints
            .remotes
            .iter()
            .any(|r| constraints.signed_distance(&ctrl[i], &r.trajectory.evaluate_clamped(t)) < 0.0);
        if !conflict {
            continue;
        }
        let heading = ctrl[i + 1] - ctrl[i - 1];
        let right = Vec3::new(heading.y, -heading.x, 0.0);
        if right.norm() > 1e-9 {
            ctrl[i] += right.normalize() * nudge;
        }
    }
}

/// Optimizes `initial` from a given starting pair set, rebuilding pairs for
/// new collisions between rounds. The first and last `degree` control points
/// are held fixed.
pub fn optimize_with_pairs(
    initial: &BSplineTrajectory,
    grid: &OccupancyGrid,
    constraints: &SwarmConstraintSet,
    goal: &Vec3,
    mut pairs: Vec<PvPair>,
    config: &PlannerConfig,
) -> Result<PlanOutcome, PlanError> {
    config.weights.validate()?;
    let started = Instant::now();
    let p = initial.degree();
    let n = initial.control_points().len();
    let free = p..n.saturating_sub(p).max(p);
    let search = config.anchor_search(grid);
    let swarm = SwarmTerm::new(initial, constraints, initial.start_time(), config.swarm_samples_per_knot);
    let mut ctrl = initial.control_points().to_vec();
    apply_symmetry_nudge(&mut ctrl, initial, constraints, free.clone(), config.symmetry_nudge);

    let mut iterations = 0;
    let mut rebuilds = 0;
    let mut feasible = false;
    let lbfgs_params = config.lbfgs();
    loop {
        if !free.is_empty() {
            let objective = Objective {
                degree: p,
                knot_interval: initial.knot_interval(),
                goal: *goal,
                pairs: &pairs,
                swarm: &swarm,
                config,
            };
            let mut work = ctrl.clone();
            let mut grad = vec![Vec3::zeros(); n];
            let x0: Vec<f64> = ctrl[free.clone()].iter().flat_map(|q| [q.x, q.y, q.z]).collect();
            let result = lbfgs::minimize(
                |x, g| {
                    for (k, i) in free.clone().enumerate() {
                        work[i] = Vec3::new(x[3 * k], x[3 * k + 1], x[3 * k + 2]);
                    }
                    let cost = objective.evaluate(&work, &mut grad);
                    for (k, i) in free.clone().enumerate() {
                        g[3 * k] = grad[i].x;
                        g[3 * k + 1] = grad[i].y;
                        g[3 * k + 2] = grad[i].z;
                    }
                    cost.total
                },
                &x0,
                &lbfgs_params,
            );
            iterations += result.iterations;
            for (k, i) in free.clone().enumerate() {
                ctrl[i] = Vec3::new(result.x[3 * k], result.x[3 * k + 1], result.x[3 * k + 2]);
            }
        }
        let traj = initial.with_control_points(ctrl.clone())?;
        let collisions = avoidable_collisions(grid, &traj);
        if collisions.is_empty() {
            feasible = true;
            break;
        }
        if rebuilds >= config.max_rebuilds || free.is_empty() {
            break;
        }
        rebuilds += 1;
        for seg in &collisions {
            let new = pairs_for_segment(grid, &traj, seg, &search);
            merge_pairs(&mut pairs, new, grid.resolution());
        }
    }
    let trajectory = initial.with_control_points(ctrl)?;
    let cost = total_cost(&trajectory, &pairs, constraints, goal, config);
    let min_swarm_distance = swarm.min_distance(trajectory.control_points());
    Ok(PlanOutcome {
        trajectory,
        cost,
        pairs,
        iterations,
        rebuilds,
        feasible,
        min_swarm_distance,
        wall_time: started.elapsed(),
    })
}

/// Optimizes `initial`, starting from pairs for its current collisions.
pub fn optimize(
    initial: &BSplineTrajectory,
    grid: &OccupancyGrid,
    constraints: &SwarmConstraintSet,
    goal: &Vec3,
    config: &PlannerConfig,
) -> Result<PlanOutcome, PlanError> {
    let pairs = initial_pairs(grid, initial, &config.anchor_search(grid));
    optimize_with_pairs(initial, grid, constraints, goal, pairs, config)
}

/// Inverts the pair group around the deepest violation.
///
/// The group is the pair with the most negative distance plus every pair on
/// a contiguous run of control points around it whose direction agrees with
/// it. Each inverted pair gets `v = -v` and a new anchor where a march from
/// the old anchor along the new direction leaves the obstacle. Returns
/// `None` when the deepest pair cannot be inverted.
pub fn spawn_topological_variant(
    pairs: &[PvPair],
    ctrl: &[Vec3],
    grid: &OccupancyGrid,
    search: &AnchorSearch,
) -> Option<Vec<PvPair>> {
    let deepest = pairs
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let da = a.1.distance(&ctrl[a.1.owner_index]);
            let db = b.1.distance(&ctrl[b.1.owner_index]);
            da.total_cmp(&db).then(a.0.cmp(&b.0))
        })?
        .1;
    let in_group = |p: &PvPair| p.direction.dot(&deepest.direction) > 0.0;
    let mut owners: Vec<usize> = pairs.iter().filter(|p| in_group(p)).map(|p| p.owner_index).collect();
    owners.sort_unstable();
    owners.dedup();
    let pos = owners.binary_search(&deepest.owner_index).ok()?;
    let (mut lo, mut hi) = (pos, pos);
    while lo > 0 && owners[lo] - owners[lo - 1] <= 1 {
        lo -= 1;
    }
    while hi + 1 < owners.len() && owners[hi + 1] - owners[hi] <= 1 {
        hi += 1;
    }
    let run = owners[lo]..=owners[hi];

    let invert = |p: &PvPair| -> Option<PvPair> {
        let direction = -p.direction;
        let anchor = march_to_exit(grid, &p.anchor, &direction, search)?;
        Some(PvPair {
            anchor,
            direction,
            ..*p
        })
    };
    invert(deepest)?;
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        if in_group(p) && run.contains(&p.owner_index) {
            if let Some(q) = invert(p) {
                out.push(q);
            }
        } else {
            out.push(*p);
        }
    }
    Some(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub kind: VariantKind,
    pub outcome: PlanOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantPlan {
    pub candidates: Vec<Candidate>,
    /// Index into `candidates` of the returned trajectory.
    pub chosen: usize,
    pub wall_time: Duration,
}

impl VariantPlan {
    pub fn best(&self) -> &PlanOutcome {
        &self.candidates[self.chosen].outcome
    }

    pub fn into_best(mut self) -> PlanOutcome {
        self.candidates.swap_remove(self.chosen).outcome
    }

    pub fn total_iterations(&self) -> usize {
        self.candidates.iter().map(|c| c.outcome.iterations).sum()
    }
}

/// Optimizes the base pair set and, when the initial guess collides, one
/// topologically inverted variant in parallel. Returns the feasible candidate
/// with the lowest total cost.
pub fn plan_with_variants(
    initial: &BSplineTrajectory,
    grid: &OccupancyGrid,
    constraints: &SwarmConstraintSet,
    goal: &Vec3,
    config: &PlannerConfig,
) -> Result<VariantPlan, PlanError> {
    let started = Instant::now();
    let search = config.anchor_search(grid);
    let base_pairs = initial_pairs(grid, initial, &search);
    let variant_pairs = if config.variants && !base_pairs.is_empty() {
        spawn_topological_variant(&base_pairs, initial.control_points(), grid, &search)
    } else {
        None
    };

    let mut candidates = Vec::with_capacity(2);
    match variant_pairs {
        None => {
            let outcome = optimize_with_pairs(initial, grid, constraints, goal, base_pairs, config)?;
            candidates.push(Candidate {
                kind: VariantKind::Base,
                outcome,
            });
        }
        Some(inverted) => {
            let (base, inv) = std::thread::scope(|s| {
                let h = s.spawn(|| optimize_with_pairs(initial, grid, constraints, goal, inverted, config));
                let base = optimize_with_pairs(initial, grid, constraints, goal, base_pairs, config);
                (base, h.join().expect("variant optimization panicked"))
            });
            candidates.push(Candidate {
                kind: VariantKind::Base,
                outcome: base?,
            });
            candidates.push(Candidate {
                kind: VariantKind::Inverted,
                outcome: inv?,
            });
        }
    }

    let chosen = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.outcome.feasible)
        .min_by(|a, b| a.1.outcome.cost.total.total_cmp(&b.1.outcome.cost.total))
        .map(|(i, _)| i);
    match chosen {
        Some(chosen) => Ok(VariantPlan {
            candidates,
            chosen,
            wall_time: started.elapsed(),
        }),
        None => {
            let rebuilds = candidates.iter().map(|c| c.outcome.rebuilds).max().unwrap_or(0);
            let best = candidates
                .into_iter()
                .min_by(|a, b| a.outcome.cost.total.total_cmp(&b.outcome.cost.total))
                .expect("at least one candidate")
                .outcome;
            Err(PlanError::AllInfeasible {
                rebuilds,
                best: Box::new(best),
            })
        }
    }
}
