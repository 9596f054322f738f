//! Per-agent planning state machine.
//!
//! All clock arguments are the agent's perceived clock, the time base of its
//! own and of received trajectories.

use std::collections::BTreeMap;
use std::time::Duration;

use log::{debug, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::drift::DriftEstimate;
use crate::environment::{colliding_segments_with_spacing, polyline_length, OccupancyGrid};
use crate::message::{clip_to_message, AgentId, TrajectoryMessage, MAX_CONTROL_POINTS};
use crate::optimizer::{
    plan_with_variants, DynamicLimits, PlanError, PlannerConfig, RemoteTrajectory, SwarmConstraintSet,
    VariantKind,
};
use crate::trajectory::{basis_matrix, BSplineTrajectory, TrajectoryError, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub position: Vec3,
    /// Heading about +z, radians.
    pub yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ReplanReason {
    Startup,
    ObstacleCollision,
    SwarmCollision,
    NearEnd,
    Periodic,
}

impl ReplanReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Startup => "startup",
            Self::ObstacleCollision => "obstacle",
            Self::SwarmCollision => "swarm",
            Self::NearEnd => "near_end",
            Self::Periodic => "periodic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    /// Body radius, meters.
    pub radius: f64,
    pub planning_horizon: f64,
    /// Remote trajectories farther than this from the agent are ignored.
    pub planning_range: f64,
    pub planner: PlannerConfig,
    /// Required ellipsoidal separation between agent centers, meters.
    pub swarm_clearance: f64,
    pub ellipsoid_ratio: f64,
    pub swarm_epsilon: f64,
    pub swarm_scale: f64,
    pub replan_period: f64,
    /// Replan when less than this fraction of the trajectory remains.
    pub near_end_fraction: f64,
    pub goal_tolerance: f64,
    /// Check each newly received trajectory against the current one.
    pub check_on_receive: bool,
    pub degree: usize,
    /// Target control point spacing of the initial guess, meters.
    pub control_spacing: f64,
    /// Cruise speed of the initial guess as a fraction of `v_max`.
    pub cruise_fraction: f64,
    /// Acceleration of the initial guess as a fraction of `a_max`.
    pub accel_fraction: f64,
    /// Minimum delay before retrying after a failed plan, seconds.
    pub retry_interval: f64,
    /// Brake when a predicted obstacle collision is closer than this, seconds.
    pub imminent_collision: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            radius: 0.2,
            planning_horizon: 7.5,
            planning_range: 15.0,
            planner: PlannerConfig::default(),
            swarm_clearance: 0.6,
            ellipsoid_ratio: 3.0,
            swarm_epsilon: 0.05,
            swarm_scale: 0.1,
            replan_period: 1.0,
            near_end_fraction: 0.25,
            goal_tolerance: 0.1,
            check_on_receive: true,
            degree: 3,
            control_spacing: 0.5,
            cruise_fraction: 0.9,
            accel_fraction: 0.5,
            retry_interval: 0.1,
            imminent_collision: 1.0,
        }
    }
}

impl AgentConfig {
    pub fn limits(&self) -> DynamicLimits {
        self.planner.limits
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub id: AgentId,
    pub true_pose: Pose,
    pub believed_pose: Pose,
    pub current_trajectory: BSplineTrajectory,
    pub goal: Vec3,
    pub planning_horizon: f64,
    pub limits: DynamicLimits,
    pub epoch: u32,
    /// Injected localization drift: `believed = true + drift`.
    pub drift: Vec3,
}

/// The local goal: the global goal if within `horizon` (inclusive), else the
/// point at `horizon` along the straight line toward it.
pub fn select_local_goal(position: &Vec3, goal: &Vec3, horizon: f64) -> Vec3 {
    let d = goal - position;
    let dist = d.norm();
    if dist <= horizon {
        *goal
    } else {
        position + d * (horizon / dist)
    }
}

/// A received trajectory, in the sender's frame and clock.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedTrajectory {
    pub epoch: u32,
    pub trajectory: BSplineTrajectory,
    pub received_at: f64,
    /// Whether the on-receive collision check has run for this epoch.
    pub checked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplanStatus {
    Installed,
    Failed,
    Braking,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplanRecord {
    pub clock: f64,
    pub reason: ReplanReason,
    pub status: ReplanStatus,
    pub wall_time: Duration,
    pub iterations: usize,
    pub rebuilds: usize,
    /// Remote trajectories in the constraint set.
    pub constraints: usize,
    pub variant: Option<VariantKind>,
    pub candidates: usize,
}

/// Position, velocity and acceleration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionState {
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
}

impl MotionState {
    pub fn at_rest(position: Vec3) -> Self {
        Self {
            position,
            velocity: Vec3::zeros(),
            acceleration: Vec3::zeros(),
        }
    }

    /// State of `traj` at `t`; beyond the end the final point is held at rest.
    pub fn sample(traj: &BSplineTrajectory, t: f64) -> Self {
        if t >= traj.end_time() || traj.degree() < 2 {
            return Self::at_rest(traj.evaluate_clamped(t));
        }
        let vel = traj.derivative().expect("degree >= 1");
        let acc = vel.derivative().expect("degree >= 1");
        Self {
            position: traj.evaluate_clamped(t),
            velocity: vel.evaluate_clamped(t),
            acceleration: acc.evaluate_clamped(t),
        }
    }
}

/// Shaping of the initial guess.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuessParams {
    pub degree: usize,
    pub control_spacing: f64,
    pub cruise_speed: f64,
    pub acceleration: f64,
    pub max_control_points: usize,
}

/// Least-squares B-spline through a reference polyline.
///
/// The first `degree` control points reproduce `start` exactly, the last
/// `degree` sit at the polyline's end, and the free ones fit positions of a
/// trapezoidal speed profile along the polyline that starts at the current
/// speed and ends at rest.
pub fn fit_initial_guess(
    start: &MotionState,
    reference: &[Vec3],
    start_time: f64,
    params: &GuessParams,
) -> Result<BSplineTrajectory, TrajectoryError> {
    let p = params.degree;
    let end = *reference.last().unwrap_or(&start.position);
    let length = polyline_length(reference);
    let s0 = start.velocity.norm();
    let cruise = params.cruise_speed.max(s0);
    let accel = params.acceleration;
    let decel = if length > 1e-9 {
        accel.max(s0 * s0 / (2.0 * length))
    } else {
        accel
    };

    // Speed profile over arc length.
    const STEPS: usize = 200;
    let ds = length / STEPS as f64;
    let speed = |s: f64| -> f64 {
        cruise
            .min((s0 * s0 + 2.0 * accel * s).sqrt())
            .min((2.0 * decel * (length - s).max(0.0)).sqrt())
    };
    let mut times = Vec::with_capacity(STEPS + 1);
    times.push(0.0);
    for i in 0..STEPS {
        let v = speed(i as f64 * ds) + speed((i + 1) as f64 * ds);
        let dt = if v > 1e-9 { 2.0 * ds / v } else { 0.0 };
        times.push(times[i] + dt);
    }
    let total = times[STEPS].max(0.5);
    let max_segments = params.max_control_points.saturating_sub(p).max(p + 1);
    let segments = ((length / params.control_spacing).ceil() as usize).clamp(p + 1, max_segments);
    let dt = total / segments as f64;
    let n = segments + p;

    // Boundary control points from the start state.
    let m = basis_matrix(p);
    let k = p + 1;
    let mut sys = DMatrix::zeros(p, p);
    let mut rhs = DMatrix::zeros(p, 3);
    // Row r of the basis matrix times the span's control points is the r-th
    // derivative at the span start scaled by dt^r / r!.
    for row in 0..p {
        for col in 0..p {
            sys[(row, col)] = m[row * k + col];
        }
        let target = match row {
            0 => start.position,
            1 => start.velocity * dt,
            2 => start.acceleration * (dt * dt / 2.0),
            _ => Vec3::zeros(),
        };
        for a in 0..3 {
            rhs[(row, a)] = target[a];
        }
    }
    let head = sys
        .lu()
        .solve(&rhs)
        .ok_or(TrajectoryError::NonFinite(0))?;
    let mut ctrl = vec![end; n];
    for i in 0..p {
        ctrl[i] = Vec3::new(head[(i, 0)], head[(i, 1)], head[(i, 2)]);
    }

    let free = p..n - p;
    if !free.is_empty() {
        let shape = BSplineTrajectory::new(p, ctrl.clone(), dt, start_time)?;
        let position_at = |t: f64| -> Vec3 {
            // Arc length reached at time t, then the polyline point there.
            let idx = times.partition_point(|&x| x <= t).clamp(1, STEPS);
            let (t0, t1) = (times[idx - 1], times[idx]);
            let frac = if t1 > t0 { ((t - t0) / (t1 - t0)).clamp(0.0, 1.0) } else { 1.0 };
            let s = ((idx - 1) as f64 + frac) * ds;
            point_at_length(reference, s)
        };
        let samples = 4 * segments + 1;
        let nf = free.len();
        let mut ata = DMatrix::<f64>::zeros(nf, nf);
        let mut atb = DMatrix::<f64>::zeros(nf, 3);
        let time_scale = times[STEPS] / total;
        for j in 0..samples {
            let t = total * j as f64 / (samples - 1) as f64;
            let target = if length > 1e-9 {
                position_at(t * time_scale)
            } else {
                end
            };
            let (first, w) = shape.basis_weights_clamped(start_time + t);
            let mut fixed = target;
            let mut row: Vec<(usize, f64)> = Vec::new();
            for (jj, wj) in w.iter().enumerate() {
                let idx = first + jj;
                if free.contains(&idx) {
                    row.push((idx - p, *wj));
                } else {
                    fixed -= ctrl[idx] * *wj;
                }
            }
            for &(a, wa) in &row {
                for &(b, wb) in &row {
                    ata[(a, b)] += wa * wb;
                }
                for c in 0..3 {
                    atb[(a, c)] += wa * fixed[c];
                }
            }
        }
        for i in 0..nf {
            ata[(i, i)] += 1e-9;
        }
        let sol = ata
            .cholesky()
            .map(|c| c.solve(&atb))
            .ok_or(TrajectoryError::NonFinite(p))?;
        for i in 0..nf {
            ctrl[p + i] = Vec3::new(sol[(i, 0)], sol[(i, 1)], sol[(i, 2)]);
        }
    }
    BSplineTrajectory::new(p, ctrl, dt, start_time)
}

fn point_at_length(pts: &[Vec3], s: f64) -> Vec3 {
    let mut acc = 0.0;
    for w in pts.windows(2) {
        let len = (w[1] - w[0]).norm();
        if acc + len >= s && len > 0.0 {
            return w[0] + (w[1] - w[0]) * ((s - acc) / len);
        }
        acc += len;
    }
    *pts.last().expect("non-empty polyline")
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AgentStats {
    pub replans: usize,
    pub failures: usize,
    pub brakes: usize,
}

pub struct Agent {
    pub config: AgentConfig,
    pub state: AgentState,
    map: OccupancyGrid,
    pub received: BTreeMap<AgentId, ReceivedTrajectory>,
    pub drift_estimates: BTreeMap<AgentId, DriftEstimate>,
    last_plan: f64,
    not_before: f64,
    map_dirty: bool,
    unchecked: bool,
    started: bool,
    pub stats: AgentStats,
    pub planning_times: Vec<Duration>,
}

impl Agent {
    pub fn new(id: AgentId, start: Vec3, goal: Vec3, config: AgentConfig, map: OccupancyGrid, clock: f64) -> Self {
        let hover = BSplineTrajectory::hover(start, config.degree, 0.25, clock, 4).expect("valid hover");
        let heading = goal - start;
        let yaw = heading.y.atan2(heading.x);
        let pose = Pose { position: start, yaw };
        Self {
            state: AgentState {
                id,
                true_pose: pose,
                believed_pose: pose,
                current_trajectory: hover,
                goal,
                planning_horizon: config.planning_horizon,
                limits: config.limits(),
                epoch: 0,
                drift: Vec3::zeros(),
            },
            config,
            map,
            received: BTreeMap::new(),
            drift_estimates: BTreeMap::new(),
            last_plan: clock,
            not_before: f64::NEG_INFINITY,
            map_dirty: true,
            unchecked: false,
            started: false,
            stats: AgentStats::default(),
            planning_times: Vec::new(),
        }
    }

    pub fn id(&self) -> AgentId {
        self.state.id
    }

    pub fn trajectory(&self) -> &BSplineTrajectory {
        &self.state.current_trajectory
    }

    pub fn map(&self) -> &OccupancyGrid {
        &self.map
    }

    /// Mutable map access; marks the map as changed for collision checks.
    pub fn map_mut(&mut self) -> &mut OccupancyGrid {
        self.map_dirty = true;
        &mut self.map
    }

    /// Applies `update` to the map; a nonzero return marks it changed.
    pub fn update_map<F: FnOnce(&mut OccupancyGrid) -> usize>(&mut self, update: F) -> usize {
        let n = update(&mut self.map);
        if n > 0 {
            self.map_dirty = true;
        }
        n
    }

    pub fn set_yaw(&mut self, yaw: f64) {
        self.state.true_pose.yaw = yaw;
        self.state.believed_pose.yaw = yaw;
    }

    /// Sets the drift keeping the believed pose, for agents constructed in
    /// their believed frame.
    pub fn initialize_drift(&mut self, drift: Vec3) {
        self.state.drift = drift;
        self.state.true_pose.position = self.state.believed_pose.position - drift;
    }

    pub fn started(&self) -> bool {
        self.started
    }

    /// Sets the injected drift and moves the believed pose accordingly.
    pub fn set_drift(&mut self, drift: Vec3) {
        self.state.drift = drift;
        self.state.believed_pose.position = self.state.true_pose.position + drift;
    }

    /// Whether the agent is at rest at its goal.
    pub fn arrived(&self, clock: f64) -> bool {
        clock >= self.trajectory().end_time()
            && (self.state.believed_pose.position - self.state.goal).norm() <= self.config.goal_tolerance
    }

    pub fn latest_message(&self) -> TrajectoryMessage {
        clip_to_message(self.trajectory(), self.state.id, self.state.epoch)
            .expect("planned trajectories fit the message budget")
    }

    /// Stores a received trajectory unless its epoch is older than the one
    /// held. Returns whether the message carried a new epoch.
    pub fn receive(&mut self, msg: TrajectoryMessage, clock: f64) -> bool {
        if msg.agent_id == self.state.id {
            return false;
        }
        match self.received.get_mut(&msg.agent_id) {
            Some(r) if msg.epoch < r.epoch => false,
            Some(r) if msg.epoch == r.epoch => {
                r.received_at = clock;
                false
            }
            _ => {
                self.received.insert(
                    msg.agent_id,
                    ReceivedTrajectory {
                        epoch: msg.epoch,
                        trajectory: msg.trajectory,
                        received_at: clock,
                        checked: false,
                    },
                );
                self.unchecked = true;
                true
            }
        }
    }

    /// A received trajectory corrected by the drift estimate for its sender.
    pub fn corrected_remote(&self, id: AgentId) -> Option<BSplineTrajectory> {
        let r = self.received.get(&id)?;
        Some(match self.drift_estimates.get(&id) {
            Some(est) => r.trajectory.translated(&est.offset),
            None => r.trajectory.clone(),
        })
    }

    fn within_range(&self, remote: &BSplineTrajectory, clock: f64, range: f64) -> bool {
        let here = self.state.believed_pose.position;
        let own = self.trajectory();
        let to = own.end_time().max(clock);
        let step = own.knot_interval().max(0.05);
        let mut t = clock;
        loop {
            if (remote.evaluate_clamped(t) - here).norm() <= range {
                return true;
            }
            if t >= to {
                return false;
            }
            t = (t + step).min(to);
        }
    }

    /// Remote trajectories whose path comes within `range` of the agent.
    pub fn constraint_set_with_range(&self, clock: f64, range: f64) -> SwarmConstraintSet {
        let mut set = self.empty_constraint_set();
        for (&id, r) in &self.received {
            let traj = self.corrected_remote(id).expect("received");
            if self.within_range(&traj, clock, range) {
                set.remotes.push(RemoteTrajectory {
                    agent_id: id,
                    trajectory: traj,
                    received_at: r.received_at,
                });
            }
        }
        set
    }

    pub fn constraint_set(&self, clock: f64) -> SwarmConstraintSet {
        self.constraint_set_with_range(clock, self.config.planning_range)
    }

    fn empty_constraint_set(&self) -> SwarmConstraintSet {
        SwarmConstraintSet {
            own_id: self.state.id,
            remotes: Vec::new(),
            clearance: self.config.swarm_clearance,
            ellipsoid_ratio: self.config.ellipsoid_ratio,
            epsilon: self.config.swarm_epsilon,
            scale: self.config.swarm_scale,
        }
    }

    fn collision_spacing(&self) -> f64 {
        self.map.resolution() / 2.0
    }

    /// Earliest predicted obstacle collision on the current trajectory.
    pub fn predicted_obstacle_collision(&self, clock: f64) -> Option<f64> {
        let traj = self.trajectory();
        if clock > traj.end_time() {
            return self.map.is_occupied(&traj.evaluate_clamped(clock)).then_some(clock);
        }
        colliding_segments_with_spacing(&self.map, traj, clock, self.collision_spacing())
            .first()
            .map(|s| s.t_start)
    }

    /// Whether `remote` comes within the swarm clearance of the current
    /// trajectory from `clock` on.
    pub fn conflicts_with(&self, remote: &BSplineTrajectory, clock: f64) -> bool {
        let own = self.trajectory();
        let set = self.empty_constraint_set();
        let step = own.knot_interval() / 4.0;
        own.sample(clock, own.end_time(), step).iter().any(|(t, p)| {
            set.ellipsoidal_norm(&(p - remote.evaluate_clamped(*t))) < self.config.swarm_clearance
        })
    }

    pub fn should_replan(&mut self, clock: f64) -> Option<ReplanReason> {
        if !self.started || clock < self.not_before {
            return None;
        }
        let mut reason = None;
        if self.map_dirty {
            self.map_dirty = false;
            if self.predicted_obstacle_collision(clock).is_some() {
                reason = Some(ReplanReason::ObstacleCollision);
            }
        }
        if reason.is_none() && self.unchecked && self.config.check_on_receive {
            self.unchecked = false;
            let ids: Vec<AgentId> = self.received.iter().filter(|(_, r)| !r.checked).map(|(&id, _)| id).collect();
            for id in ids {
                self.received.get_mut(&id).expect("listed").checked = true;
                let remote = self.corrected_remote(id).expect("received");
                if reason.is_none()
                    && self.within_range(&remote, clock, self.config.planning_range)
                    && self.conflicts_with(&remote, clock)
                {
                    reason = Some(ReplanReason::SwarmCollision);
                }
            }
        }
        if reason.is_some() {
            return reason;
        }
        let traj = self.trajectory();
        let ends_at_goal = (traj.evaluate_clamped(traj.end_time()) - self.state.goal).norm() < 1e-6;
        if !ends_at_goal && traj.end_time() - clock < self.config.near_end_fraction * traj.duration() {
            return Some(ReplanReason::NearEnd);
        }
        if clock < traj.end_time() && clock - self.last_plan >= self.config.replan_period - 1e-9 {
            return Some(ReplanReason::Periodic);
        }
        None
    }

    /// Local goal, moved to the nearest free point if it is occupied.
    pub fn local_goal(&self) -> Option<Vec3> {
        let g = select_local_goal(&self.state.believed_pose.position, &self.state.goal, self.state.planning_horizon);
        if !self.map.is_occupied(&g) {
            return Some(g);
        }
        self.map.nearest_free(&g, 2.0)
    }

    fn guess_params(&self, accel_fraction: f64) -> GuessParams {
        let limits = self.config.limits();
        GuessParams {
            degree: self.config.degree,
            control_spacing: self.config.control_spacing,
            cruise_speed: self.config.cruise_fraction
                * limits.v_max
                * (1.0 - self.config.planner.dynamics_barrier.epsilon_fraction),
            acceleration: accel_fraction * limits.a_max,
            max_control_points: MAX_CONTROL_POINTS,
        }
    }

    /// Remaining path of the current trajectory from `clock`, extended
    /// straight to `local_goal`.
    fn reference_path(&self, clock: f64, local_goal: &Vec3) -> Vec<Vec3> {
        let traj = self.trajectory();
        let mut pts: Vec<Vec3> = traj.sample(clock, traj.end_time(), 0.1).into_iter().map(|(_, p)| p).collect();
        if pts.is_empty() {
            pts.push(traj.evaluate_clamped(clock));
        }
        pts.dedup_by(|a, b| (*a - *b).norm() < 1e-9);
        let last = *pts.last().expect("non-empty");
        if (last - local_goal).norm() > 1e-3 {
            pts.push(*local_goal);
        }
        pts
    }

    pub fn initial_guess(&self, clock: f64, local_goal: &Vec3) -> Result<BSplineTrajectory, TrajectoryError> {
        let start = MotionState::sample(self.trajectory(), clock);
        let reference = self.reference_path(clock, local_goal);
        fit_initial_guess(&start, &reference, clock, &self.guess_params(self.config.accel_fraction))
    }

    /// Trajectory decelerating at `a_max` along the current path.
    pub fn braking_trajectory(&self, clock: f64) -> Result<BSplineTrajectory, TrajectoryError> {
        let start = MotionState::sample(self.trajectory(), clock);
        let a_max = self.config.limits().a_max;
        let stop = start.velocity.norm_squared() / (2.0 * a_max);
        let traj = self.trajectory();
        let mut reference = vec![start.position];
        let mut acc = 0.0;
        for (_, p) in traj.sample(clock, traj.end_time(), 0.05).into_iter().skip(1) {
            let last = *reference.last().expect("non-empty");
            let step = (p - last).norm();
            if acc + step >= stop {
                if step > 0.0 {
                    reference.push(last + (p - last) * ((stop - acc) / step));
                }
                acc = stop;
                break;
            }
            acc += step;
            reference.push(p);
        }
        if acc < stop && start.velocity.norm() > 1e-9 {
            let last = *reference.last().expect("non-empty");
            reference.push(last + start.velocity.normalize() * (stop - acc));
        }
        fit_initial_guess(&start, &reference, clock, &self.guess_params(1.0))
    }

    pub fn replan(&mut self, clock: f64, reason: ReplanReason) -> ReplanRecord {
        self.started = true;
        let constraints = self.constraint_set(clock);
        let mut record = ReplanRecord {
            clock,
            reason,
            status: ReplanStatus::Failed,
            wall_time: Duration::ZERO,
            iterations: 0,
            rebuilds: 0,
            constraints: constraints.remotes.len(),
            variant: None,
            candidates: 0,
        };
        let started = std::time::Instant::now();
        let result = self
            .local_goal()
            .ok_or_else(|| "no free local goal".to_string())
            .and_then(|goal| {
                let guess = self.initial_guess(clock, &goal).map_err(|e| e.to_string())?;
                plan_with_variants(&guess, &self.map, &constraints, &goal, &self.config.planner).map_err(|e| match e {
                    PlanError::AllInfeasible { rebuilds, .. } => format!("infeasible after {rebuilds} rebuilds"),
                    other => other.to_string(),
                })
            });
        record.wall_time = started.elapsed();
        self.planning_times.push(record.wall_time);
        match result {
            Ok(plan) => {
                record.iterations = plan.total_iterations();
                record.candidates = plan.candidates.len();
                record.variant = Some(plan.candidates[plan.chosen].kind);
                let best = plan.into_best();
                record.rebuilds = best.rebuilds;
                self.install(best.trajectory, clock);
                record.status = ReplanStatus::Installed;
                self.stats.replans += 1;
            }
            Err(msg) => {
                debug!("agent {} plan failed at {clock:.2}: {msg}", self.state.id);
                self.stats.failures += 1;
                self.not_before = clock + self.config.retry_interval;
                // Keep the map marked so the obstacle check runs again.
                self.map_dirty = true;
                if let Some(t) = self.predicted_obstacle_collision(clock) {
                    if t - clock < self.config.imminent_collision {
                        match self.braking_trajectory(clock) {
                            Ok(brake) => {
                                let brake_hit = colliding_segments_with_spacing(
                                    &self.map,
                                    &brake,
                                    clock,
                                    self.collision_spacing(),
                                )
                                .first()
                                .map(|s| s.t_start);
                                if brake_hit.is_none_or(|b| b > t) {
                                    self.install(brake, clock);
                                    self.stats.brakes += 1;
                                    record.status = ReplanStatus::Braking;
                                }
                            }
                            Err(e) => warn!("agent {} braking trajectory failed: {e}", self.state.id),
                        }
                    }
                }
            }
        }
        record
    }

    fn install(&mut self, traj: BSplineTrajectory, clock: f64) {
        self.state.current_trajectory = traj;
        self.state.epoch += 1;
        self.last_plan = clock;
        self.map_dirty = false;
    }

    /// Advances to `clock` with ideal tracking of the current trajectory in
    /// the believed frame.
    pub fn execute_step(&mut self, clock: f64) -> Pose {
        let traj = &self.state.current_trajectory;
        let believed = traj.evaluate_clamped(clock);
        let prev = self.state.believed_pose.position;
        let step = believed - prev;
        let yaw = if step.x.hypot(step.y) > 1e-4 {
            step.y.atan2(step.x)
        } else {
            self.state.believed_pose.yaw
        };
        self.state.believed_pose = Pose { position: believed, yaw };
        self.state.true_pose = Pose {
            position: believed - self.state.drift,
            yaw,
        };
        self.state.believed_pose
    }
}
