//! Scenario configuration, the simulation loop, metrics and collision audit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, AgentConfig, ReplanReason, ReplanRecord, ReplanStatus};
use crate::drift::{
    detect_agent, fuse_depth, mask_agents, render_depth, update_drift, CameraModel, DetectionCriteria,
    DriftEstimate, SphereBody,
};
use crate::environment::{EnvironmentError, OccupancyGrid};
use crate::message::{AgentId, TrajectoryMessage};
use crate::netsim::{
    chain_startup, sync_clocks, write_net_trace, BroadcastConfig, BroadcastNetwork, ChainConfig, NetError,
    NetTraceRow, StartupSchedule,
};
use crate::optimizer::DynamicLimits;
use crate::trajectory::Vec3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("scenario parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("trace parse error on line {line}: {message}")]
    Trace { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestSpec {
    /// Pillars per square meter of `region`.
    pub density: f64,
    pub region_min: [f64; 2],
    pub region_max: [f64; 2],
    pub pillar_radius: f64,
    /// Minimum distance between pillar centers.
    pub min_spacing: f64,
    /// Pillar-free disc radius around every start and goal.
    pub keep_out: f64,
    /// Defaults to the scenario seed.
    pub seed: Option<u64>,
}

impl Default for ForestSpec {
    fn default() -> Self {
        Self {
            density: 0.0,
            region_min: [-10.0, -10.0],
            region_max: [10.0, 10.0],
            pillar_radius: 0.15,
            min_spacing: 1.0,
            keep_out: 1.0,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorldSpec {
    Empty,
    Forest(ForestSpec),
    /// Grid snapshot file.
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub start: [f64; 3],
    pub goal: [f64; 3],
    /// Initial heading; defaults to facing the goal.
    #[serde(default)]
    pub yaw: Option<f64>,
}

/// Localization drift of one agent from `from` seconds on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftInjection {
    pub agent: AgentId,
    #[serde(default)]
    pub from: f64,
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptionMode {
    /// Agents plan on the true world grid.
    GroundTruth,
    /// Agents start with an empty map and fuse simulated depth images.
    Depth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionConfig {
    pub mode: PerceptionMode,
    /// Seconds between depth frames.
    pub period: f64,
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub vfov_deg: f64,
    pub max_depth: f64,
    pub trust_radius: f64,
    pub estimate_drift: bool,
    pub drift_alpha: f64,
    pub masking: bool,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            mode: PerceptionMode::GroundTruth,
            period: 0.2,
            width: 96,
            height: 72,
            hfov_deg: 90.0,
            vfov_deg: 70.0,
            max_depth: 5.0,
            trust_radius: 0.5,
            estimate_drift: true,
            drift_alpha: 0.1,
            masking: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    /// Simulated seconds.
    pub duration: f64,
    pub step: f64,
    pub metrics_step: f64,
    pub world: WorldSpec,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub resolution: f64,
    pub agents: Vec<AgentSpec>,
    pub limits: DynamicLimits,
    pub agent: AgentConfig,
    pub network: BroadcastConfig,
    pub chain: ChainConfig,
    pub drift: Vec<DriftInjection>,
    pub perception: PerceptionConfig,
    /// Write planning wall time into the trace. Off keeps traces
    /// reproducible byte for byte.
    pub record_wall_time: bool,
    /// End the run once every agent has arrived.
    pub stop_when_arrived: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            seed: 0,
            duration: 60.0,
            step: 0.01,
            metrics_step: 0.01,
            world: WorldSpec::Empty,
            bounds_min: [-10.0, -10.0, 0.0],
            bounds_max: [10.0, 10.0, 3.0],
            resolution: 0.1,
            agents: Vec::new(),
            limits: DynamicLimits::default(),
            agent: AgentConfig::default(),
            network: BroadcastConfig::default(),
            chain: ChainConfig::default(),
            drift: Vec::new(),
            perception: PerceptionConfig::default(),
            record_wall_time: false,
            stop_when_arrived: true,
        }
    }
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let mut scenario = Self::from_toml(&std::fs::read_to_string(path)?)?;
        if let WorldSpec::File { path: p } = &mut scenario.world {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(scenario)
    }

    fn steps_per(&self, period: f64, what: &str) -> Result<u64, HarnessError> {
        let n = (period / self.step).round();
        if n < 1.0 || (n * self.step - period).abs() > 1e-9 {
            return Err(HarnessError::Config(format!("{what} {period} is not a multiple of the step {}", self.step)));
        }
        Ok(n as u64)
    }

    pub fn agent_config(&self) -> AgentConfig {
        let mut cfg = self.agent;
        cfg.planner.limits = self.limits;
        cfg
    }

    /// The true world, built from the world spec.
    pub fn build_world(&self) -> Result<OccupancyGrid, HarnessError> {
        match &self.world {
            WorldSpec::File { path } => Ok(OccupancyGrid::read_snapshot(io::BufReader::new(File::open(path)?))?),
            other => {
                let mut grid = OccupancyGrid::from_bounds(
                    v3(self.bounds_min),
                    v3(self.bounds_max),
                    self.resolution,
                    self.agent.radius,
                )?;
                if let WorldSpec::Forest(spec) = other {
                    let keep: Vec<[f64; 2]> = self
                        .agents
                        .iter()
                        .flat_map(|a| [[a.start[0], a.start[1]], [a.goal[0], a.goal[1]]])
                        .collect();
                    let pillars = generate_forest(spec, &keep, spec.seed.unwrap_or(self.seed))?;
                    for [x, y] in pillars {
                        grid.add_cylinder((x, y), spec.pillar_radius, self.bounds_min[2], self.bounds_max[2]);
                    }
                }
                Ok(grid)
            }
        }
    }

    pub fn validate(&self, world: &OccupancyGrid) -> Result<(), HarnessError> {
        if self.agents.is_empty() {
            return Err(HarnessError::Config("no agents".into()));
        }
        if self.agents.len() > AgentId::MAX as usize {
            return Err(HarnessError::Config("too many agents".into()));
        }
        if !(self.duration > 0.0 && self.step > 0.0) {
            return Err(HarnessError::Config("duration and step must be positive".into()));
        }
        self.steps_per(self.metrics_step, "metrics step")?;
        if self.perception.mode == PerceptionMode::Depth {
            self.steps_per(self.perception.period, "perception period")?;
        }
        for (i, a) in self.agents.iter().enumerate() {
            for (what, p) in [("start", a.start), ("goal", a.goal)] {
                if world.is_occupied(&v3(p)) {
                    return Err(HarnessError::Config(format!("agent {i} {what} {p:?} is not in free space")));
                }
            }
        }
        self.network.validate()?;
        Ok(())
    }

    fn drift_at(&self, agent: AgentId, t: f64) -> Vec3 {
        self.drift
            .iter()
            .filter(|d| d.agent == agent && d.from <= t)
            .max_by(|a, b| a.from.total_cmp(&b.from))
            .map(|d| v3(d.offset))
            .unwrap_or_else(Vec3::zeros)
    }
}

/// Pillar centers by dart throwing with a minimum spacing, outside the keep-out
/// discs. Places exactly `round(density * area)` pillars.
pub fn generate_forest(spec: &ForestSpec, keep_out: &[[f64; 2]], seed: u64) -> Result<Vec<[f64; 2]>, HarnessError> {
    if !(spec.density >= 0.0) {
        return Err(HarnessError::Config(format!("negative density {}", spec.density)));
    }
    let [x0, y0] = spec.region_min;
    let [x1, y1] = spec.region_max;
    let area = (x1 - x0).max(0.0) * (y1 - y0).max(0.0);
    let count = (spec.density * area).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<[f64; 2]> = Vec::with_capacity(count);
    let max_attempts = 2000 * count.max(1);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(HarnessError::Config(format!(
                "placed {} of {count} pillars; density too high for the spacing and keep-out zones",
                out.len()
            )));
        }
        let p = [rng.gen_range(x0..x1), rng.gen_range(y0..y1)];
        let d2 = |q: &[f64; 2]| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
        if keep_out.iter().any(|k| d2(k) < spec.keep_out.powi(2)) {
            continue;
        }
        if out.iter().any(|q| d2(q) < spec.min_spacing.powi(2)) {
            continue;
        }
        out.push(p);
    }
    Ok(out)
}

/// Eight (or `n`) agents on a circle of `radius` flying to the antipode.
pub fn circle_swap(n: usize, radius: f64) -> Scenario {
    let agents = (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            let (s, c) = a.sin_cos();
            AgentSpec {
                start: [radius * c, radius * s, 1.0],
                goal: [-radius * c, -radius * s, 1.0],
                yaw: None,
            }
        })
        .collect();
    let m = radius + 3.0;
    Scenario {
        name: format!("circle_swap_{n}"),
        duration: 40.0,
        bounds_min: [-m, -m, 0.0],
        bounds_max: [m, m, 3.0],
        agents,
        ..Default::default()
    }
}

/// Ten agents crossing a pillar forest; agent `i` flies to the mirror image of
/// its start across both axes.
pub fn density_scenario(density: f64, seed: u64) -> Scenario {
    let agents = (0..10)
        .map(|i| {
            let y = -9.0 + 2.0 * i as f64;
            AgentSpec {
                start: [-20.0, y, 1.0],
                goal: [20.0, -y, 1.0],
                yaw: None,
            }
        })
        .collect();
    Scenario {
        name: format!("density_{density:.2}"),
        seed,
        duration: 60.0,
        world: WorldSpec::Forest(ForestSpec {
            density,
            region_min: [-15.0, -12.0],
            region_max: [15.0, 12.0],
            ..Default::default()
        }),
        bounds_min: [-23.0, -13.0, 0.0],
        bounds_max: [23.0, 13.0, 2.5],
        agents,
        perception: PerceptionConfig {
            mode: PerceptionMode::Depth,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// `n` agents on a line `spacing` apart, each flying to a point 50 m away at
/// a random heading within ±0.2 rad of +x.
pub fn line_scenario(n: usize, spacing: f64, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = (n as f64 - 1.0) * spacing / 2.0;
    let agents: Vec<AgentSpec> = (0..n)
        .map(|i| {
            let y = i as f64 * spacing - half;
            let a: f64 = rng.gen_range(-0.2..0.2);
            AgentSpec {
                start: [0.0, y, 1.0],
                goal: [50.0 * a.cos(), y + 50.0 * a.sin(), 1.0],
                yaw: None,
            }
        })
        .collect();
    let ymax = half + 12.0;
    Scenario {
        name: format!("line_{n}"),
        seed,
        duration: 40.0,
        bounds_min: [-3.0, -ymax, 0.0],
        bounds_max: [53.0, ymax, 3.0],
        agents,
        ..Default::default()
    }
}

/// Two hovering agents `separation` apart facing each other; agent 1 carries
/// drift `offset`.
pub fn drift_scenario(separation: f64, offset: [f64; 3]) -> Scenario {
    let a = [0.0, 0.0, 1.0];
    let b = [separation, 0.0, 1.0];
    Scenario {
        name: "drift_pair".into(),
        duration: 12.0,
        bounds_min: [-4.0, -4.0, 0.0],
        bounds_max: [separation + 4.0, 4.0, 3.0],
        agents: vec![
            AgentSpec {
                start: a,
                goal: a,
                yaw: Some(0.0),
            },
            AgentSpec {
                start: b,
                goal: b,
                yaw: Some(std::f64::consts::PI),
            },
        ],
        drift: vec![DriftInjection {
            agent: 1,
            from: 0.0,
            offset,
        }],
        perception: PerceptionConfig {
            mode: PerceptionMode::Depth,
            period: 0.1,
            ..Default::default()
        },
        stop_when_arrived: false,
        ..Default::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub clock: f64,
    pub id: AgentId,
    pub true_position: Vec3,
    pub yaw: f64,
    pub believed_position: Vec3,
    pub epoch: u32,
    pub reason: Option<ReplanReason>,
    pub wall_ms: Option<f64>,
}

const TRACE_HEADER: [&str; 12] = [
    "clock", "id", "true_x", "true_y", "true_z", "yaw", "believed_x", "believed_y", "believed_z", "epoch", "reason",
    "wall_ms",
];

pub fn write_trace<W: Write>(rows: &[TraceRow], w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRACE_HEADER)?;
    let f = |x: f64| format!("{x:.6}");
    for r in rows {
        out.write_record([
            f(r.clock),
            r.id.to_string(),
            f(r.true_position.x),
            f(r.true_position.y),
            f(r.true_position.z),
            f(r.yaw),
            f(r.believed_position.x),
            f(r.believed_position.y),
            f(r.believed_position.z),
            r.epoch.to_string(),
            r.reason.map(|x| x.as_str().to_string()).unwrap_or_default(),
            r.wall_ms.map(|x| format!("{x:.3}")).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

fn parse_reason(s: &str) -> Option<ReplanReason> {
    [
        ReplanReason::Startup,
        ReplanReason::ObstacleCollision,
        ReplanReason::SwarmCollision,
        ReplanReason::NearEnd,
        ReplanReason::Periodic,
    ]
    .into_iter()
    .find(|r| r.as_str() == s)
}

pub fn read_trace<R: Read>(r: R) -> Result<Vec<TraceRow>, HarnessError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        let err = |message: String| HarnessError::Trace { line, message };
        if rec.len() < 12 {
            return Err(err(format!("expected 12 fields, found {}", rec.len())));
        }
        let num = |i: usize| -> Result<f64, HarnessError> {
            rec[i].parse::<f64>().map_err(|e| err(format!("field {}: {e}", TRACE_HEADER[i])))
        };
        rows.push(TraceRow {
            clock: num(0)?,
            id: rec[1].parse().map_err(|e| err(format!("id: {e}")))?,
            true_position: Vec3::new(num(2)?, num(3)?, num(4)?),
            yaw: num(5)?,
            believed_position: Vec3::new(num(6)?, num(7)?, num(8)?),
            epoch: rec[9].parse().map_err(|e| err(format!("epoch: {e}")))?,
            reason: if rec[10].is_empty() {
                None
            } else {
                Some(parse_reason(&rec[10]).ok_or_else(|| err(format!("unknown reason {}", &rec[10])))?)
            },
            wall_ms: if rec[11].is_empty() { None } else { Some(num(11)?) },
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CollisionKind {
    Agents(AgentId, AgentId),
    Obstacle(AgentId),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionEvent {
    pub kind: CollisionKind,
    pub start: f64,
    pub end: f64,
    /// Smallest center distance during the interval; zero for obstacles.
    pub min_distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub events: Vec<CollisionEvent>,
}

impl AuditReport {
    pub fn count(&self) -> usize {
        self.events.len()
    }
}

/// Ground-truth collision audit: pairs of agents closer than twice
/// `agent_radius`, and agent centers inside raw obstacle voxels of `world`.
/// Each contiguous violation interval counts once.
pub fn collision_audit(trace: &[TraceRow], world: Option<&OccupancyGrid>, agent_radius: f64) -> AuditReport {
    let mut open: BTreeMap<CollisionKind, CollisionEvent> = BTreeMap::new();
    let mut report = AuditReport::default();
    let mut i = 0;
    while i < trace.len() {
        let clock = trace[i].clock;
        let mut j = i;
        while j < trace.len() && trace[j].clock == clock {
            j += 1;
        }
        let frame = &trace[i..j];
        let mut active: BTreeMap<CollisionKind, f64> = BTreeMap::new();
        for (a, ra) in frame.iter().enumerate() {
            if let Some(w) = world {
                if w.is_raw_occupied(&ra.true_position) {
                    active.insert(CollisionKind::Obstacle(ra.id), 0.0);
                }
            }
            for rb in &frame[a + 1..] {
                let d = (ra.true_position - rb.true_position).norm();
                if d < 2.0 * agent_radius {
                    let key = CollisionKind::Agents(ra.id.min(rb.id), ra.id.max(rb.id));
                    active.insert(key, d);
                }
            }
        }
        let ended: Vec<CollisionKind> = open.keys().filter(|k| !active.contains_key(k)).copied().collect();
        for k in ended {
            report.events.push(open.remove(&k).expect("open"));
        }
        for (k, d) in active {
            let e = open.entry(k).or_insert(CollisionEvent {
                kind: k,
                start: clock,
                end: clock,
                min_distance: d,
            });
            e.end = clock;
            e.min_distance = e.min_distance.min(d);
        }
        i = j;
    }
    report.events.extend(open.into_values());
    report.events.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.kind.cmp(&b.kind)));
    report
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentMetrics {
    pub id: AgentId,
    pub d_fly: f64,
    pub t_fly: Option<f64>,
    pub mean_velocity: Option<f64>,
    /// Smallest true distance from the center to an obstacle voxel.
    pub d_safe: Option<f64>,
    pub straight_line: f64,
    pub replans: usize,
    pub failures: usize,
    pub brakes: usize,
}

impl AgentMetrics {
    pub fn completed(&self) -> bool {
        self.t_fly.is_some()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TimingStats {
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub max_ms: f64,
}

impl TimingStats {
    pub fn from_durations(times: &[Duration]) -> Self {
        if times.is_empty() {
            return Self::default();
        }
        let mut ms: Vec<f64> = times.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let pct = |q: f64| ms[((ms.len() - 1) as f64 * q).round() as usize];
        Self {
            count: ms.len(),
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            p50_ms: pct(0.5),
            p90_ms: pct(0.9),
            max_ms: *ms.last().expect("non-empty"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub scenario: String,
    pub agents: Vec<AgentMetrics>,
    pub min_euclidean_distance: f64,
    pub min_ellipsoidal_distance: f64,
    pub collisions: usize,
    pub t_cal: TimingStats,
    /// Simulated time at which the run stopped.
    pub sim_time: f64,
}

impl MetricsReport {
    fn mean<F: Fn(&AgentMetrics) -> Option<f64>>(&self, f: F) -> Option<f64> {
        let v: Vec<f64> = self.agents.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_d_fly(&self) -> f64 {
        self.mean(|a| Some(a.d_fly)).unwrap_or(0.0)
    }

    pub fn mean_t_fly(&self) -> Option<f64> {
        self.mean(|a| a.t_fly)
    }

    pub fn mean_velocity(&self) -> Option<f64> {
        self.mean(|a| a.mean_velocity)
    }

    /// Smallest obstacle distance over all agents.
    pub fn d_safe(&self) -> Option<f64> {
        self.agents.iter().filter_map(|a| a.d_safe).min_by(f64::total_cmp)
    }

    pub fn all_completed(&self) -> bool {
        self.agents.iter().all(AgentMetrics::completed)
    }

    /// Per-agent rows followed by a summary row with id `all`. Wall-clock
    /// timings are written separately by [`write_timing`].
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), HarnessError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "id", "d_fly", "t_fly", "velocity", "d_safe", "straight_line", "completed", "replans", "failures",
            "brakes", "min_euclidean", "min_ellipsoidal", "collisions",
        ])?;
        let f = |x: f64| format!("{x:.6}");
        let o = |x: Option<f64>| x.map(f).unwrap_or_default();
        for a in &self.agents {
            out.write_record([
                a.id.to_string(),
                f(a.d_fly),
                o(a.t_fly),
                o(a.mean_velocity),
                o(a.d_safe),
                f(a.straight_line),
                (a.completed() as u8).to_string(),
                a.replans.to_string(),
                a.failures.to_string(),
                a.brakes.to_string(),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        out.write_record([
            "all".to_string(),
            f(self.mean_d_fly()),
            o(self.mean_t_fly()),
            o(self.mean_velocity()),
            o(self.d_safe()),
            f(self.mean(|a| Some(a.straight_line)).unwrap_or(0.0)),
            (self.all_completed() as u8).to_string(),
            self.agents.iter().map(|a| a.replans).sum::<usize>().to_string(),
            self.agents.iter().map(|a| a.failures).sum::<usize>().to_string(),
            self.agents.iter().map(|a| a.brakes).sum::<usize>().to_string(),
            f(self.min_euclidean_distance),
            f(self.min_ellipsoidal_distance),
            self.collisions.to_string(),
        ])?;
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplanRow {
    pub agent: AgentId,
    pub record: ReplanRecord,
}

pub fn write_replans<W: Write>(rows: &[ReplanRow], w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "clock", "id", "reason", "status", "iterations", "rebuilds", "constraints", "variant", "candidates",
    ])?;
    for r in rows {
        let rec = &r.record;
        out.write_record([
            format!("{:.6}", rec.clock),
            r.agent.to_string(),
            rec.reason.as_str().to_string(),
            format!("{:?}", rec.status).to_lowercase(),
            rec.iterations.to_string(),
            rec.rebuilds.to_string(),
            rec.constraints.to_string(),
            rec.variant.map(|v| format!("{v:?}").to_lowercase()).unwrap_or_default(),
            rec.candidates.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Per-replan wall time in milliseconds.
pub fn write_timing<W: Write>(rows: &[ReplanRow], w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["clock", "id", "wall_ms"])?;
    for r in rows {
        out.write_record([
            format!("{:.6}", r.record.clock),
            r.agent.to_string(),
            format!("{:.3}", r.record.wall_time.as_secs_f64() * 1e3),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub struct SimulationOutput {
    pub metrics: MetricsReport,
    pub audit: AuditReport,
    pub trace: Vec<TraceRow>,
    pub network: Vec<NetTraceRow>,
    pub replans: Vec<ReplanRow>,
    pub startup: StartupSchedule,
    /// First replan record of each agent, in startup order.
    pub startup_records: Vec<ReplanRow>,
    pub world: OccupancyGrid,
    pub agents: Vec<Agent>,
    pub sensing_frames: usize,
}

impl SimulationOutput {
    /// Writes metrics.csv, trace.csv, network.csv, replans.csv, timing.csv
    /// and world.grid into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<BufWriter<File>, HarnessError> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
        self.metrics.write_csv(open("metrics.csv")?)?;
        write_trace(&self.trace, open("trace.csv")?)?;
        write_net_trace(&self.network, open("network.csv")?)?;
        write_replans(&self.replans, open("replans.csv")?)?;
        write_timing(&self.replans, open("timing.csv")?)?;
        let mut w = open("world.grid")?;
        self.world.write_snapshot(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

struct MetricsAccumulator {
    last: Vec<Vec3>,
    d_fly: Vec<f64>,
    t_fly: Vec<Option<f64>>,
    d_safe: Vec<Option<f64>>,
    min_euclid: f64,
    min_ellipsoidal: f64,
}

struct Sim<'a> {
    scenario: &'a Scenario,
    world: OccupancyGrid,
    agents: Vec<Agent>,
    net: BroadcastNetwork,
    corrections: BTreeMap<AgentId, f64>,
    camera: CameraModel,
    trace: Vec<TraceRow>,
    replans: Vec<ReplanRow>,
    frames: usize,
}

impl Sim<'_> {
    fn perceived(&self, id: AgentId, t: f64) -> f64 {
        t + self.scenario.chain.offset(id) - self.corrections.get(&id).copied().unwrap_or(0.0)
    }

    fn deliver(&mut self, t: f64) -> Result<(), HarnessError> {
        let latest: Vec<TrajectoryMessage> = self
            .agents
            .iter()
            .filter(|a| a.started())
            .map(Agent::latest_message)
            .collect();
        self.net.periodic_rebroadcast(&latest, t)?;
        for d in self.net.pop_due(t) {
            match TrajectoryMessage::decode(&d.bytes) {
                Ok(msg) => {
                    let clock = self.perceived(d.receiver, t);
                    self.agents[d.receiver as usize].receive(msg, clock);
                }
                Err(e) => warn!("dropping undecodable message {}: {e}", d.message_index),
            }
        }
        Ok(())
    }

    fn sense(&mut self, t: f64) {
        let p = self.scenario.perception;
        let criteria = DetectionCriteria::for_agent(self.scenario.agent.radius, p.trust_radius);
        let relaxed = criteria.relaxed();
        let bodies: Vec<SphereBody> = self
            .agents
            .iter()
            .map(|a| SphereBody {
                id: a.id(),
                center: a.state.true_pose.position,
                radius: a.config.radius,
            })
            .collect();
        for i in 0..self.agents.len() {
            let clock = self.perceived(i as AgentId, t);
            let agent = &self.agents[i];
            let yaw = agent.state.true_pose.yaw;
            let cam_true = self.camera.with_body_pose(&agent.state.true_pose.position, yaw);
            let others: Vec<SphereBody> = bodies.iter().filter(|b| b.id != agent.id()).copied().collect();
            let depth = render_depth(&cam_true, &self.world, &others);
            let cam = self.camera.with_body_pose(&agent.state.believed_pose.position, yaw);
            let mut masks = Vec::new();
            let mut updates = Vec::new();
            for (&j, r) in &agent.received {
                let raw = r.trajectory.evaluate_clamped(clock);
                let est = agent.drift_estimates.get(&j).copied().unwrap_or_else(|| DriftEstimate::new(j));
                let predicted = raw + est.offset;
                if (predicted - cam.position()).norm() > p.max_depth + p.trust_radius {
                    continue;
                }
                if p.estimate_drift {
                    if let Some(det) = detect_agent(&cam, &depth, &predicted, p.trust_radius, &criteria) {
                        updates.push(update_drift(&est, &raw, &det.position, p.drift_alpha, p.trust_radius, clock));
                    }
                }
                if p.masking {
                    if let Some(det) = detect_agent(&cam, &depth, &predicted, p.trust_radius, &relaxed) {
                        masks.push(det);
                    }
                }
            }
            let agent = &mut self.agents[i];
            for u in updates {
                agent.drift_estimates.insert(u.remote, u);
            }
            let image = if masks.is_empty() { depth } else { mask_agents(&cam, &depth, &masks) };
            agent.update_map(|m| fuse_depth(m, &cam, &image));
        }
        self.frames += 1;
    }

    fn startup(&mut self, records: &mut Vec<ReplanRow>) -> Result<StartupSchedule, HarnessError> {
        let ids: Vec<AgentId> = (0..self.agents.len() as AgentId).collect();
        let chain = self.scenario.chain.clone();
        let offsets: Vec<f64> = ids.iter().map(|&id| self.perceived(id, 0.0)).collect();
        let agents = &mut self.agents;
        let schedule = chain_startup(&chain, &ids, 0.0, |id, prev, time| {
            let clock = offsets[id as usize] + time;
            let agent = &mut agents[id as usize];
            for m in prev {
                agent.receive(m.clone(), clock);
            }
            let record = agent.replan(clock, ReplanReason::Startup);
            records.push(ReplanRow { agent: id, record });
            agent.latest_message()
        })?;
        for r in records.iter() {
            self.replans.push(r.clone());
        }
        for &id in &schedule.realized_order() {
            let msg = self.agents[id as usize].latest_message();
            self.net.broadcast(&msg, 0.0)?;
        }
        Ok(schedule)
    }
}

/// Runs `scenario` to its duration or until every agent has arrived.
pub fn run_scenario(scenario: &Scenario) -> Result<SimulationOutput, HarnessError> {
    let world = scenario.build_world()?;
    scenario.validate(&world)?;
    let cfg = scenario.agent_config();
    let ids: Vec<AgentId> = (0..scenario.agents.len() as AgentId).collect();
    let agents: Vec<Agent> = scenario
        .agents
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let map = match scenario.perception.mode {
                PerceptionMode::GroundTruth => world.clone(),
                PerceptionMode::Depth => world.empty_like(),
            };
            // Starts and goals are true positions; the agent plans in its
            // believed frame.
            let d = scenario.drift_at(i as AgentId, 0.0);
            let mut a = Agent::new(i as AgentId, v3(spec.start) + d, v3(spec.goal) + d, cfg, map, 0.0);
            if let Some(yaw) = spec.yaw {
                a.set_yaw(yaw);
            }
            a.initialize_drift(d);
            a
        })
        .collect();
    let mut net_cfg = scenario.network;
    net_cfg.seed = scenario.seed;
    let p = scenario.perception;
    let mut sim = Sim {
        scenario,
        net: BroadcastNetwork::new(net_cfg, ids.clone())?,
        corrections: sync_clocks(&scenario.chain, &ids),
        camera: CameraModel::from_fov(p.width, p.height, p.hfov_deg, p.vfov_deg, p.max_depth),
        world,
        agents,
        trace: Vec::new(),
        replans: Vec::new(),
        frames: 0,
    };
    let metrics_every = scenario.steps_per(scenario.metrics_step, "metrics step")?;
    let sense_every = match p.mode {
        PerceptionMode::Depth => Some(scenario.steps_per(p.period, "perception period")?),
        PerceptionMode::GroundTruth => None,
    };
    let n = sim.agents.len();
    let mut acc = MetricsAccumulator {
        last: sim.agents.iter().map(|a| a.state.true_pose.position).collect(),
        d_fly: vec![0.0; n],
        t_fly: vec![None; n],
        d_safe: vec![None; n],
        min_euclid: f64::INFINITY,
        min_ellipsoidal: f64::INFINITY,
    };
    let ratio = scenario.agent.ellipsoid_ratio;
    let safe_radius = 2.0;

    let steps = (scenario.duration / scenario.step).round() as u64;
    let mut startup_records = Vec::new();
    let mut startup = StartupSchedule::default();
    let mut stop_time = 0.0;
    for k in 0..=steps {
        let t = k as f64 * scenario.step;
        stop_time = t;
        for i in 0..n {
            let d = scenario.drift_at(i as AgentId, t);
            if d != sim.agents[i].state.drift {
                sim.agents[i].set_drift(d);
            }
        }
        if k == 0 {
            startup = sim.startup(&mut startup_records)?;
        }
        sim.deliver(t)?;
        if sense_every.is_some_and(|e| k % e == 0) {
            sim.sense(t);
        }
        let mut reasons: Vec<Option<(ReplanReason, Duration)>> = vec![None; n];
        if k == 0 {
            for r in &startup_records {
                reasons[r.agent as usize] = Some((r.record.reason, r.record.wall_time));
            }
        }
        for i in 0..n {
            let clock = sim.perceived(i as AgentId, t);
            let Some(reason) = sim.agents[i].should_replan(clock) else {
                continue;
            };
            let record = sim.agents[i].replan(clock, reason);
            if record.status != ReplanStatus::Failed {
                let msg = sim.agents[i].latest_message();
                sim.net.broadcast(&msg, t)?;
            }
            reasons[i] = Some((reason, record.wall_time));
            sim.replans.push(ReplanRow {
                agent: i as AgentId,
                record,
            });
        }
        for i in 0..n {
            let clock = sim.perceived(i as AgentId, t);
            let agent = &mut sim.agents[i];
            agent.execute_step(clock);
            sim.trace.push(TraceRow {
                clock: t,
                id: i as AgentId,
                true_position: agent.state.true_pose.position,
                yaw: agent.state.true_pose.yaw,
                believed_position: agent.state.believed_pose.position,
                epoch: agent.state.epoch,
                reason: reasons[i].map(|r| r.0),
                wall_ms: if scenario.record_wall_time {
                    reasons[i].map(|r| r.1.as_secs_f64() * 1e3)
                } else {
                    None
                },
            });
        }
        if k % metrics_every == 0 {
            for i in 0..n {
                let a = &sim.agents[i];
                let p = a.state.true_pose.position;
                if acc.t_fly[i].is_none() {
                    acc.d_fly[i] += (p - acc.last[i]).norm();
                    if a.arrived(sim.perceived(i as AgentId, t)) {
                        acc.t_fly[i] = Some(t);
                    }
                }
                acc.last[i] = p;
                if let Some(d) = sim.world.distance_to_raw(&p, safe_radius) {
                    acc.d_safe[i] = Some(acc.d_safe[i].map_or(d, |x: f64| x.min(d)));
                }
                for j in i + 1..n {
                    let d = p - sim.agents[j].state.true_pose.position;
                    acc.min_euclid = acc.min_euclid.min(d.norm());
                    acc.min_ellipsoidal =
                        acc.min_ellipsoidal.min((d.x * d.x + d.y * d.y + d.z * d.z / ratio).sqrt());
                }
            }
        }
        if scenario.stop_when_arrived && acc.t_fly.iter().all(Option::is_some) {
            break;
        }
    }

    let audit = collision_audit(&sim.trace, Some(&sim.world), scenario.agent.radius);
    let times: Vec<Duration> = sim.replans.iter().map(|r| r.record.wall_time).collect();
    let agent_metrics = sim
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let spec = &scenario.agents[i];
            AgentMetrics {
                id: a.id(),
                d_fly: acc.d_fly[i],
                t_fly: acc.t_fly[i],
                mean_velocity: acc.t_fly[i].filter(|&t| t > 0.0).map(|t| acc.d_fly[i] / t),
                d_safe: acc.d_safe[i],
                straight_line: (v3(spec.goal) - v3(spec.start)).norm(),
                replans: a.stats.replans,
                failures: a.stats.failures,
                brakes: a.stats.brakes,
            }
        })
        .collect();
    let metrics = MetricsReport {
        scenario: scenario.name.clone(),
        agents: agent_metrics,
        min_euclidean_distance: acc.min_euclid,
        min_ellipsoidal_distance: acc.min_ellipsoidal,
        collisions: audit.count(),
        t_cal: TimingStats::from_durations(&times),
        sim_time: stop_time,
    };
    info!(
        "{}: stopped at {stop_time:.2} s, {} collisions, mean d_fly {:.2} m",
        scenario.name,
        metrics.collisions,
        metrics.mean_d_fly()
    );
    Ok(SimulationOutput {
        metrics,
        audit,
        trace: sim.trace,
        network: sim.net.trace().to_vec(),
        replans: sim.replans,
        startup,
        startup_records,
        world: sim.world,
        agents: sim.agents,
        sensing_frames: sim.frames,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub agents: usize,
    pub replans: usize,
    pub t_cal: TimingStats,
    pub collisions: usize,
}

/// Runs `template(n)` for each count and reports per-replan planning time.
pub fn scalability_sweep<F: Fn(usize) -> Scenario>(counts: &[usize], template: F) -> Result<Vec<SweepRow>, HarnessError> {
    if counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HarnessError::Config("agent counts must be ascending".into()));
    }
    counts
        .iter()
        .map(|&n| {
            let out = run_scenario(&template(n))?;
            Ok(SweepRow {
                agents: n,
                replans: out.replans.len(),
                t_cal: out.metrics.t_cal,
                collisions: out.metrics.collisions,
            })
        })
        .collect()
}

/// Least-squares slope of mean t_cal against agent count over rows with
/// `lo <= agents <= hi`.
pub fn t_cal_slope(rows: &[SweepRow], lo: usize, hi: usize) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| (lo..=hi).contains(&r.agents))
        .map(|r| (r.agents as f64, r.t_cal.mean_ms))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

pub fn write_sweep<W: Write>(rows: &[SweepRow], w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["agents", "replans", "t_cal_mean_ms", "t_cal_p50_ms", "t_cal_p90_ms", "t_cal_max_ms", "collisions"])?;
    for r in rows {
        out.write_record([
            r.agents.to_string(),
            r.replans.to_string(),
            format!("{:.4}", r.t_cal.mean_ms),
            format!("{:.4}", r.t_cal.p50_ms),
            format!("{:.4}", r.t_cal.p90_ms),
            format!("{:.4}", r.t_cal.max_ms),
            r.collisions.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
