//! Deterministic simulation of the broadcast and chain networks.
//!
//! Every delivery decision is drawn from a generator seeded by
//! `(seed, message index, receiver)`, so the schedule does not depend on the
//! order in which the simulation asks for it.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::message::{AgentId, TrajectoryMessage};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("latency range [{0}, {1}] is invalid")]
    BadLatency(f64, f64),
    #[error("drop probability {0} must be in [0, 1)")]
    BadDropProbability(f64),
    #[error("rebroadcast period {0} must be positive")]
    BadPeriod(f64),
    #[error("startup order is not a permutation of the agent ids")]
    NotAPermutation,
    #[error("message encoding failed: {0}")]
    Message(#[from] crate::message::MessageError),
    #[error("trace output failed: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BroadcastConfig {
    pub latency_min: f64,
    pub latency_max: f64,
    pub drop_probability: f64,
    pub rebroadcast_period: f64,
    pub seed: u64,
}

impl Default for BroadcastConfig {
    fn default() -> Self {
        Self {
            latency_min: 0.0,
            latency_max: 0.0,
            drop_probability: 0.0,
            rebroadcast_period: 0.1,
            seed: 0,
        }
    }
}

impl BroadcastConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.latency_min >= 0.0 && self.latency_min <= self.latency_max && self.latency_max.is_finite()) {
            return Err(NetError::BadLatency(self.latency_min, self.latency_max));
        }
        if !(0.0..1.0).contains(&self.drop_probability) {
            return Err(NetError::BadDropProbability(self.drop_probability));
        }
        if !(self.rebroadcast_period > 0.0) {
            return Err(NetError::BadPeriod(self.rebroadcast_period));
        }
        Ok(())
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Generator for one (message, receiver) delivery decision.
pub fn delivery_rng(seed: u64, message_index: u64, receiver: AgentId) -> ChaCha8Rng {
    let key = splitmix(splitmix(seed) ^ splitmix(message_index.wrapping_mul(0x100_0193)) ^ receiver as u64);
    ChaCha8Rng::seed_from_u64(key)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub time: f64,
    pub sender: AgentId,
    pub receiver: AgentId,
    pub epoch: u32,
    pub message_index: u64,
    pub bytes: Arc<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NetTraceRow {
    pub message: u64,
    pub send_time: f64,
    pub sender: AgentId,
    pub receiver: AgentId,
    pub epoch: u32,
    pub delivered: bool,
    pub delivery_time: Option<f64>,
}

struct Queued {
    seq: u64,
    delivery: Delivery,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        self.delivery
            .time
            .total_cmp(&other.delivery.time)
            .then(self.seq.cmp(&other.seq))
    }
}

/// Lossy, latency-prone broadcast channel with a global event queue.
pub struct BroadcastNetwork {
    config: BroadcastConfig,
    agents: Vec<AgentId>,
    messages: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Queued>>,
    trace: Vec<NetTraceRow>,
    next_tick: u64,
}

impl BroadcastNetwork {
    pub fn new(config: BroadcastConfig, mut agents: Vec<AgentId>) -> Result<Self, NetError> {
        config.validate()?;
        agents.sort_unstable();
        agents.dedup();
        Ok(Self {
            config,
            agents,
            messages: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            trace: Vec::new(),
            next_tick: 1,
        })
    }

    pub fn config(&self) -> &BroadcastConfig {
        &self.config
    }

    pub fn messages_sent(&self) -> u64 {
        self.messages
    }

    pub fn trace(&self) -> &[NetTraceRow] {
        &self.trace
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Sends `msg` from its agent to every other agent; returns the
    /// deliveries that were scheduled.
    pub fn broadcast(&mut self, msg: &TrajectoryMessage, clock: f64) -> Result<Vec<Delivery>, NetError> {
        let bytes = Arc::new(msg.encode()?);
        let index = self.messages;
        self.messages += 1;
        let mut out = Vec::new();
        for &receiver in &self.agents {
            if receiver == msg.agent_id {
                continue;
            }
            let mut rng = delivery_rng(self.config.seed, index, receiver);
            let dropped = rng.gen::<f64>() < self.config.drop_probability;
            let latency = self.config.latency_min + (self.config.latency_max - self.config.latency_min) * rng.gen::<f64>();
            let time = clock + latency;
            self.trace.push(NetTraceRow {
                message: index,
                send_time: clock,
                sender: msg.agent_id,
                receiver,
                epoch: msg.epoch,
                delivered: !dropped,
                delivery_time: (!dropped).then_some(time),
            });
            if dropped {
                continue;
            }
            let delivery = Delivery {
                time,
                sender: msg.agent_id,
                receiver,
                epoch: msg.epoch,
                message_index: index,
                bytes: Arc::clone(&bytes),
            };
            self.queue.push(Reverse(Queued {
                seq: self.seq,
                delivery: delivery.clone(),
            }));
            self.seq += 1;
            out.push(delivery);
        }
        Ok(out)
    }

    /// Removes and returns every delivery due at or before `clock`, in
    /// (time, send sequence) order.
    pub fn pop_due(&mut self, clock: f64) -> Vec<Delivery> {
        let mut out = Vec::new();
        while let Some(Reverse(q)) = self.queue.peek() {
            if q.delivery.time > clock {
                break;
            }
            out.push(self.queue.pop().expect("peeked").0.delivery);
        }
        out
    }

    /// Re-sends the latest messages once per elapsed rebroadcast tick. Ticks
    /// fall at whole multiples of the period.
    pub fn periodic_rebroadcast(
        &mut self,
        latest: &[TrajectoryMessage],
        clock: f64,
    ) -> Result<Vec<Delivery>, NetError> {
        let mut out = Vec::new();
        let period = self.config.rebroadcast_period;
        while self.next_tick as f64 * period <= clock + 1e-9 {
            let tick = self.next_tick as f64 * period;
            for msg in latest {
                out.extend(self.broadcast(msg, tick)?);
            }
            self.next_tick += 1;
        }
        Ok(out)
    }

    pub fn write_trace<W: Write>(&self, w: W) -> Result<(), NetError> {
        write_net_trace(&self.trace, w)
    }
}

pub fn write_net_trace<W: Write>(rows: &[NetTraceRow], w: W) -> Result<(), NetError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["message", "send_time", "sender", "receiver", "epoch", "delivered", "delivery_time"])?;
    for r in rows {
        out.write_record([
            r.message.to_string(),
            format!("{:.6}", r.send_time),
            r.sender.to_string(),
            r.receiver.to_string(),
            r.epoch.to_string(),
            (r.delivered as u8).to_string(),
            r.delivery_time.map(|t| format!("{t:.6}")).unwrap_or_default(),
        ])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochDecision {
    New,
    Refresh,
    Stale,
}

/// Highest epoch seen per sender.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochFilter {
    latest: BTreeMap<AgentId, u32>,
}

impl EpochFilter {
    pub fn offer(&mut self, sender: AgentId, epoch: u32) -> EpochDecision {
        match self.latest.get(&sender) {
            Some(&e) if epoch < e => EpochDecision::Stale,
            Some(&e) if epoch == e => EpochDecision::Refresh,
            _ => {
                self.latest.insert(sender, epoch);
                EpochDecision::New
            }
        }
    }

    pub fn latest(&self, sender: AgentId) -> Option<u32> {
        self.latest.get(&sender).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    /// Planning order at startup; empty means ascending id.
    pub startup_order: Vec<AgentId>,
    /// Injected clock offset per agent id, seconds.
    pub clock_offsets: Vec<f64>,
    pub sync: bool,
    /// One-way latency of a chain hop, seconds.
    pub hop_latency: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            startup_order: Vec::new(),
            clock_offsets: Vec::new(),
            sync: true,
            hop_latency: 0.0,
        }
    }
}

impl ChainConfig {
    /// The configured order, checked to be a permutation of `agents`.
    pub fn order(&self, agents: &[AgentId]) -> Result<Vec<AgentId>, NetError> {
        let mut sorted = agents.to_vec();
        sorted.sort_unstable();
        if self.startup_order.is_empty() {
            return Ok(sorted);
        }
        let mut given = self.startup_order.clone();
        given.sort_unstable();
        if given != sorted {
            return Err(NetError::NotAPermutation);
        }
        Ok(self.startup_order.clone())
    }

    pub fn offset(&self, agent: AgentId) -> f64 {
        self.clock_offsets.get(agent as usize).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StartupEntry {
    pub agent: AgentId,
    pub time: f64,
    /// Senders whose initial trajectories had arrived when the agent planned.
    pub predecessors: Vec<AgentId>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StartupSchedule {
    pub entries: Vec<StartupEntry>,
}

impl StartupSchedule {
    pub fn realized_order(&self) -> Vec<AgentId> {
        self.entries.iter().map(|e| e.agent).collect()
    }
}

/// Sequential startup over the reliable chain: each agent plans once the
/// initial trajectories of all earlier agents in the order have reached it.
///
/// `plan(agent, predecessor messages, time)` returns the agent's initial
/// trajectory message.
pub fn chain_startup<F>(
    chain: &ChainConfig,
    agents: &[AgentId],
    start: f64,
    mut plan: F,
) -> Result<StartupSchedule, NetError>
where
    F: FnMut(AgentId, &[TrajectoryMessage], f64) -> TrajectoryMessage,
{
    let order = chain.order(agents)?;
    let mut sent: Vec<TrajectoryMessage> = Vec::with_capacity(order.len());
    let mut schedule = StartupSchedule::default();
    for (k, &agent) in order.iter().enumerate() {
        let time = start + k as f64 * chain.hop_latency;
        let msg = plan(agent, &sent, time);
        schedule.entries.push(StartupEntry {
            agent,
            time,
            predecessors: sent.iter().map(|m| m.agent_id).collect(),
        });
        sent.push(msg);
    }
    Ok(schedule)
}

/// One-shot offset exchange against the lowest agent id over the chain.
///
/// Agent `k` sends its local time, the reference replies with its local
/// receive time, and `k` takes the midpoint of its send and receive times
/// minus the reply as its offset. Returns per-agent corrections to subtract
/// from the perceived clock; all zero when sync is disabled.
pub fn sync_clocks(chain: &ChainConfig, agents: &[AgentId]) -> BTreeMap<AgentId, f64> {
    let mut out = BTreeMap::new();
    let Some(&reference) = agents.iter().min() else {
        return out;
    };
    let latency = chain.hop_latency;
    let base = 0.0;
    for &a in agents {
        let correction = if chain.sync {
            let sent = base + chain.offset(a);
            let reply = base + latency + chain.offset(reference);
            let back = base + 2.0 * latency + chain.offset(a);
            0.5 * (sent + back) - reply
        } else {
            0.0
        };
        out.insert(a, correction);
    }
    out
}
