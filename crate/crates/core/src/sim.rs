//! Deterministic discrete-event cluster simulator.
//!
//! The cluster owns machines, their slabs and stored split bytes, a virtual
//! clock with nanosecond resolution, and a single event queue ordered by
//! `(time, submission sequence)`. Split I/O takes effect when its event
//! fires, so a machine failure scheduled before an I/O's completion time is
//! observed by that I/O. Corruption is injected into stored bytes and is
//! only ever discovered through the coding paths.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt;
use std::io;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::placement::{ClusterShape, MachineId};
use crate::rng::{self, labels, SimRng};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid cluster shape: {0}")]
    InvalidShape(String),
    #[error("unknown entity: {0}")]
    UnknownEntity(String),
    #[error("invalid latency model: {0}")]
    InvalidLatency(String),
    #[error("fault script: {0}")]
    Script(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

/// Virtual time in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_micros(us: f64) -> Self {
        SimTime(micros_to_nanos(us))
    }

    pub fn as_micros(self) -> f64 {
        self.0 as f64 / 1_000.0
    }

    pub fn saturating_sub(self, other: SimTime) -> u64 {
        self.0.saturating_sub(other.0)
    }
}

impl std::ops::Add<u64> for SimTime {
    type Output = SimTime;

    fn add(self, ns: u64) -> SimTime {
        SimTime(self.0 + ns)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}us", self.as_micros())
    }
}

pub fn micros_to_nanos(us: f64) -> u64 {
    (us * 1_000.0).round().max(0.0) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlabId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RangeId(pub u64);

impl fmt::Display for RangeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Location of one slab.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlabRef {
    pub machine: MachineId,
    pub slab: SlabId,
}

impl fmt::Display for SlabRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/s{}", self.machine, self.slab.0)
    }
}

/// Which range and split position a mapped slab serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SlabOwner {
    pub range: RangeId,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlabState {
    Available,
    Evicted,
    Regenerating,
    Failed,
}

#[derive(Debug, Clone)]
pub struct Slab {
    pub id: SlabId,
    /// `None` for pre-allocated slabs not yet mapped by any manager.
    pub owner: Option<SlabOwner>,
    pub size: usize,
    /// Page index to split bytes.
    pub pages: BTreeMap<u32, Vec<u8>>,
    pub state: SlabState,
    /// Decayed access frequency.
    pub accesses: f64,
}

impl Slab {
    pub fn stored_bytes(&self) -> usize {
        self.pages.values().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MachineState {
    Up,
    Failed,
    Partitioned,
}

#[derive(Debug, Clone)]
pub struct Machine {
    pub id: MachineId,
    pub total_bytes: u64,
    /// Memory used by local applications.
    pub local_bytes: u64,
    pub slabs: BTreeMap<SlabId, Slab>,
    pub state: MachineState,
}

impl Machine {
    pub fn slab_bytes(&self) -> u64 {
        self.slabs.values().map(|s| s.size as u64).sum()
    }

    pub fn used_bytes(&self) -> u64 {
        self.local_bytes + self.slab_bytes()
    }

    pub fn free_bytes(&self) -> u64 {
        self.total_bytes.saturating_sub(self.used_bytes())
    }

    pub fn free_fraction(&self) -> f64 {
        self.free_bytes() as f64 / self.total_bytes as f64
    }

    pub fn is_up(&self) -> bool {
        self.state == MachineState::Up
    }

    pub fn mapped_slabs(&self) -> impl Iterator<Item = &Slab> {
        self.slabs.values().filter(|s| s.owner.is_some())
    }

    pub fn unmapped_slabs(&self) -> impl Iterator<Item = &Slab> {
        self.slabs.values().filter(|s| s.owner.is_none())
    }
}

/// Whether the straggler coin is flipped per split or once per operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StragglerScope {
    /// Every split draw is independently a straggler.
    #[default]
    PerSplit,
    /// With the straggler probability, exactly one split of the operation straggles.
    PerOperation,
}

/// Split latency distribution and fixed per-operation costs, in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyModel {
    /// Median of the lognormal one-way split latency.
    pub median_us: f64,
    /// Shape of the lognormal (standard deviation of the log).
    pub sigma: f64,
    /// Transfer rate added on top of the base draw.
    pub bandwidth_bytes_per_us: f64,
    /// Cost of posting one split request; requests are posted back to back.
    pub per_split_us: f64,
    pub straggler_probability: f64,
    pub straggler_multiplier: f64,
    pub straggler_scope: StragglerScope,
    /// Default inflation while background network load is active.
    pub background_multiplier: f64,
    pub encode_us: f64,
    pub decode_us: f64,
    /// Added per operation when not running to completion.
    pub context_switch_us: f64,
    /// Added per operation when coding is not done in place.
    pub copy_us: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            median_us: 1.5,
            sigma: 0.25,
            bandwidth_bytes_per_us: 7_000.0,
            per_split_us: 0.05,
            straggler_probability: 0.0,
            straggler_multiplier: 10.0,
            straggler_scope: StragglerScope::PerSplit,
            background_multiplier: 2.0,
            encode_us: 0.7,
            decode_us: 1.5,
            context_switch_us: 2.6,
            copy_us: 1.0,
        }
    }
}

/// Per-draw modifiers.
#[derive(Debug, Clone, Copy, Default)]
pub struct SplitContext {
    /// `None` flips the model's straggler coin, `Some` forces the outcome.
    pub straggler: Option<bool>,
    /// Background inflation factor if background load is active.
    pub background: Option<f64>,
    pub bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitDraw {
    pub nanos: u64,
    pub straggler: bool,
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("median_us", self.median_us),
            ("bandwidth_bytes_per_us", self.bandwidth_bytes_per_us),
            ("straggler_multiplier", self.straggler_multiplier),
            ("background_multiplier", self.background_multiplier),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::InvalidLatency(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("sigma", self.sigma),
            ("per_split_us", self.per_split_us),
            ("encode_us", self.encode_us),
            ("decode_us", self.decode_us),
            ("context_switch_us", self.context_switch_us),
            ("copy_us", self.copy_us),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::InvalidLatency(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.straggler_probability) {
            return Err(SimError::InvalidLatency("straggler_probability outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Lognormal base plus transfer time, in microseconds.
    pub fn sample_base_us<R: Rng + ?Sized>(&self, rng: &mut R, bytes: usize) -> f64 {
        let base = if self.sigma == 0.0 {
            self.median_us
        } else {
            LogNormal::new(self.median_us.ln(), self.sigma)
                .expect("validated lognormal parameters")
                .sample(rng)
        };
        base + bytes as f64 / self.bandwidth_bytes_per_us
    }

    /// Base draw, times the straggler multiplier if this split straggles,
    /// times the background factor when background load is active.
    pub fn sample_split_latency<R: Rng + ?Sized>(&self, rng: &mut R, ctx: SplitContext) -> SplitDraw {
        let mut us = self.sample_base_us(rng, ctx.bytes);
        let straggler = match ctx.straggler {
            Some(forced) => forced,
            None => self.straggler_probability > 0.0 && rng.random_bool(self.straggler_probability),
        };
        if straggler {
            us *= self.straggler_multiplier;
        }
        if let Some(factor) = ctx.background {
            us *= factor;
        }
        SplitDraw { nanos: micros_to_nanos(us), straggler }
    }

    /// Straggler flags for one operation fanning out to `fanout` splits.
    pub fn straggler_plan<R: Rng + ?Sized>(&self, rng: &mut R, fanout: usize) -> Vec<Option<bool>> {
        match self.straggler_scope {
            StragglerScope::PerSplit => vec![None; fanout],
            StragglerScope::PerOperation => {
                let mut plan = vec![Some(false); fanout];
                if fanout > 0
                    && self.straggler_probability > 0.0
                    && rng.random_bool(self.straggler_probability)
                {
                    plan[rng.random_range(0..fanout)] = Some(true);
                }
                plan
            }
        }
    }
}

/// One scripted fault or load change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultEvent {
    /// Machine crashes; its memory is lost.
    Fail { machine: u32, at_us: f64 },
    /// Machine comes back empty.
    Recover { machine: u32, at_us: f64 },
    /// Machine unreachable; memory retained.
    Partition { machine: u32, at_us: f64 },
    /// Partitioned machine reachable again.
    Heal { machine: u32, at_us: f64 },
    /// The slab holding split `index` of `range` is evicted by its host.
    Evict { range: u64, index: usize, at_us: f64 },
    /// XOR `mask` into the stored split of `page` starting at `offset`.
    Corrupt {
        range: u64,
        index: usize,
        page: u32,
        #[serde(default)]
        offset: usize,
        mask: Vec<u8>,
        at_us: f64,
    },
    /// Background network load between `start_us` and `end_us`.
    BackgroundLoad {
        start_us: f64,
        end_us: f64,
        #[serde(default)]
        multiplier: Option<f64>,
        #[serde(default)]
        machines: Option<Vec<u32>>,
    },
    /// Workload arrival rate multiplied between `start_us` and `end_us`.
    Burst { start_us: f64, end_us: f64, rate_multiplier: f64 },
    /// Local applications on `machine` now use `bytes`.
    LocalMemory { machine: u32, bytes: u64, at_us: f64 },
}

impl FaultEvent {
    pub fn at(&self) -> SimTime {
        let us = match self {
            FaultEvent::Fail { at_us, .. }
            | FaultEvent::Recover { at_us, .. }
            | FaultEvent::Partition { at_us, .. }
            | FaultEvent::Heal { at_us, .. }
            | FaultEvent::Evict { at_us, .. }
            | FaultEvent::Corrupt { at_us, .. }
            | FaultEvent::LocalMemory { at_us, .. } => *at_us,
            FaultEvent::BackgroundLoad { start_us, .. } | FaultEvent::Burst { start_us, .. } => *start_us,
        };
        SimTime::from_micros(us)
    }

    pub fn name(&self) -> &'static str {
        match self {
            FaultEvent::Fail { .. } => "fail",
            FaultEvent::Recover { .. } => "recover",
            FaultEvent::Partition { .. } => "partition",
            FaultEvent::Heal { .. } => "heal",
            FaultEvent::Evict { .. } => "evict",
            FaultEvent::Corrupt { .. } => "corrupt",
            FaultEvent::BackgroundLoad { .. } => "background_load",
            FaultEvent::Burst { .. } => "burst",
            FaultEvent::LocalMemory { .. } => "local_memory",
        }
    }
}

/// Timed fault events, kept sorted by time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultScript {
    #[serde(default)]
    pub events: Vec<FaultEvent>,
}

impl FaultScript {
    pub fn new(mut events: Vec<FaultEvent>) -> Self {
        events.sort_by_key(FaultEvent::at);
        Self { events }
    }

    /// Reads a TOML document with an `events` array of tables.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let script: FaultScript = toml::from_str(s).map_err(|e| SimError::Script(e.to_string()))?;
        Ok(Self::new(script.events))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Rate multiplier for workload arrivals at `t`.
    pub fn burst_multiplier(&self, t: SimTime) -> f64 {
        self.events
            .iter()
            .filter_map(|e| match e {
                FaultEvent::Burst { start_us, end_us, rate_multiplier }
                    if SimTime::from_micros(*start_us) <= t && t < SimTime::from_micros(*end_us) =>
                {
                    Some(*rate_multiplier)
                }
                _ => None,
            })
            .fold(1.0, f64::max)
    }
}

/// Who is waiting for an I/O completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Actor {
    Manager,
    Monitor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OpId(pub u64);

/// Something scheduled on the event queue.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    SplitWrite { actor: Actor, op: OpId, target: SlabRef, page: u32, bytes: Vec<u8> },
    SplitRead { actor: Actor, op: OpId, target: SlabRef, page: u32 },
    Timer { actor: Actor, op: OpId, tag: u32 },
    Fault(FaultEvent),
    BackgroundEnd { id: usize },
}

impl Event {
    fn op_name(&self) -> &'static str {
        match self {
            Event::SplitWrite { .. } => "split_write",
            Event::SplitRead { .. } => "split_read",
            Event::Timer { .. } => "timer",
            Event::Fault(f) => f.name(),
            Event::BackgroundEnd { .. } => "background_end",
        }
    }
}

/// Effect of an event at the moment it fired.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Written,
    Data(Vec<u8>),
    /// Target machine down or partitioned.
    Disconnected,
    /// Slab gone, not writable, or page never written.
    Rejected,
    Fired,
    /// Fault applied; `evicted` names the slab owner for evictions,
    /// `lost` lists owners of slabs made unreachable by a machine fault.
    Applied { evicted: Option<(SlabRef, SlabOwner)>, lost: Vec<(SlabRef, SlabOwner)> },
    Ignored(String),
}

impl Outcome {
    fn label(&self) -> String {
        match self {
            Outcome::Written => "written".into(),
            Outcome::Data(_) => "data".into(),
            Outcome::Disconnected => "disconnect".into(),
            Outcome::Rejected => "rejected".into(),
            Outcome::Fired => "fired".into(),
            Outcome::Applied { .. } => "applied".into(),
            Outcome::Ignored(why) => format!("ignored:{why}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub time: SimTime,
    pub seq: u64,
    pub event: Event,
    pub outcome: Outcome,
}

/// One event-log row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LogRecord {
    pub time_ns: u64,
    pub op: String,
    pub entity: String,
    pub outcome: String,
}

#[derive(Debug, Clone)]
struct BackgroundWindow {
    end: SimTime,
    multiplier: f64,
    machines: Option<Vec<u32>>,
}

/// Simulator configuration beyond the cluster shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub memory_per_machine: u64,
    pub slab_size: usize,
    /// Keep an in-memory event log (needed for CSV export).
    pub record_log: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { memory_per_machine: 64 << 20, slab_size: 64 << 10, record_log: true }
    }
}

#[derive(Debug)]
pub struct Cluster {
    pub config: ClusterConfig,
    pub latency: LatencyModel,
    machines: Vec<Machine>,
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Reverse<(SimTime, u64)>>,
    pending: HashMap<u64, Event>,
    next_slab: u64,
    next_op: u64,
    owners: HashMap<(RangeId, usize), SlabRef>,
    background: Vec<Option<BackgroundWindow>>,
    latency_rng: SimRng,
    log: Vec<LogRecord>,
}

pub fn init_cluster(shape: &ClusterShape, latency: LatencyModel, seed: u64) -> Result<Cluster> {
    Cluster::new(shape, latency, ClusterConfig::default(), seed)
}

impl Cluster {
    pub fn new(
        shape: &ClusterShape,
        latency: LatencyModel,
        config: ClusterConfig,
        seed: u64,
    ) -> Result<Self> {
        if shape.machines == 0 {
            return Err(SimError::InvalidShape("cluster needs at least one machine".into()));
        }
        if config.slab_size == 0 || config.memory_per_machine < config.slab_size as u64 {
            return Err(SimError::InvalidShape("machine memory must hold at least one slab".into()));
        }
        latency.validate()?;
        let machines = (0..shape.machines as u32)
            .map(|i| Machine {
                id: MachineId(i),
                total_bytes: config.memory_per_machine,
                local_bytes: 0,
                slabs: BTreeMap::new(),
                state: MachineState::Up,
            })
            .collect();
        Ok(Self {
            config,
            latency,
            machines,
            now: SimTime::ZERO,
            seq: 0,
            queue: BinaryHeap::new(),
            pending: HashMap::new(),
            next_slab: 0,
            next_op: 0,
            owners: HashMap::new(),
            background: Vec::new(),
            latency_rng: rng::stream(seed, labels::LATENCY),
            log: Vec::new(),
        })
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn machines(&self) -> &[Machine] {
        &self.machines
    }

    pub fn machine(&self, id: MachineId) -> Option<&Machine> {
        self.machines.get(id.index())
    }

    pub fn machine_mut(&mut self, id: MachineId) -> Option<&mut Machine> {
        self.machines.get_mut(id.index())
    }

    pub fn slab(&self, at: SlabRef) -> Option<&Slab> {
        self.machine(at.machine)?.slabs.get(&at.slab)
    }

    pub fn slab_mut(&mut self, at: SlabRef) -> Option<&mut Slab> {
        self.machines.get_mut(at.machine.index())?.slabs.get_mut(&at.slab)
    }

    pub fn is_up(&self, m: MachineId) -> bool {
        self.machine(m).is_some_and(Machine::is_up)
    }

    pub fn next_op_id(&mut self) -> OpId {
        self.next_op += 1;
        OpId(self.next_op)
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn latency_rng(&mut self) -> &mut SimRng {
        &mut self.latency_rng
    }

    /// Current slab serving `(range, index)`, if any.
    pub fn owner_slab(&self, range: RangeId, index: usize) -> Option<SlabRef> {
        self.owners.get(&(range, index)).copied()
    }

    /// Schedules `event` at `at` (clamped to now). Returns its sequence number.
    pub fn submit(&mut self, at: SimTime, event: Event) -> u64 {
        let at = at.max(self.now);
        self.seq += 1;
        self.queue.push(Reverse((at, self.seq)));
        self.pending.insert(self.seq, event);
        self.seq
    }

    /// Drops a scheduled event; returns it if it had not fired.
    pub fn cancel(&mut self, seq: u64) -> Option<Event> {
        self.pending.remove(&seq)
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.iter().filter(|Reverse((_, s))| self.pending.contains_key(s)).map(|Reverse((t, _))| *t).min()
    }

    pub fn is_quiescent(&self) -> bool {
        self.pending.is_empty()
    }

    /// Fires the next event. `None` when the queue is empty.
    pub fn step(&mut self) -> Option<Completion> {
        loop {
            let Reverse((time, seq)) = self.queue.pop()?;
            let Some(event) = self.pending.remove(&seq) else {
                continue;
            };
            debug_assert!(time >= self.now, "virtual time went backwards");
            self.now = time;
            let outcome = self.apply(&event);
            if self.config.record_log {
                self.log.push(LogRecord {
                    time_ns: time.0,
                    op: event.op_name().to_string(),
                    entity: entity_of(&event),
                    outcome: outcome.label(),
                });
            }
            return Some(Completion { time, seq, event, outcome });
        }
    }

    /// Enqueues every event of a fault script.
    pub fn inject(&mut self, script: &FaultScript) -> Result<()> {
        let n = self.machines.len() as u32;
        for e in &script.events {
            let machine = match e {
                FaultEvent::Fail { machine, .. }
                | FaultEvent::Recover { machine, .. }
                | FaultEvent::Partition { machine, .. }
                | FaultEvent::Heal { machine, .. }
                | FaultEvent::LocalMemory { machine, .. } => Some(*machine),
                _ => None,
            };
            if let Some(m) = machine.filter(|m| *m >= n) {
                return Err(SimError::UnknownEntity(format!("machine {m} in `{}` event", e.name())));
            }
            if let FaultEvent::BackgroundLoad { machines: Some(ms), .. } = e {
                if let Some(m) = ms.iter().find(|m| **m >= n) {
                    return Err(SimError::UnknownEntity(format!("machine {m} in background_load")));
                }
            }
        }
        for e in &script.events {
            self.submit(e.at(), Event::Fault(e.clone()));
        }
        Ok(())
    }

    /// Background inflation currently affecting `machine`.
    pub fn background_factor(&self, machine: MachineId) -> Option<f64> {
        self.background
            .iter()
            .flatten()
            .filter(|w| w.end > self.now)
            .filter(|w| w.machines.as_ref().is_none_or(|ms| ms.contains(&machine.0)))
            .map(|w| w.multiplier)
            .reduce(f64::max)
    }

    /// Straggler flags for an operation fanning out to `fanout` splits.
    pub fn straggler_plan(&mut self, fanout: usize) -> Vec<Option<bool>> {
        self.latency.straggler_plan(&mut self.latency_rng, fanout)
    }

    /// One split latency draw against `machine` at the current time.
    pub fn sample_split(&mut self, machine: MachineId, bytes: usize, straggler: Option<bool>) -> SplitDraw {
        let ctx = SplitContext { straggler, background: self.background_factor(machine), bytes };
        self.latency.sample_split_latency(&mut self.latency_rng, ctx)
    }

    /// Allocates a slab on `machine`, reusing an unmapped one if present.
    pub fn allocate_slab(&mut self, machine: MachineId, owner: Option<SlabOwner>) -> Option<SlabRef> {
        let slab_size = self.config.slab_size;
        let m = self.machines.get_mut(machine.index())?;
        if !m.is_up() {
            return None;
        }
        let reuse = if owner.is_some() { m.unmapped_slabs().map(|s| s.id).next() } else { None };
        let id = match reuse {
            Some(id) => id,
            None => {
                if m.free_bytes() < slab_size as u64 {
                    return None;
                }
                self.next_slab += 1;
                let id = SlabId(self.next_slab);
                m.slabs.insert(
                    id,
                    Slab {
                        id,
                        owner: None,
                        size: slab_size,
                        pages: BTreeMap::new(),
                        state: SlabState::Available,
                        accesses: 0.0,
                    },
                );
                id
            }
        };
        let at = SlabRef { machine, slab: id };
        if let Some(o) = owner {
            self.bind(at, o);
        }
        Some(at)
    }

    /// Points `(range, index)` at `at` and records the owner on the slab.
    pub fn bind(&mut self, at: SlabRef, owner: SlabOwner) {
        if let Some(slab) = self.slab_mut(at) {
            slab.owner = Some(owner);
        }
        self.owners.insert((owner.range, owner.index), at);
    }

    /// Frees a slab regardless of machine state.
    pub fn release_slab(&mut self, at: SlabRef) -> Option<Slab> {
        let slab = self.machines.get_mut(at.machine.index())?.slabs.remove(&at.slab)?;
        if let Some(o) = slab.owner {
            if self.owners.get(&(o.range, o.index)) == Some(&at) {
                self.owners.remove(&(o.range, o.index));
            }
        }
        Some(slab)
    }

    pub fn set_slab_state(&mut self, at: SlabRef, state: SlabState) {
        if let Some(s) = self.slab_mut(at) {
            s.state = state;
        }
    }

    /// Reads stored split bytes without going through the event queue.
    /// Used by background regeneration, which accounts its own latency.
    pub fn peek_split(&self, at: SlabRef, page: u32) -> Option<&[u8]> {
        let m = self.machine(at.machine)?;
        if !m.is_up() {
            return None;
        }
        let slab = m.slabs.get(&at.slab)?;
        if slab.state == SlabState::Failed || slab.state == SlabState::Evicted {
            return None;
        }
        slab.pages.get(&page).map(Vec::as_slice)
    }

    /// Stores split bytes directly (regeneration target writes).
    pub fn store_split(&mut self, at: SlabRef, page: u32, bytes: Vec<u8>) -> bool {
        match self.slab_mut(at) {
            Some(slab) => {
                slab.pages.insert(page, bytes);
                true
            }
            None => false,
        }
    }

    /// Total split bytes stored on reachable slabs.
    pub fn stored_bytes(&self) -> usize {
        self.machines.iter().flat_map(|m| m.slabs.values()).map(Slab::stored_bytes).sum()
    }

    pub fn write_log_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.log {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn apply(&mut self, event: &Event) -> Outcome {
        match event {
            Event::SplitWrite { target, page, bytes, .. } => {
                let Some(m) = self.machines.get_mut(target.machine.index()) else {
                    return Outcome::Rejected;
                };
                if !m.is_up() {
                    return Outcome::Disconnected;
                }
                match m.slabs.get_mut(&target.slab) {
                    Some(slab) if slab.state == SlabState::Available => {
                        slab.pages.insert(*page, bytes.clone());
                        slab.accesses += 1.0;
                        Outcome::Written
                    }
                    _ => Outcome::Rejected,
                }
            }
            Event::SplitRead { target, page, .. } => {
                let Some(m) = self.machines.get_mut(target.machine.index()) else {
                    return Outcome::Rejected;
                };
                if !m.is_up() {
                    return Outcome::Disconnected;
                }
                match m.slabs.get_mut(&target.slab) {
                    Some(slab) if slab.state != SlabState::Failed && slab.state != SlabState::Evicted => {
                        slab.accesses += 1.0;
                        match slab.pages.get(page) {
                            Some(bytes) => Outcome::Data(bytes.clone()),
                            None => Outcome::Rejected,
                        }
                    }
                    _ => Outcome::Rejected,
                }
            }
            Event::Timer { .. } => Outcome::Fired,
            Event::BackgroundEnd { id } => {
                if let Some(w) = self.background.get_mut(*id) {
                    *w = None;
                }
                Outcome::Fired
            }
            Event::Fault(fault) => self.apply_fault(fault),
        }
    }

    fn apply_fault(&mut self, fault: &FaultEvent) -> Outcome {
        let none = || Outcome::Applied { evicted: None, lost: Vec::new() };
        match fault {
            FaultEvent::Fail { machine, .. } => {
                let id = MachineId(*machine);
                let lost = self.owned_slabs(id);
                let m = &mut self.machines[id.index()];
                m.state = MachineState::Failed;
                for s in m.slabs.values_mut() {
                    s.state = SlabState::Failed;
                }
                Outcome::Applied { evicted: None, lost }
            }
            FaultEvent::Partition { machine, .. } => {
                let id = MachineId(*machine);
                let lost = self.owned_slabs(id);
                self.machines[id.index()].state = MachineState::Partitioned;
                Outcome::Applied { evicted: None, lost }
            }
            FaultEvent::Recover { machine, .. } => {
                let id = MachineId(*machine);
                let refs: Vec<SlabRef> = self.machines[id.index()]
                    .slabs
                    .keys()
                    .map(|&slab| SlabRef { machine: id, slab })
                    .collect();
                for r in refs {
                    self.release_slab(r);
                }
                let m = &mut self.machines[id.index()];
                m.state = MachineState::Up;
                none()
            }
            FaultEvent::Heal { machine, .. } => {
                let m = &mut self.machines[*machine as usize];
                if m.state == MachineState::Partitioned {
                    m.state = MachineState::Up;
                }
                none()
            }
            FaultEvent::Evict { range, index, .. } => {
                let Some(at) = self.owner_slab(RangeId(*range), *index) else {
                    return Outcome::Ignored("no such slab".into());
                };
                match self.release_slab(at) {
                    Some(slab) => Outcome::Applied {
                        evicted: slab.owner.map(|o| (at, o)),
                        lost: Vec::new(),
                    },
                    None => Outcome::Ignored("no such slab".into()),
                }
            }
            FaultEvent::Corrupt { range, index, page, offset, mask, .. } => {
                let Some(at) = self.owner_slab(RangeId(*range), *index) else {
                    return Outcome::Ignored("no such slab".into());
                };
                let Some(bytes) = self.slab_mut(at).and_then(|s| s.pages.get_mut(page)) else {
                    return Outcome::Ignored("page not stored".into());
                };
                for (b, m) in bytes.iter_mut().skip(*offset).zip(mask) {
                    *b ^= m;
                }
                none()
            }
            FaultEvent::BackgroundLoad { end_us, multiplier, machines, .. } => {
                let id = self.background.len();
                let end = SimTime::from_micros(*end_us);
                self.background.push(Some(BackgroundWindow {
                    end,
                    multiplier: multiplier.unwrap_or(self.latency.background_multiplier),
                    machines: machines.clone(),
                }));
                self.submit(end, Event::BackgroundEnd { id });
                none()
            }
            FaultEvent::Burst { .. } => none(),
            FaultEvent::LocalMemory { machine, bytes, .. } => {
                self.machines[*machine as usize].local_bytes = *bytes;
                none()
            }
        }
    }

    fn owned_slabs(&self, id: MachineId) -> Vec<(SlabRef, SlabOwner)> {
        self.machines[id.index()]
            .slabs
            .values()
            .filter_map(|s| s.owner.map(|o| (SlabRef { machine: id, slab: s.id }, o)))
            .filter(|(at, o)| self.owners.get(&(o.range, o.index)) == Some(at))
            .collect()
    }
}

fn entity_of(event: &Event) -> String {
    match event {
        Event::SplitWrite { op, target, page, .. } | Event::SplitRead { op, target, page, .. } => {
            format!("op{}:{target}:p{page}", op.0)
        }
        Event::Timer { op, tag, .. } => format!("op{}:t{tag}", op.0),
        Event::BackgroundEnd { id } => format!("bg{id}"),
        Event::Fault(f) => match f {
            FaultEvent::Fail { machine, .. }
            | FaultEvent::Recover { machine, .. }
            | FaultEvent::Partition { machine, .. }
            | FaultEvent::Heal { machine, .. }
            | FaultEvent::LocalMemory { machine, .. } => format!("m{machine}"),
            FaultEvent::Evict { range, index, .. } => format!("r{range}/i{index}"),
            FaultEvent::Corrupt { range, index, page, .. } => format!("r{range}/i{index}:p{page}"),
            FaultEvent::BackgroundLoad { .. } | FaultEvent::Burst { .. } => "cluster".into(),
        },
    }
}
