//! Resilience manager: maps address ranges onto `k + r` slabs and runs the
//! erasure-coded data path on top of the simulated cluster.
//!
//! Writes send the `k` data splits first and acknowledge the caller once they
//! land; parity is encoded and sent afterwards. Reads fan out to `k + Δ`
//! randomly chosen slabs and decode from the first `k` arrivals. Operations
//! on one page are serialized; everything else runs concurrently on the
//! simulator's event queue.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coding::{Codec, CodecParams, CodingError, Page, Split};
use crate::placement::{least_loaded, LoadVector, MachineId, PlacementPlan, Scheme};
use crate::rng::{self, labels, SimRng};
use crate::sim::{
    micros_to_nanos, Actor, Cluster, Completion, Event, OpId, Outcome, RangeId, SimTime, SlabOwner,
    SlabRef, SlabState,
};

#[derive(Debug, Error)]
pub enum ManagerError {
    #[error("capacity exhausted: {available} machines can host a slab for {range}, need {needed}")]
    CapacityExhausted { range: RangeId, available: usize, needed: usize },
    #[error("unknown address range {0}")]
    UnknownRange(RangeId),
    #[error("page {page} outside range capacity {capacity}")]
    PageOutOfRange { page: u32, capacity: u32 },
    #[error(transparent)]
    Coding(#[from] CodingError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ManagerError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManagerConfig {
    /// Acknowledge writes after the data splits and encode parity afterwards.
    pub async_parity: bool,
    /// Poll for RDMA completions instead of sleeping.
    pub run_to_completion: bool,
    /// Code directly in the page plus an `r`-split buffer.
    pub in_place_coding: bool,
    /// Wait for `k + Δ` splits and check them before returning a read.
    pub verify_reads: bool,
    pub error_correction_limit: f64,
    pub slab_regeneration_limit: f64,
    /// Number of recent verified reads tracked per machine.
    pub health_window: usize,
    pub page_size: usize,
    /// Write corrected splits back to the slab they came from.
    pub repair_corrupted: bool,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        Self {
            async_parity: true,
            run_to_completion: true,
            in_place_coding: true,
            verify_reads: false,
            error_correction_limit: 0.05,
            slab_regeneration_limit: 0.20,
            health_window: 64,
            page_size: 4096,
            repair_corrupted: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PageAddr {
    pub range: RangeId,
    pub page: u32,
}

impl PageAddr {
    pub fn new(range: u64, page: u32) -> Self {
        Self { range: RangeId(range), page }
    }
}

impl fmt::Display for PageAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:p{}", self.range, self.page)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotState {
    Healthy,
    Failed,
    Regenerating,
    Suspect,
}

impl SlotState {
    pub fn readable(self) -> bool {
        matches!(self, SlotState::Healthy | SlotState::Suspect)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub at: SlabRef,
    pub state: SlotState,
}

/// One address range and its `k + r` slabs; slot `i` holds split `i`.
#[derive(Debug, Clone)]
pub struct AddressRange {
    pub id: RangeId,
    pub group: usize,
    pub page_capacity: u32,
    pub slots: Vec<Slot>,
    /// Pages ever written.
    pub written: BTreeSet<u32>,
    /// Per slot: latest split bytes that could not be written because the
    /// slot was unavailable. Replayed when the slot is regenerated.
    pub pending: Vec<BTreeMap<u32, Vec<u8>>>,
    /// A background consistency check saw a mismatch.
    pub flagged: bool,
    /// Fewer than `k` slots survived.
    pub lost: bool,
}

impl AddressRange {
    pub fn readable_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().enumerate().filter(|(_, s)| s.state.readable()).map(|(i, _)| i)
    }

    pub fn healthy_count(&self) -> usize {
        self.readable_slots().count()
    }

    pub fn machines(&self) -> Vec<MachineId> {
        self.slots.iter().map(|s| s.at.machine).collect()
    }
}

/// Sliding window of verified-read outcomes for one machine.
#[derive(Debug, Clone)]
pub struct MachineHealth {
    pub machine: MachineId,
    pub errors: u64,
    window: VecDeque<bool>,
    capacity: usize,
}

impl MachineHealth {
    pub fn new(machine: MachineId, capacity: usize) -> Self {
        Self { machine, errors: 0, window: VecDeque::with_capacity(capacity), capacity: capacity.max(1) }
    }

    pub fn record(&mut self, corrupted: bool) {
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(corrupted);
        self.errors += u64::from(corrupted);
    }

    pub fn error_rate(&self) -> f64 {
        if self.window.is_empty() {
            return 0.0;
        }
        self.window.iter().filter(|e| **e).count() as f64 / self.window.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "R")]
    Read,
    #[serde(rename = "W")]
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpOutcome {
    InFlight,
    Ok,
    /// Read returned a page after locating and removing corrupted splits.
    Corrected(usize),
    Unrecoverable,
    Uncorrectable,
    WriteFailed,
    CapacityExhausted,
    Unwritten,
}

impl OpOutcome {
    pub fn label(&self) -> &'static str {
        match self {
            OpOutcome::InFlight => "in_flight",
            OpOutcome::Ok => "ok",
            OpOutcome::Corrected(_) => "corrected",
            OpOutcome::Unrecoverable => "unrecoverable",
            OpOutcome::Uncorrectable => "uncorrectable",
            OpOutcome::WriteFailed => "write_failed",
            OpOutcome::CapacityExhausted => "capacity_exhausted",
            OpOutcome::Unwritten => "unwritten",
        }
    }

    pub fn is_success(&self) -> bool {
        matches!(self, OpOutcome::Ok | OpOutcome::Corrected(_))
    }
}

/// Write timing as seen by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteCompletion {
    pub addr: PageAddr,
    pub data_acked_at: SimTime,
    /// `None` while some split waits for its slab to be regenerated.
    pub fully_durable_at: Option<SimTime>,
}

/// Everything recorded about one foreground operation.
#[derive(Debug, Clone)]
pub struct OpRecord {
    pub id: OpId,
    pub kind: OpKind,
    pub addr: PageAddr,
    pub submitted: SimTime,
    pub started: Option<SimTime>,
    /// Caller-visible completion.
    pub completed: Option<SimTime>,
    pub data_acked_at: Option<SimTime>,
    pub fully_durable_at: Option<SimTime>,
    /// Time the `k`-th split arrived (reads).
    pub kth_arrival: Option<SimTime>,
    /// Split requests issued, including re-issues and escalation.
    pub fanout: usize,
    /// Latency drawn for each issued split, in issue order.
    pub split_latencies: Vec<u64>,
    /// Coding time on the caller-visible path.
    pub coding_ns: u64,
    pub overhead_ns: u64,
    pub outcome: OpOutcome,
    pub page: Option<Page>,
}

impl OpRecord {
    pub fn latency_ns(&self) -> Option<u64> {
        self.completed.map(|c| c.saturating_sub(self.submitted))
    }

    pub fn queue_ns(&self) -> u64 {
        self.started.map_or(0, |s| s.saturating_sub(self.submitted))
    }

    pub fn write_completion(&self) -> Option<WriteCompletion> {
        (self.kind == OpKind::Write).then_some(())?;
        Some(WriteCompletion {
            addr: self.addr,
            data_acked_at: self.data_acked_at?,
            fully_durable_at: self.fully_durable_at,
        })
    }
}

/// Requests from the manager to the resource monitors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManagerAction {
    Regenerate { range: RangeId, index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ReadMode {
    /// Decode at the `k`-th arrival.
    Fast,
    /// Detect at `k + Δ`, escalate on mismatch.
    Verify,
    /// Correct at `k + 2Δ + 1`.
    Correct,
}

#[derive(Debug)]
struct ReadOp {
    mode: ReadMode,
    used: HashSet<usize>,
    outstanding: HashMap<u64, usize>,
    arrivals: Vec<Split>,
    /// Caller already has its page; remaining arrivals only feed the
    /// background consistency check.
    returned: bool,
    decoding: bool,
    repairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SplitStatus {
    Unsent,
    InFlight(u64),
    Acked,
    Deferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WriteStage {
    Encoding,
    Data,
    Parity,
    All,
}

#[derive(Debug)]
struct WriteOp {
    page: Page,
    splits: Vec<Vec<u8>>,
    status: Vec<SplitStatus>,
    stage: WriteStage,
    last_data_ack: SimTime,
    caller_acked: bool,
}

#[derive(Debug)]
enum OpState {
    Queued(Option<Page>),
    Read(ReadOp),
    Write(WriteOp),
}

const TAG_ARRIVE: u32 = 0;
const TAG_CODED: u32 = 1;

pub struct ResilienceManager {
    pub config: ManagerConfig,
    params: CodecParams,
    codec: Codec,
    plan: PlacementPlan,
    ranges: BTreeMap<RangeId, AddressRange>,
    health: Vec<MachineHealth>,
    slab_load: LoadVector,
    ops: BTreeMap<OpId, OpState>,
    records: BTreeMap<OpId, OpRecord>,
    locks: HashMap<PageAddr, VecDeque<OpId>>,
    deferred: HashMap<(RangeId, usize), Vec<(OpId, u32)>>,
    waiting_durable: HashMap<OpId, usize>,
    actions: Vec<ManagerAction>,
    rng: SimRng,
}

impl fmt::Debug for ResilienceManager {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ResilienceManager")
            .field("params", &self.params)
            .field("ranges", &self.ranges.len())
            .field("ops", &self.ops.len())
            .finish()
    }
}

impl ResilienceManager {
    pub fn new(plan: PlacementPlan, config: ManagerConfig, seed: u64) -> Result<Self> {
        let params = plan.params;
        let codec = Codec::with_page_size(params, config.page_size)?;
        let machines = plan.machines;
        Ok(Self {
            health: (0..machines as u32).map(|m| MachineHealth::new(MachineId(m), config.health_window)).collect(),
            config,
            params,
            codec,
            plan,
            ranges: BTreeMap::new(),
            slab_load: LoadVector::zeros(machines),
            ops: BTreeMap::new(),
            records: BTreeMap::new(),
            locks: HashMap::new(),
            deferred: HashMap::new(),
            waiting_durable: HashMap::new(),
            actions: Vec::new(),
            rng: rng::stream(seed, labels::READ_SELECTION),
        })
    }

    pub fn params(&self) -> &CodecParams {
        &self.params
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn plan(&self) -> &PlacementPlan {
        &self.plan
    }

    pub fn range(&self, id: RangeId) -> Option<&AddressRange> {
        self.ranges.get(&id)
    }

    pub fn ranges(&self) -> impl Iterator<Item = &AddressRange> {
        self.ranges.values()
    }

    pub fn health(&self, m: MachineId) -> &MachineHealth {
        &self.health[m.index()]
    }

    pub fn records(&self) -> impl Iterator<Item = &OpRecord> {
        self.records.values()
    }

    pub fn record(&self, id: OpId) -> Option<&OpRecord> {
        self.records.get(&id)
    }

    pub fn take_actions(&mut self) -> Vec<ManagerAction> {
        std::mem::take(&mut self.actions)
    }

    pub fn is_page_busy(&self, addr: PageAddr) -> bool {
        self.locks.get(&addr).is_some_and(|q| !q.is_empty())
    }

    pub fn in_flight(&self) -> usize {
        self.ops.len()
    }

    pub fn page_capacity(&self, slab_size: usize) -> u32 {
        (self.params.k * slab_size / self.config.page_size) as u32
    }

    /// Allocates `k + r` slabs for `range` on the least-loaded members of its group.
    pub fn map_range(&mut self, cluster: &mut Cluster, range: RangeId) -> Result<&AddressRange> {
        if self.ranges.contains_key(&range) {
            return Ok(&self.ranges[&range]);
        }
        let width = self.params.width();
        let group = self.plan.group_for_range(range.0);
        let slab_size = cluster.config.slab_size as u64;
        let can_host = |m: &MachineId| {
            cluster.machine(*m).is_some_and(|mm| {
                mm.is_up() && (mm.free_bytes() >= slab_size || mm.unmapped_slabs().next().is_some())
            })
        };
        let candidates: Vec<MachineId> = self.plan.groups[group].members.iter().copied().filter(can_host).collect();
        if candidates.len() < width {
            return Err(ManagerError::CapacityExhausted { range, available: candidates.len(), needed: width });
        }
        let chosen = match self.plan.scheme {
            Scheme::CodingSets => least_loaded(&candidates, &self.slab_load, width),
            _ => candidates,
        };
        let mut slots = Vec::with_capacity(width);
        for (index, m) in chosen.into_iter().enumerate() {
            let at = cluster
                .allocate_slab(m, Some(SlabOwner { range, index }))
                .expect("candidate checked for capacity");
            self.slab_load.0[m.index()] += 1.0;
            slots.push(Slot { at, state: SlotState::Healthy });
        }
        let capacity = self.page_capacity(cluster.config.slab_size);
        self.ranges.insert(
            range,
            AddressRange {
                id: range,
                group,
                page_capacity: capacity,
                slots,
                written: BTreeSet::new(),
                pending: vec![BTreeMap::new(); width],
                flagged: false,
                lost: false,
            },
        );
        Ok(&self.ranges[&range])
    }

    /// Queues a page write arriving at `at`.
    pub fn submit_write(&mut self, cluster: &mut Cluster, at: SimTime, addr: PageAddr, page: Page) -> OpId {
        self.submit(cluster, at, addr, OpKind::Write, Some(page))
    }

    /// Queues a page read arriving at `at`.
    pub fn submit_read(&mut self, cluster: &mut Cluster, at: SimTime, addr: PageAddr) -> OpId {
        self.submit(cluster, at, addr, OpKind::Read, None)
    }

    fn submit(&mut self, cluster: &mut Cluster, at: SimTime, addr: PageAddr, kind: OpKind, page: Option<Page>) -> OpId {
        let id = cluster.next_op_id();
        self.records.insert(
            id,
            OpRecord {
                id,
                kind,
                addr,
                submitted: at,
                started: None,
                completed: None,
                data_acked_at: None,
                fully_durable_at: None,
                kth_arrival: None,
                fanout: 0,
                split_latencies: Vec::new(),
                coding_ns: 0,
                overhead_ns: 0,
                outcome: OpOutcome::InFlight,
                page: None,
            },
        );
        self.ops.insert(id, OpState::Queued(page));
        cluster.submit(at, Event::Timer { actor: Actor::Manager, op: id, tag: TAG_ARRIVE });
        id
    }

    /// Routes a completion addressed to the manager.
    pub fn on_completion(&mut self, cluster: &mut Cluster, c: &Completion) {
        match &c.event {
            Event::Timer { op, tag: TAG_ARRIVE, .. } => self.arrive(cluster, *op),
            Event::Timer { op, tag: TAG_CODED, .. } => self.coded(cluster, *op),
            Event::SplitWrite { op, target, .. } => match self.ops.get(op) {
                Some(OpState::Read(_)) => self.repair_result(cluster, *op, c.seq),
                _ => self.write_result(cluster, *op, c.seq, *target, &c.outcome),
            },
            Event::SplitRead { op, target, .. } => self.read_result(cluster, *op, c.seq, *target, &c.outcome),
            _ => {}
        }
    }

    fn arrive(&mut self, cluster: &mut Cluster, id: OpId) {
        let addr = self.records[&id].addr;
        let queue = self.locks.entry(addr).or_default();
        queue.push_back(id);
        if queue.len() == 1 {
            self.start(cluster, id);
        }
    }

    fn release(&mut self, cluster: &mut Cluster, id: OpId) {
        let addr = self.records[&id].addr;
        let next = match self.locks.get_mut(&addr) {
            Some(q) => {
                if q.front() == Some(&id) {
                    q.pop_front();
                } else {
                    q.retain(|o| *o != id);
                }
                q.front().copied()
            }
            None => None,
        };
        if self.locks.get(&addr).is_some_and(VecDeque::is_empty) {
            self.locks.remove(&addr);
        }
        if let Some(next) = next {
            self.start(cluster, next);
        }
    }

    fn overhead_ns(&self, cluster: &Cluster) -> u64 {
        let lat = &cluster.latency;
        let mut us = 0.0;
        if !self.config.run_to_completion {
            us += lat.context_switch_us;
        }
        if !self.config.in_place_coding {
            us += lat.copy_us;
        }
        micros_to_nanos(us)
    }

    fn start(&mut self, cluster: &mut Cluster, id: OpId) {
        let now = cluster.now();
        let overhead = self.overhead_ns(cluster);
        let rec = self.records.get_mut(&id).expect("record exists");
        rec.started = Some(now);
        rec.overhead_ns = overhead;
        let addr = rec.addr;
        let kind = rec.kind;
        let Some(OpState::Queued(page)) = self.ops.remove(&id) else {
            unreachable!("op started twice")
        };
        match kind {
            OpKind::Write => self.start_write(cluster, id, addr, page.expect("write carries a page")),
            OpKind::Read => self.start_read(cluster, id, addr),
        }
    }

    fn finish(&mut self, cluster: &mut Cluster, id: OpId, outcome: OpOutcome) {
        let now = cluster.now();
        let rec = self.records.get_mut(&id).expect("record exists");
        if rec.completed.is_none() {
            rec.completed = Some(now);
        }
        rec.outcome = outcome;
        self.ops.remove(&id);
        self.release(cluster, id);
    }

    // ---- writes ----

    fn start_write(&mut self, cluster: &mut Cluster, id: OpId, addr: PageAddr, page: Page) {
        let k = self.params.k;
        let width = self.params.width();
        if let Err(e) = self.map_range(cluster, addr.range) {
            let _ = e;
            self.finish(cluster, id, OpOutcome::CapacityExhausted);
            return;
        }
        let range = &self.ranges[&addr.range];
        if addr.page >= range.page_capacity || range.lost || range.healthy_count() < k {
            self.finish(cluster, id, OpOutcome::WriteFailed);
            return;
        }
        let degraded = (0..k).any(|i| !range.slots[i].state.readable());
        let splits = self.codec.split(&page).expect("page size matches codec").into_iter().map(|s| s.bytes).collect();
        self.ranges.get_mut(&addr.range).unwrap().written.insert(addr.page);
        let sync = !self.config.async_parity || degraded;
        let needs_encode = self.params.r > 0;
        let stage = if sync && needs_encode { WriteStage::Encoding } else if sync { WriteStage::All } else { WriteStage::Data };
        let op = WriteOp {
            page,
            splits,
            status: vec![SplitStatus::Unsent; width],
            stage,
            last_data_ack: SimTime::ZERO,
            caller_acked: false,
        };
        self.ops.insert(id, OpState::Write(op));
        let overhead = self.records[&id].overhead_ns;
        match stage {
            WriteStage::Encoding => self.schedule_encode(cluster, id, overhead),
            WriteStage::Data => self.send_splits(cluster, id, 0..k, overhead),
            WriteStage::All => self.send_splits(cluster, id, 0..width, overhead),
            WriteStage::Parity => unreachable!(),
        }
        self.advance_write(cluster, id);
    }

    fn schedule_encode(&mut self, cluster: &mut Cluster, id: OpId, after_ns: u64) {
        let cost = micros_to_nanos(cluster.latency.encode_us);
        let visible = !matches!(self.ops.get(&id), Some(OpState::Write(op)) if op.caller_acked);
        if visible {
            self.records.get_mut(&id).unwrap().coding_ns += cost;
        }
        let at = cluster.now() + after_ns + cost;
        cluster.submit(at, Event::Timer { actor: Actor::Manager, op: id, tag: TAG_CODED });
    }

    fn send_splits(&mut self, cluster: &mut Cluster, id: OpId, indices: std::ops::Range<usize>, offset_ns: u64) {
        let addr = self.records[&id].addr;
        let per_split = micros_to_nanos(cluster.latency.per_split_us);
        let plan = cluster.straggler_plan(indices.len());
        let Some(OpState::Write(op)) = self.ops.get_mut(&id) else { return };
        let range = self.ranges.get_mut(&addr.range).expect("mapped");
        let mut issued = 0u64;
        for (j, i) in indices.enumerate() {
            let slot = range.slots[i];
            if !slot.state.readable() {
                range.pending[i].insert(addr.page, op.splits[i].clone());
                op.status[i] = SplitStatus::Deferred;
                continue;
            }
            let bytes = op.splits[i].clone();
            let draw = cluster.sample_split(slot.at.machine, bytes.len(), plan[j]);
            issued += 1;
            let at = cluster.now() + offset_ns + issued * per_split + draw.nanos;
            let seq = cluster.submit(
                at,
                Event::SplitWrite { actor: Actor::Manager, op: id, target: slot.at, page: addr.page, bytes },
            );
            op.status[i] = SplitStatus::InFlight(seq);
            let rec = self.records.get_mut(&id).unwrap();
            rec.fanout += 1;
            rec.split_latencies.push(draw.nanos);
        }
    }

    fn write_result(&mut self, cluster: &mut Cluster, id: OpId, seq: u64, target: SlabRef, outcome: &Outcome) {
        let Some(OpState::Write(op)) = self.ops.get_mut(&id) else { return };
        let Some(i) = op.status.iter().position(|s| *s == SplitStatus::InFlight(seq)) else { return };
        match outcome {
            Outcome::Written => {
                op.status[i] = SplitStatus::Acked;
                if i < self.params.k {
                    op.last_data_ack = cluster.now();
                }
            }
            _ => {
                let bytes = op.splits[i].clone();
                op.status[i] = SplitStatus::Deferred;
                let addr = self.records[&id].addr;
                if matches!(outcome, Outcome::Disconnected) {
                    self.handle_disconnect(cluster, target.machine);
                } else {
                    self.fail_slot(addr.range, i, target);
                }
                let range = self.ranges.get_mut(&addr.range).unwrap();
                range.pending[i].insert(addr.page, bytes);
            }
        }
        self.advance_write(cluster, id);
    }

    fn coded(&mut self, cluster: &mut Cluster, id: OpId) {
        match self.ops.get_mut(&id) {
            Some(OpState::Write(op)) => {
                let k = self.params.k;
                let width = self.params.width();
                let parity = self.codec.encode_page(&op.page).expect("page size matches codec");
                op.splits = parity.into_iter().map(|s| s.bytes).collect();
                let range = match op.stage {
                    WriteStage::Encoding => {
                        op.stage = WriteStage::All;
                        0..width
                    }
                    _ => {
                        op.stage = WriteStage::Parity;
                        k..width
                    }
                };
                self.send_splits(cluster, id, range, 0);
                self.advance_write(cluster, id);
            }
            Some(OpState::Read(_)) => self.read_decoded(cluster, id),
            _ => {}
        }
    }

    fn advance_write(&mut self, cluster: &mut Cluster, id: OpId) {
        let k = self.params.k;
        let width = self.params.width();
        let now = cluster.now();
        let Some(OpState::Write(op)) = self.ops.get_mut(&id) else { return };
        let resolved = |s: &SplitStatus| matches!(s, SplitStatus::Acked | SplitStatus::Deferred);
        let acked = op.status.iter().filter(|s| **s == SplitStatus::Acked).count();
        match op.stage {
            WriteStage::Encoding => {}
            WriteStage::Data => {
                if !op.status[..k].iter().all(resolved) {
                    return;
                }
                let rec = self.records.get_mut(&id).unwrap();
                rec.data_acked_at = Some(now);
                if acked >= k {
                    op.caller_acked = true;
                    rec.completed = Some(now);
                }
                if width > k {
                    op.stage = WriteStage::Encoding;
                    self.schedule_encode_after_data(cluster, id);
                } else {
                    self.complete_write(cluster, id);
                }
            }
            WriteStage::Parity | WriteStage::All => {
                if !op.status.iter().all(resolved) {
                    return;
                }
                let caller_acked = op.caller_acked;
                let last_data = op.last_data_ack;
                let rec = self.records.get_mut(&id).unwrap();
                if rec.data_acked_at.is_none() {
                    rec.data_acked_at = Some(last_data.max(rec.started.unwrap_or(now)));
                }
                if !caller_acked {
                    if acked < k {
                        self.finish(cluster, id, OpOutcome::WriteFailed);
                        return;
                    }
                    rec.completed = Some(now);
                }
                self.complete_write(cluster, id);
            }
        }
    }

    /// Async mode: parity encoding starts once the data phase resolved.
    fn schedule_encode_after_data(&mut self, cluster: &mut Cluster, id: OpId) {
        self.schedule_encode(cluster, id, 0);
    }

    fn complete_write(&mut self, cluster: &mut Cluster, id: OpId) {
        let now = cluster.now();
        let Some(OpState::Write(op)) = self.ops.get(&id) else { return };
        let addr = self.records[&id].addr;
        let deferred: Vec<usize> =
            op.status.iter().enumerate().filter(|(_, s)| **s == SplitStatus::Deferred).map(|(i, _)| i).collect();
        if deferred.is_empty() {
            self.records.get_mut(&id).unwrap().fully_durable_at = Some(now);
        } else {
            for &i in &deferred {
                self.deferred.entry((addr.range, i)).or_default().push((id, addr.page));
            }
            self.waiting_durable.insert(id, deferred.len());
        }
        self.finish(cluster, id, OpOutcome::Ok);
    }

    // ---- reads ----

    fn start_read(&mut self, cluster: &mut Cluster, id: OpId, addr: PageAddr) {
        let Some(range) = self.ranges.get(&addr.range) else {
            self.finish(cluster, id, OpOutcome::Unwritten);
            return;
        };
        if !range.written.contains(&addr.page) {
            self.finish(cluster, id, OpOutcome::Unwritten);
            return;
        }
        if range.lost || range.healthy_count() < self.params.k {
            self.finish(cluster, id, OpOutcome::Unrecoverable);
            return;
        }
        let mode = if self.params.delta > 0 && self.needs_correction(range) {
            ReadMode::Correct
        } else if self.config.verify_reads && self.params.delta > 0 {
            ReadMode::Verify
        } else {
            ReadMode::Fast
        };
        self.ops.insert(
            id,
            OpState::Read(ReadOp {
                mode,
                used: HashSet::new(),
                outstanding: HashMap::new(),
                arrivals: Vec::new(),
                returned: false,
                decoding: false,
                repairs: 0,
            }),
        );
        let fanout = match mode {
            ReadMode::Correct => self.params.k + 2 * self.params.delta + 1,
            _ => self.params.k + self.params.delta,
        };
        let overhead = self.records[&id].overhead_ns;
        self.issue_reads(cluster, id, fanout, overhead);
        self.advance_read(cluster, id);
    }

    /// Range touches a suspect slab or machine, or was flagged by a background check.
    fn needs_correction(&self, range: &AddressRange) -> bool {
        range.flagged
            || range.slots.iter().any(|s| {
                s.state == SlotState::Suspect
                    || (s.state.readable()
                        && self.health[s.at.machine.index()].error_rate() > self.config.error_correction_limit)
            })
    }

    /// Issues up to `count` reads to unused readable slots, chosen uniformly.
    fn issue_reads(&mut self, cluster: &mut Cluster, id: OpId, count: usize, offset_ns: u64) -> usize {
        let addr = self.records[&id].addr;
        let Some(OpState::Read(op)) = self.ops.get_mut(&id) else { return 0 };
        let range = &self.ranges[&addr.range];
        let eligible: Vec<usize> = range.readable_slots().filter(|i| !op.used.contains(i)).collect();
        let n = count.min(eligible.len());
        if n == 0 {
            return 0;
        }
        let mut picks: Vec<usize> = index::sample(&mut self.rng, eligible.len(), n).into_iter().map(|j| eligible[j]).collect();
        picks.sort_unstable();
        let plan = cluster.straggler_plan(n);
        let per_split = micros_to_nanos(cluster.latency.per_split_us);
        let split_len = self.codec.split_len();
        for (j, i) in picks.into_iter().enumerate() {
            let target = range.slots[i].at;
            let draw = cluster.sample_split(target.machine, split_len, plan[j]);
            let at = cluster.now() + offset_ns + (j as u64 + 1) * per_split + draw.nanos;
            let seq = cluster.submit(at, Event::SplitRead { actor: Actor::Manager, op: id, target, page: addr.page });
            op.used.insert(i);
            op.outstanding.insert(seq, i);
            let rec = self.records.get_mut(&id).unwrap();
            rec.fanout += 1;
            rec.split_latencies.push(draw.nanos);
        }
        n
    }

    fn read_result(&mut self, cluster: &mut Cluster, id: OpId, seq: u64, target: SlabRef, outcome: &Outcome) {
        let k = self.params.k;
        let Some(OpState::Read(op)) = self.ops.get_mut(&id) else { return };
        let Some(i) = op.outstanding.remove(&seq) else { return };
        match outcome {
            Outcome::Data(bytes) => {
                op.arrivals.push(Split::at(i, k, bytes.clone()));
                if op.arrivals.len() == k {
                    self.records.get_mut(&id).unwrap().kth_arrival = Some(cluster.now());
                }
            }
            Outcome::Disconnected => self.handle_disconnect(cluster, target.machine),
            _ => {
                let range = self.records[&id].addr.range;
                self.fail_slot(range, i, target);
            }
        }
        self.advance_read(cluster, id);
    }

    /// Arrivals needed to leave the current mode, given what is still reachable.
    fn read_need(&self, op: &ReadOp, reachable: usize) -> usize {
        let p = &self.params;
        match op.mode {
            ReadMode::Fast => p.k,
            ReadMode::Verify if reachable >= p.k + p.delta => p.k + p.delta,
            ReadMode::Verify => p.k,
            ReadMode::Correct => (p.k + 2 * p.delta + 1).min(reachable).max(p.k),
        }
    }

    fn advance_read(&mut self, cluster: &mut Cluster, id: OpId) {
        let k = self.params.k;
        let addr = self.records[&id].addr;
        let Some(OpState::Read(op)) = self.ops.get(&id) else { return };
        if op.returned {
            if op.outstanding.is_empty() && op.repairs == 0 {
                self.background_check(addr, id);
            }
            return;
        }
        if op.decoding {
            return;
        }
        let unused = self.ranges[&addr.range].readable_slots().filter(|i| !op.used.contains(i)).count();
        let reachable = op.arrivals.len() + op.outstanding.len() + unused;
        let need = self.read_need(op, reachable);
        if op.arrivals.len() >= need {
            self.read_stage_done(cluster, id);
            return;
        }
        let missing = need.saturating_sub(op.arrivals.len() + op.outstanding.len());
        if missing > 0 {
            let issued = self.issue_reads(cluster, id, missing, 0);
            if issued == 0 {
                let Some(OpState::Read(op)) = self.ops.get(&id) else { return };
                if op.outstanding.is_empty() {
                    if op.arrivals.len() >= k {
                        self.read_stage_done(cluster, id);
                    } else {
                        self.finish(cluster, id, OpOutcome::Unrecoverable);
                    }
                }
            }
        }
    }

    fn read_stage_done(&mut self, cluster: &mut Cluster, id: OpId) {
        let p = self.params;
        let Some(OpState::Read(op)) = self.ops.get_mut(&id) else { return };
        let n = op.arrivals.len();
        match op.mode {
            ReadMode::Verify if n >= p.k + p.delta => {
                let window = &op.arrivals[..p.k + p.delta];
                let corrupted = self.codec.detect_corruption(window, p.delta).unwrap_or(true);
                let machines = self.arrival_machines(id);
                let Some(OpState::Read(op)) = self.ops.get_mut(&id) else { return };
                if corrupted {
                    op.mode = ReadMode::Correct;
                    self.advance_read(cluster, id);
                } else {
                    for m in machines {
                        self.health[m.index()].record(false);
                    }
                    self.schedule_decode(cluster, id, 1);
                }
            }
            ReadMode::Correct if n >= p.k + 2 * p.delta + 1 => self.schedule_decode(cluster, id, 2),
            ReadMode::Correct if n >= p.k + p.delta && p.delta > 0 => {
                let corrupted = self.codec.detect_corruption(&op.arrivals, p.delta).unwrap_or(true);
                if corrupted {
                    self.finish(cluster, id, OpOutcome::Uncorrectable);
                } else {
                    self.schedule_decode(cluster, id, 1);
                }
            }
            _ => self.schedule_decode(cluster, id, 1),
        }
    }

    fn arrival_machines(&self, id: OpId) -> Vec<MachineId> {
        let addr = self.records[&id].addr;
        let Some(OpState::Read(op)) = self.ops.get(&id) else { return Vec::new() };
        let range = &self.ranges[&addr.range];
        op.arrivals.iter().map(|s| range.slots[s.index].at.machine).collect()
    }

    /// Decoding cost scales with the share of page data rebuilt from parity;
    /// with `k = 1` every split is a plain copy.
    fn decode_cost_ns(&self, cluster: &Cluster, first_k: &[Split], passes: u64) -> u64 {
        let k = self.params.k;
        if k == 1 {
            return 0;
        }
        let present = first_k.iter().filter(|s| s.index < k).count();
        let missing = k - present;
        micros_to_nanos(cluster.latency.decode_us * missing as f64 / k as f64) * passes.max(1)
    }

    fn schedule_decode(&mut self, cluster: &mut Cluster, id: OpId, passes: u64) {
        let k = self.params.k;
        let Some(OpState::Read(op)) = self.ops.get(&id) else { return };
        let cost = self.decode_cost_ns(cluster, &op.arrivals[..k.min(op.arrivals.len())], passes);
        let Some(OpState::Read(op)) = self.ops.get_mut(&id) else { return };
        op.decoding = true;
        self.records.get_mut(&id).unwrap().coding_ns += cost;
        cluster.submit(cluster.now() + cost, Event::Timer { actor: Actor::Manager, op: id, tag: TAG_CODED });
    }

    fn read_decoded(&mut self, cluster: &mut Cluster, id: OpId) {
        let p = self.params;
        let addr = self.records[&id].addr;
        let Some(OpState::Read(op)) = self.ops.get_mut(&id) else { return };
        op.decoding = false;
        let n = op.arrivals.len();
        let correcting = op.mode == ReadMode::Correct && n >= p.k + 2 * p.delta + 1;
        let result = if correcting {
            self.codec.correct_corruption(&op.arrivals, p.delta).map(|c| (c.page, c.corrupted))
        } else {
            self.codec.decode(&op.arrivals).map(|page| (page, BTreeSet::new()))
        };
        match result {
            Ok((page, corrupted)) => {
                if correcting {
                    self.note_correction(cluster, id, addr, &page, &corrupted);
                }
                let rec = self.records.get_mut(&id).unwrap();
                rec.page = Some(page);
                rec.completed = Some(cluster.now());
                rec.outcome = if corrupted.is_empty() { OpOutcome::Ok } else { OpOutcome::Corrected(corrupted.len()) };
                let Some(OpState::Read(op)) = self.ops.get_mut(&id) else { return };
                op.returned = true;
                // a pending repair keeps the page locked until it lands
                if op.repairs == 0 {
                    self.release(cluster, id);
                }
                self.advance_read(cluster, id);
            }
            Err(CodingError::Uncorrectable { .. }) => self.finish(cluster, id, OpOutcome::Uncorrectable),
            Err(_) => self.finish(cluster, id, OpOutcome::Unrecoverable),
        }
    }

    /// Health bookkeeping and repair after a correcting read.
    fn note_correction(&mut self, cluster: &mut Cluster, id: OpId, addr: PageAddr, page: &Page, corrupted: &BTreeSet<usize>) {
        let Some(OpState::Read(op)) = self.ops.get(&id) else { return };
        let range = &self.ranges[&addr.range];
        let mut seen = Vec::new();
        for s in &op.arrivals {
            let m = range.slots[s.index].at.machine;
            seen.push((s.index, m, corrupted.contains(&s.index)));
        }
        if corrupted.is_empty() {
            self.ranges.get_mut(&addr.range).unwrap().flagged = false;
        }
        let fresh = self.codec.encode_page(page).expect("page size matches codec");
        for (index, m, bad) in seen {
            self.health[m.index()].record(bad);
            let rate = self.health[m.index()].error_rate();
            let range = self.ranges.get_mut(&addr.range).unwrap();
            if bad {
                if rate > self.config.slab_regeneration_limit {
                    let at = range.slots[index].at;
                    self.fail_slot(addr.range, index, at);
                    continue;
                }
                range.slots[index].state = SlotState::Suspect;
                if self.config.repair_corrupted {
                    let target = range.slots[index].at;
                    let bytes = fresh[index].bytes.clone();
                    let draw = cluster.sample_split(target.machine, bytes.len(), Some(false));
                    let seq = cluster.submit(
                        cluster.now() + draw.nanos,
                        Event::SplitWrite { actor: Actor::Manager, op: id, target, page: addr.page, bytes },
                    );
                    if let Some(OpState::Read(op)) = self.ops.get_mut(&id) {
                        op.repairs += 1;
                        op.outstanding.insert(seq, index);
                    }
                }
            } else if range.slots[index].state == SlotState::Suspect
                && rate <= self.config.error_correction_limit
            {
                range.slots[index].state = SlotState::Healthy;
            }
        }
    }

    /// Late splits finished arriving: check them against each other.
    fn background_check(&mut self, addr: PageAddr, id: OpId) {
        let p = self.params;
        if let Some(OpState::Read(op)) = self.ops.remove(&id) {
            if op.mode == ReadMode::Fast
                && p.delta > 0
                && op.arrivals.len() >= p.k + p.delta
                && self.codec.detect_corruption(&op.arrivals, p.delta).unwrap_or(false)
            {
                if let Some(r) = self.ranges.get_mut(&addr.range) {
                    r.flagged = true;
                }
            }
        }
    }

    fn repair_result(&mut self, cluster: &mut Cluster, id: OpId, seq: u64) {
        let Some(OpState::Read(op)) = self.ops.get_mut(&id) else { return };
        if op.outstanding.remove(&seq).is_none() {
            return;
        }
        op.repairs -= 1;
        if op.repairs == 0 {
            self.release(cluster, id);
        }
        self.advance_read(cluster, id);
    }

    // ---- failures ----

    fn fail_slot(&mut self, range: RangeId, index: usize, at: SlabRef) {
        let k = self.params.k;
        let Some(r) = self.ranges.get_mut(&range) else { return };
        let slot = &mut r.slots[index];
        if slot.at != at || slot.state == SlotState::Failed {
            return;
        }
        slot.state = SlotState::Failed;
        if r.slots.iter().filter(|s| s.state != SlotState::Failed).count() < k {
            r.lost = true;
        }
        self.actions.push(ManagerAction::Regenerate { range, index });
    }

    /// Marks every slab on `machine` failed and re-routes in-flight I/O.
    pub fn handle_disconnect(&mut self, cluster: &mut Cluster, machine: MachineId) {
        let hits: Vec<(RangeId, usize, SlabRef)> = self
            .ranges
            .values()
            .flat_map(|r| {
                r.slots
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.at.machine == machine && s.state != SlotState::Failed)
                    .map(move |(i, s)| (r.id, i, s.at))
            })
            .collect();
        if hits.is_empty() {
            return;
        }
        for (range, index, at) in hits {
            self.fail_slot(range, index, at);
        }
        // In-flight splits to the machine, processed in op order.
        let mut stranded: Vec<(OpId, u64, SlabRef)> = Vec::new();
        for (id, state) in &self.ops {
            match state {
                OpState::Read(op) => {
                    let range = &self.ranges[&self.records[id].addr.range];
                    for (&seq, &i) in &op.outstanding {
                        if range.slots[i].at.machine == machine {
                            stranded.push((*id, seq, range.slots[i].at));
                        }
                    }
                }
                OpState::Write(op) => {
                    let range = &self.ranges[&self.records[id].addr.range];
                    for (i, s) in op.status.iter().enumerate() {
                        if let SplitStatus::InFlight(seq) = s {
                            if range.slots[i].at.machine == machine {
                                stranded.push((*id, *seq, range.slots[i].at));
                            }
                        }
                    }
                }
                OpState::Queued(_) => {}
            }
        }
        stranded.sort();
        for (id, seq, at) in stranded {
            if cluster.cancel(seq).is_none() {
                continue;
            }
            let failed = Outcome::Disconnected;
            match self.ops.get(&id) {
                Some(OpState::Read(_)) => self.read_result(cluster, id, seq, at, &failed),
                Some(OpState::Write(_)) => self.write_result(cluster, id, seq, at, &failed),
                _ => {}
            }
        }
    }

    /// A monitor evicted one of our slabs.
    pub fn handle_eviction(&mut self, at: SlabRef, owner: SlabOwner) {
        self.fail_slot(owner.range, owner.index, at);
    }

    /// Slots other than `index` that can serve regeneration reads.
    pub fn regeneration_sources(&self, range: RangeId, index: usize) -> Vec<(usize, SlabRef)> {
        self.ranges
            .get(&range)
            .map(|r| {
                r.readable_slots().filter(|i| *i != index).map(|i| (i, r.slots[i].at)).collect()
            })
            .unwrap_or_default()
    }

    /// Points slot `index` at a new slab that is being rebuilt.
    pub fn begin_regeneration(&mut self, cluster: &mut Cluster, range: RangeId, index: usize, at: SlabRef) {
        let Some(r) = self.ranges.get_mut(&range) else { return };
        let old = r.slots[index].at;
        r.slots[index] = Slot { at, state: SlotState::Regenerating };
        cluster.set_slab_state(at, SlabState::Regenerating);
        cluster.bind(at, SlabOwner { range, index });
        if old != at {
            if let Some(slab) = cluster.release_slab(old) {
                let _ = slab;
                self.slab_load.0[old.machine.index()] -= 1.0;
            }
        }
        self.slab_load.0[at.machine.index()] += 1.0;
    }

    /// Regeneration of slot `index` finished: replay deferred splits and
    /// open the slab for I/O.
    pub fn finish_regeneration(&mut self, cluster: &mut Cluster, range: RangeId, index: usize) {
        let now = cluster.now();
        let Some(r) = self.ranges.get_mut(&range) else { return };
        let slot = r.slots[index];
        if slot.state != SlotState::Regenerating {
            return;
        }
        for (page, bytes) in std::mem::take(&mut r.pending[index]) {
            cluster.store_split(slot.at, page, bytes);
        }
        cluster.set_slab_state(slot.at, SlabState::Available);
        r.slots[index].state = SlotState::Healthy;
        if let Some(waiters) = self.deferred.remove(&(range, index)) {
            for (op, _) in waiters {
                if let Some(left) = self.waiting_durable.get_mut(&op) {
                    *left -= 1;
                    if *left == 0 {
                        self.waiting_durable.remove(&op);
                        if let Some(rec) = self.records.get_mut(&op) {
                            rec.fully_durable_at = Some(now);
                        }
                    }
                }
            }
        }
    }

    /// Regeneration could not complete; the slot stays failed.
    pub fn abort_regeneration(&mut self, range: RangeId, index: usize, lost: bool) {
        let Some(r) = self.ranges.get_mut(&range) else { return };
        r.slots[index].state = SlotState::Failed;
        if lost {
            r.lost = true;
        }
    }

    pub fn write_completion_log(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["submit_ns", "complete_ns", "op", "range", "page", "fanout", "outcome"])?;
        for r in self.records.values() {
            w.write_record([
                r.submitted.0.to_string(),
                r.completed.map_or(String::new(), |c| c.0.to_string()),
                match r.kind {
                    OpKind::Read => "R".into(),
                    OpKind::Write => "W".into(),
                },
                r.addr.range.0.to_string(),
                r.addr.page.to_string(),
                r.fanout.to_string(),
                r.outcome.label().into(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
