//! Resource monitors: per-machine slab lifecycle.
//!
//! Each control period a monitor compares its machine's free memory with the
//! headroom target. Below it, unmapped slabs are released first and then
//! mapped slabs are evicted in batches of `E` picked from `E + E'` random
//! candidates by lowest access frequency. Above it, spare memory is
//! pre-allocated as unmapped slabs. Lost slabs are rebuilt in the background
//! on the least-used machine, one page at a time.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coding::{Split, SplitKind};
use crate::manager::{PageAddr, ResilienceManager, SlotState};
use crate::placement::MachineId;
use crate::rng::{self, labels, SimRng};
use crate::sim::{micros_to_nanos, Actor, Cluster, Event, OpId, RangeId, SimTime, SlabOwner, SlabRef};

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("machine {machine} hosts {have} mapped slabs, need {need}")]
    InsufficientSlabs { machine: MachineId, have: usize, need: usize },
    #[error("range {0} has fewer than k readable slabs")]
    UnrecoverableRange(RangeId),
    #[error("no machine can host a replacement slab for {0}")]
    NoTarget(RangeId),
    #[error("invalid monitor config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MonitorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    /// Fraction of machine memory kept free for local applications.
    pub headroom: f64,
    pub control_period_us: f64,
    /// Slabs evicted per round (E).
    pub evict_batch: usize,
    /// Extra eviction candidates sampled (E').
    pub extra_candidates: usize,
    /// Run periodic control ticks.
    pub control_enabled: bool,
    /// Delay before retrying a regeneration step on a busy page.
    pub busy_retry_us: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            headroom: 0.25,
            control_period_us: 1_000_000.0,
            evict_batch: 1,
            extra_candidates: 2,
            control_enabled: false,
            busy_retry_us: 1.0,
        }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.headroom > 0.0 && self.headroom < 1.0) {
            return Err(MonitorError::InvalidConfig(format!("headroom {} outside (0, 1)", self.headroom)));
        }
        if self.evict_batch == 0 {
            return Err(MonitorError::InvalidConfig("evict_batch must be at least 1".into()));
        }
        if !(self.control_period_us > 0.0) {
            return Err(MonitorError::InvalidConfig("control period must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlAction {
    Allocated { machine: MachineId, slabs: usize },
    Released { at: SlabRef },
    Evicted { at: SlabRef, owner: Option<SlabOwner> },
}

/// Halves every slab's access counter on `machine`.
pub fn decay_frequencies(cluster: &mut Cluster, machine: MachineId) {
    if let Some(m) = cluster.machine_mut(machine) {
        for s in m.slabs.values_mut() {
            s.accesses *= 0.5;
        }
    }
}

/// One control decision for `machine`: evict down to or allocate up to the headroom.
pub fn control_tick<R: rand::Rng + ?Sized>(
    cluster: &mut Cluster,
    machine: MachineId,
    config: &MonitorConfig,
    rng: &mut R,
) -> Vec<ControlAction> {
    let mut actions = Vec::new();
    let Some(m) = cluster.machine(machine) else { return actions };
    if !m.is_up() {
        return actions;
    }
    let total = m.total_bytes as f64;
    let headroom = config.headroom * total;
    let slab = cluster.config.slab_size as f64;
    let free = m.free_bytes() as f64;
    if free < headroom {
        let unmapped: Vec<SlabRef> =
            m.unmapped_slabs().map(|s| SlabRef { machine, slab: s.id }).collect();
        for at in unmapped {
            if cluster.machine(machine).unwrap().free_bytes() as f64 >= headroom {
                break;
            }
            cluster.release_slab(at);
            actions.push(ControlAction::Released { at });
        }
        while (cluster.machine(machine).unwrap().free_bytes() as f64) < headroom {
            let Ok(evicted) = batch_evict(cluster, machine, config.evict_batch, config.extra_candidates, rng)
            else {
                break;
            };
            actions.extend(evicted.into_iter().map(|(at, owner)| ControlAction::Evicted { at, owner }));
        }
    } else if free > headroom {
        let want = ((free - headroom) / slab).floor() as usize;
        let mut made = 0;
        for _ in 0..want {
            if cluster.allocate_slab(machine, None).is_none() {
                break;
            }
            made += 1;
        }
        if made > 0 {
            actions.push(ControlAction::Allocated { machine, slabs: made });
        }
    }
    actions
}

/// Samples `e + e_prime` mapped slabs and evicts the `e` least frequently accessed.
pub fn batch_evict<R: rand::Rng + ?Sized>(
    cluster: &mut Cluster,
    machine: MachineId,
    e: usize,
    e_prime: usize,
    rng: &mut R,
) -> Result<Vec<(SlabRef, Option<SlabOwner>)>> {
    let m = cluster.machine(machine).ok_or(MonitorError::InsufficientSlabs { machine, have: 0, need: e })?;
    let mapped: Vec<(SlabRef, f64)> =
        m.mapped_slabs().map(|s| (SlabRef { machine, slab: s.id }, s.accesses)).collect();
    if mapped.len() < e || e == 0 {
        return Err(MonitorError::InsufficientSlabs { machine, have: mapped.len(), need: e });
    }
    let sample = (e + e_prime).min(mapped.len());
    let mut candidates: Vec<(SlabRef, f64)> =
        index::sample(rng, mapped.len(), sample).into_iter().map(|i| mapped[i]).collect();
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(candidates
        .into_iter()
        .take(e)
        .map(|(at, _)| {
            let owner = cluster.release_slab(at).and_then(|s| s.owner);
            (at, owner)
        })
        .collect())
}

#[derive(Debug, Clone)]
struct RegenTask {
    range: RangeId,
    index: usize,
    target: SlabRef,
    pages: Vec<u32>,
    cursor: usize,
    started: SimTime,
}

/// Summary of one finished or abandoned regeneration.
#[derive(Debug, Clone, PartialEq)]
pub struct RegenReport {
    pub range: RangeId,
    pub index: usize,
    pub target: SlabRef,
    pub started: SimTime,
    pub finished: SimTime,
    pub pages: usize,
    pub completed: bool,
}

/// One monitor-state dump row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonitorRow {
    pub time_ns: u64,
    pub machine: u32,
    pub free_fraction: f64,
    pub slabs_hosted: usize,
    pub slabs_evicted: u64,
    pub regenerations: usize,
}

const TAG_CONTROL: u32 = 0;
const TAG_REGEN: u32 = 1;

/// All machines' monitors plus the background regeneration tasks.
#[derive(Debug)]
pub struct ResourceMonitors {
    pub config: MonitorConfig,
    rng: SimRng,
    regen_rng: SimRng,
    tasks: BTreeMap<OpId, RegenTask>,
    evicted: Vec<u64>,
    reports: Vec<RegenReport>,
    dump: Vec<MonitorRow>,
    control_op: Option<OpId>,
}

/// Messages the monitors send to the resilience manager.
#[derive(Debug, Clone, PartialEq)]
pub enum MonitorNotice {
    Evicted { at: SlabRef, owner: SlabOwner },
    /// Regeneration needs another attempt later.
    Retry { range: RangeId, index: usize },
}

impl ResourceMonitors {
    pub fn new(config: MonitorConfig, machines: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            rng: rng::stream(seed, labels::EVICTION),
            regen_rng: rng::stream(seed, labels::REGENERATION),
            tasks: BTreeMap::new(),
            evicted: vec![0; machines],
            reports: Vec::new(),
            dump: Vec::new(),
            control_op: None,
        })
    }

    pub fn reports(&self) -> &[RegenReport] {
        &self.reports
    }

    pub fn active_regenerations(&self) -> usize {
        self.tasks.len()
    }

    pub fn dump(&self) -> &[MonitorRow] {
        &self.dump
    }

    /// Schedules the first control tick.
    pub fn start(&mut self, cluster: &mut Cluster) {
        if self.config.control_enabled && self.control_op.is_none() {
            let op = cluster.next_op_id();
            self.control_op = Some(op);
            let at = cluster.now() + micros_to_nanos(self.config.control_period_us);
            cluster.submit(at, Event::Timer { actor: Actor::Monitor, op, tag: TAG_CONTROL });
        }
    }

    /// Handles a monitor timer; returns notices for the manager.
    pub fn on_timer(
        &mut self,
        cluster: &mut Cluster,
        manager: &mut ResilienceManager,
        op: OpId,
        tag: u32,
    ) -> Vec<MonitorNotice> {
        match tag {
            TAG_CONTROL => self.control_round(cluster),
            TAG_REGEN => self.regen_step(cluster, manager, op),
            _ => Vec::new(),
        }
    }

    fn control_round(&mut self, cluster: &mut Cluster) -> Vec<MonitorNotice> {
        let mut notices = Vec::new();
        let machines: Vec<MachineId> = cluster.machines().iter().map(|m| m.id).collect();
        for m in machines {
            decay_frequencies(cluster, m);
            for action in control_tick(cluster, m, &self.config, &mut self.rng) {
                if let ControlAction::Evicted { at, owner } = action {
                    self.evicted[m.index()] += 1;
                    if let Some(owner) = owner {
                        notices.push(MonitorNotice::Evicted { at, owner });
                    }
                }
            }
        }
        self.record_dump(cluster);
        // keep ticking only while something else is scheduled
        if !cluster.is_quiescent() {
            if let Some(op) = self.control_op {
                let at = cluster.now() + micros_to_nanos(self.config.control_period_us);
                cluster.submit(at, Event::Timer { actor: Actor::Monitor, op, tag: TAG_CONTROL });
            }
        } else {
            self.control_op = None;
        }
        notices
    }

    fn record_dump(&mut self, cluster: &Cluster) {
        let now = cluster.now().0;
        for m in cluster.machines() {
            let regenerations = self.tasks.values().filter(|t| t.target.machine == m.id).count();
            self.dump.push(MonitorRow {
                time_ns: now,
                machine: m.id.0,
                free_fraction: m.free_fraction(),
                slabs_hosted: m.slabs.len(),
                slabs_evicted: self.evicted[m.id.index()],
                regenerations,
            });
        }
    }

    pub fn write_dump_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.dump {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Starts rebuilding slot `index` of `range` on a new slab.
    pub fn regenerate_slab(
        &mut self,
        cluster: &mut Cluster,
        manager: &mut ResilienceManager,
        range: RangeId,
        index: usize,
    ) -> Result<SlabRef> {
        let k = manager.params().k;
        let current = manager.range(range).map(|r| r.slots[index]);
        if let Some(task) = self.tasks.values().find(|t| t.range == range && t.index == index) {
            if current.is_some_and(|s| s.at == task.target && s.state == SlotState::Regenerating) {
                return Ok(task.target);
            }
        }
        if manager.regeneration_sources(range, index).len() < k {
            manager.abort_regeneration(range, index, true);
            return Err(MonitorError::UnrecoverableRange(range));
        }
        let target_machine = pick_target(cluster, manager, range).ok_or(MonitorError::NoTarget(range))?;
        let at = cluster
            .allocate_slab(target_machine, Some(SlabOwner { range, index }))
            .ok_or(MonitorError::NoTarget(range))?;
        manager.begin_regeneration(cluster, range, index, at);
        let pages: Vec<u32> = manager.range(range).map(|r| r.written.iter().copied().collect()).unwrap_or_default();
        let op = cluster.next_op_id();
        self.tasks.insert(op, RegenTask { range, index, target: at, pages, cursor: 0, started: cluster.now() });
        cluster.submit(cluster.now(), Event::Timer { actor: Actor::Monitor, op, tag: TAG_REGEN });
        Ok(at)
    }

    fn regen_step(&mut self, cluster: &mut Cluster, manager: &mut ResilienceManager, op: OpId) -> Vec<MonitorNotice> {
        let Some(task) = self.tasks.get(&op).cloned() else { return Vec::new() };
        let still_target = manager
            .range(task.range)
            .is_some_and(|r| r.slots[task.index].at == task.target)
            && cluster.is_up(task.target.machine)
            && cluster.slab(task.target).is_some();
        if !still_target {
            return self.end_task(cluster, manager, op, false);
        }
        let Some(&page) = task.pages.get(task.cursor) else {
            manager.finish_regeneration(cluster, task.range, task.index);
            return self.end_task(cluster, manager, op, true);
        };
        let addr = PageAddr { range: task.range, page };
        if manager.is_page_busy(addr) {
            let at = cluster.now() + micros_to_nanos(self.config.busy_retry_us);
            cluster.submit(at, Event::Timer { actor: Actor::Monitor, op, tag: TAG_REGEN });
            return Vec::new();
        }
        match self.rebuild_page(cluster, manager, &task, page) {
            Some((bytes, cost)) => {
                cluster.store_split(task.target, page, bytes);
                if let Some(t) = self.tasks.get_mut(&op) {
                    t.cursor += 1;
                }
                cluster.submit(cluster.now() + cost, Event::Timer { actor: Actor::Monitor, op, tag: TAG_REGEN });
                Vec::new()
            }
            None => {
                manager.abort_regeneration(task.range, task.index, true);
                self.end_task(cluster, manager, op, false);
                Vec::new()
            }
        }
    }

    /// Reads `k` (or more, to check) surviving splits and recomputes the lost one.
    fn rebuild_page(
        &mut self,
        cluster: &mut Cluster,
        manager: &ResilienceManager,
        task: &RegenTask,
        page: u32,
    ) -> Option<(Vec<u8>, u64)> {
        let p = *manager.params();
        let codec = manager.codec();
        let sources: Vec<(usize, SlabRef)> = manager
            .regeneration_sources(task.range, task.index)
            .into_iter()
            .filter(|(_, at)| cluster.peek_split(*at, page).is_some())
            .collect();
        if sources.len() < p.k {
            return None;
        }
        let take = if p.delta > 0 { (p.k + 2 * p.delta + 1).min(sources.len()) } else { p.k };
        let mut picks: Vec<usize> = index::sample(&mut self.regen_rng, sources.len(), take).into_vec();
        let splits: Vec<Split> = picks
            .iter()
            .map(|&j| {
                let (i, at) = sources[j];
                Split::at(i, p.k, cluster.peek_split(at, page).expect("filtered").to_vec())
            })
            .collect();
        let rebuilt = if p.delta > 0 && splits.len() >= p.k + p.delta {
            let first = &splits[..p.k + p.delta];
            let corrupted = codec.detect_corruption(first, p.delta).ok()?;
            if !corrupted {
                picks.truncate(p.k + p.delta);
                codec.reconstruct(first, task.index).ok()?
            } else if splits.len() >= p.k + 2 * p.delta + 1 {
                let fixed = codec.correct_corruption(&splits, p.delta).ok()?;
                codec.encode_page(&fixed.page).ok()?.swap_remove(task.index)
            } else {
                return None;
            }
        } else {
            picks.truncate(p.k);
            codec.reconstruct(&splits[..p.k], task.index).ok()?
        };
        debug_assert_eq!(rebuilt.kind, if task.index < p.k { SplitKind::Data } else { SplitKind::Parity });
        let read = picks
            .iter()
            .map(|&j| cluster.sample_split(sources[j].1.machine, codec.split_len(), Some(false)).nanos)
            .max()
            .unwrap_or(0);
        let write = cluster.sample_split(task.target.machine, codec.split_len(), Some(false)).nanos;
        let decode = micros_to_nanos(cluster.latency.decode_us / p.k as f64);
        Some((rebuilt.bytes, read + decode + write))
    }

    fn end_task(
        &mut self,
        cluster: &mut Cluster,
        manager: &mut ResilienceManager,
        op: OpId,
        completed: bool,
    ) -> Vec<MonitorNotice> {
        let Some(task) = self.tasks.remove(&op) else { return Vec::new() };
        self.reports.push(RegenReport {
            range: task.range,
            index: task.index,
            target: task.target,
            started: task.started,
            finished: cluster.now(),
            pages: task.cursor,
            completed,
        });
        let lost = manager.range(task.range).is_none_or(|r| r.lost);
        if completed || lost {
            return Vec::new();
        }
        // a newer regeneration already owns the slot
        if !manager.range(task.range).is_some_and(|r| r.slots[task.index].at == task.target) {
            return Vec::new();
        }
        manager.abort_regeneration(task.range, task.index, false);
        vec![MonitorNotice::Retry { range: task.range, index: task.index }]
    }
}

/// Least-used up machine able to host a slab, preferring the range's own
/// group and never a machine already serving the range.
fn pick_target(cluster: &Cluster, manager: &ResilienceManager, range: RangeId) -> Option<MachineId> {
    let r = manager.range(range)?;
    let taken = r.machines();
    let slab = cluster.config.slab_size as u64;
    let usable = |m: &MachineId| {
        !taken.contains(m)
            && cluster.machine(*m).is_some_and(|mm| {
                mm.is_up() && (mm.free_bytes() >= slab || mm.unmapped_slabs().next().is_some())
            })
    };
    let lightest = |ms: &mut dyn Iterator<Item = MachineId>| {
        ms.filter(usable).min_by_key(|m| (cluster.machine(*m).map_or(u64::MAX, |mm| mm.used_bytes()), *m))
    };
    let group = &manager.plan().groups[r.group].members;
    lightest(&mut group.iter().copied())
        .or_else(|| lightest(&mut cluster.machines().iter().map(|m| m.id)))
}
