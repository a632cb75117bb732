//! Wires the simulated cluster, one resilience manager and the resource
//! monitors into a single event loop.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coding::{CodecParams, Page};
use crate::manager::{ManagerAction, ManagerConfig, ManagerError, OpRecord, PageAddr, ResilienceManager};
use crate::monitor::{MonitorConfig, MonitorError, MonitorNotice, ResourceMonitors};
use crate::placement::{build_plan, ClusterShape, MachineId, PlacementError, Scheme};
use crate::sim::{
    Actor, Cluster, ClusterConfig, Event, FaultEvent, FaultScript, LatencyModel, OpId, Outcome, RangeId,
    SimError, SimTime,
};

#[derive(Debug, Error)]
pub enum SystemError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Manager(#[from] ManagerError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub shape: ClusterShape,
    pub params: CodecParams,
    pub scheme: Scheme,
    pub load_factor: usize,
    pub cluster: ClusterConfig,
    pub latency: LatencyModel,
    pub manager: ManagerConfig,
    pub monitor: MonitorConfig,
    pub seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            shape: ClusterShape::new(12, 16, 0.0),
            params: CodecParams::default(),
            scheme: Scheme::CodingSets,
            load_factor: 2,
            cluster: ClusterConfig::default(),
            latency: LatencyModel::default(),
            manager: ManagerConfig::default(),
            monitor: MonitorConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct HydraSystem {
    pub cluster: Cluster,
    pub manager: ResilienceManager,
    pub monitors: ResourceMonitors,
    /// Ranges that lost more than `r` slabs.
    pub unrecoverable_ranges: BTreeSet<RangeId>,
    pub regeneration_errors: Vec<(RangeId, usize, String)>,
}

impl HydraSystem {
    pub fn new(config: &SystemConfig) -> Result<Self, SystemError> {
        let plan = build_plan(config.scheme, &config.shape, &config.params, config.load_factor, config.seed)?;
        let cluster = Cluster::new(&config.shape, config.latency.clone(), config.cluster.clone(), config.seed)?;
        let manager = ResilienceManager::new(plan, config.manager.clone(), config.seed)?;
        let monitors = ResourceMonitors::new(config.monitor.clone(), config.shape.machines, config.seed)?;
        Ok(Self {
            cluster,
            manager,
            monitors,
            unrecoverable_ranges: BTreeSet::new(),
            regeneration_errors: Vec::new(),
        })
    }

    pub fn now(&self) -> SimTime {
        self.cluster.now()
    }

    pub fn write(&mut self, at: SimTime, addr: PageAddr, page: Page) -> OpId {
        self.manager.submit_write(&mut self.cluster, at, addr, page)
    }

    pub fn read(&mut self, at: SimTime, addr: PageAddr) -> OpId {
        self.manager.submit_read(&mut self.cluster, at, addr)
    }

    pub fn record(&self, id: OpId) -> Option<&OpRecord> {
        self.manager.record(id)
    }

    pub fn inject(&mut self, script: &FaultScript) -> Result<(), SystemError> {
        Ok(self.cluster.inject(script)?)
    }

    /// Maps a range ahead of its first write.
    pub fn map_range(&mut self, range: RangeId) -> Result<(), SystemError> {
        self.manager.map_range(&mut self.cluster, range)?;
        Ok(())
    }

    /// Processes one event. Returns false once the queue is empty.
    pub fn step(&mut self) -> bool {
        self.monitors.start(&mut self.cluster);
        let Some(c) = self.cluster.step() else { return false };
        let mut notices = Vec::new();
        match &c.event {
            Event::SplitRead { actor: Actor::Manager, .. }
            | Event::SplitWrite { actor: Actor::Manager, .. }
            | Event::Timer { actor: Actor::Manager, .. } => self.manager.on_completion(&mut self.cluster, &c),
            Event::Timer { actor: Actor::Monitor, op, tag } => {
                notices = self.monitors.on_timer(&mut self.cluster, &mut self.manager, *op, *tag);
            }
            Event::Fault(fault) => {
                if let Outcome::Applied { evicted, .. } = &c.outcome {
                    match fault {
                        FaultEvent::Fail { machine, .. } | FaultEvent::Partition { machine, .. } => {
                            self.manager.handle_disconnect(&mut self.cluster, MachineId(*machine));
                        }
                        _ => {}
                    }
                    if let Some((at, owner)) = evicted {
                        self.manager.handle_eviction(*at, *owner);
                    }
                }
            }
            _ => {}
        }
        for n in notices {
            match n {
                MonitorNotice::Evicted { at, owner } => self.manager.handle_eviction(at, owner),
                MonitorNotice::Retry { range, index } => self.regenerate(range, index),
            }
        }
        for action in self.manager.take_actions() {
            let ManagerAction::Regenerate { range, index } = action;
            self.regenerate(range, index);
        }
        true
    }

    fn regenerate(&mut self, range: RangeId, index: usize) {
        let lost = self.manager.range(range).is_some_and(|r| r.lost);
        if lost {
            self.unrecoverable_ranges.insert(range);
            return;
        }
        if let Err(e) = self.monitors.regenerate_slab(&mut self.cluster, &mut self.manager, range, index) {
            if matches!(e, MonitorError::UnrecoverableRange(_)) {
                self.unrecoverable_ranges.insert(range);
            }
            self.regeneration_errors.push((range, index, e.to_string()));
        }
    }

    /// Runs until no events remain.
    pub fn run(&mut self) {
        while self.step() {}
    }

    /// Runs every event scheduled strictly before `t`.
    pub fn run_until(&mut self, t: SimTime) {
        while self.cluster.peek_time().is_some_and(|next| next < t) {
            self.step();
        }
    }
}
