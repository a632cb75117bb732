//! Coding-group placement and correlated-failure analysis.
//!
//! Three placement schemes are modelled:
//!
//! * **CodingSets**: machines are partitioned into disjoint extended groups
//!   of `k + r + l` machines. Each address range is bound to one group and
//!   its `k + r` slabs go to the least-loaded members at coding time.
//! * **EC-Cache**: every coding group is an independent uniform random
//!   `(k + r)`-subset of the cluster.
//! * **Power of two choices**: each of the `k + r` members of a group is the
//!   lighter of two random candidates.
//!
//! A copyset is any `r + 1` machines whose simultaneous failure loses data
//! of some coding group. Loss probability under a correlated failure of
//! `⌊N·f⌋` machines is computed analytically and by Monte Carlo.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coding::CodecParams;
use crate::rng::{self, labels, derive_seed};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlacementError {
    #[error("cluster of {machines} machines is too small for groups of {needed}")]
    ClusterTooSmall { machines: usize, needed: usize },
    #[error("invalid cluster shape: {0}")]
    InvalidShape(String),
    #[error("exhaustive enumeration of {0} failure sets is too large")]
    EnumerationTooLarge(f64),
    #[error("unknown placement scheme `{0}`")]
    UnknownScheme(String),
}

pub type Result<T, E = PlacementError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MachineId(pub u32);

impl MachineId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for MachineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

/// `N` machines, `S` slabs per machine, correlated failure fraction `f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterShape {
    pub machines: usize,
    pub slabs_per_machine: usize,
    pub failure_fraction: f64,
}

impl ClusterShape {
    pub fn new(machines: usize, slabs_per_machine: usize, failure_fraction: f64) -> Self {
        Self { machines, slabs_per_machine, failure_fraction }
    }

    pub fn validate(&self) -> Result<()> {
        if self.machines == 0 {
            return Err(PlacementError::InvalidShape("cluster has no machines".into()));
        }
        if self.slabs_per_machine == 0 {
            return Err(PlacementError::InvalidShape("slabs per machine must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.failure_fraction) {
            return Err(PlacementError::InvalidShape(format!(
                "failure fraction {} outside [0, 1]",
                self.failure_fraction
            )));
        }
        Ok(())
    }

    /// `⌊N·f⌋`, tolerant of binary rounding (`1000 * 0.01` must give 10).
    pub fn failed_machines(&self) -> usize {
        let x = self.machines as f64 * self.failure_fraction;
        ((x + 1e-9).floor() as usize).min(self.machines)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "codingsets")]
    CodingSets,
    #[serde(rename = "eccache")]
    EcCache,
    #[serde(rename = "power_of_two")]
    PowerOfTwo,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::CodingSets => "codingsets",
            Scheme::EcCache => "eccache",
            Scheme::PowerOfTwo => "power_of_two",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = PlacementError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "codingsets" => Ok(Scheme::CodingSets),
            "eccache" => Ok(Scheme::EcCache),
            "power_of_two" => Ok(Scheme::PowerOfTwo),
            other => Err(PlacementError::UnknownScheme(other.to_string())),
        }
    }
}

/// How address ranges are spread over CodingSets extended groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeAssignment {
    /// Seeded uniform choice per range id.
    #[default]
    Random,
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtendedGroup {
    pub id: usize,
    pub members: Vec<MachineId>,
    pub load_factor: usize,
}

/// The machines actually holding one address range's `k + r` slabs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub group: usize,
    pub machines: Vec<MachineId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacementPlan {
    pub scheme: Scheme,
    pub params: CodecParams,
    pub load_factor: usize,
    pub machines: usize,
    pub seed: u64,
    pub range_assignment: RangeAssignment,
    /// Copyset universes: extended groups for CodingSets, coding groups otherwise.
    pub groups: Vec<ExtendedGroup>,
    /// Indexed by address range id.
    pub assignments: Vec<Assignment>,
}

impl PlacementPlan {
    /// Group an address range is bound to.
    pub fn group_for_range(&self, range: u64) -> usize {
        let groups = self.groups.len() as u64;
        match (self.scheme, self.range_assignment) {
            (Scheme::CodingSets, RangeAssignment::Random) => {
                (derive_seed(self.seed ^ labels::RANGE_ASSIGNMENT, range) % groups) as usize
            }
            _ => (range % groups) as usize,
        }
    }

    pub fn group_of_machine(&self, machine: MachineId) -> Option<usize> {
        self.groups.iter().position(|g| g.members.contains(&machine))
    }

    /// Binds `count` further ranges to machines, updating `loads` by `weight`
    /// per slab. CodingSets picks the least-loaded group members; the other
    /// schemes already fixed one assignment per group at build time.
    pub fn assign_ranges(&mut self, count: usize, loads: &mut LoadVector, weight: f64) {
        for _ in 0..count {
            let range = self.assignments.len() as u64;
            let group = self.group_for_range(range);
            let machines = match self.scheme {
                Scheme::CodingSets => select_members(&self.groups[group], loads, &self.params),
                _ => self.groups[group].members.clone(),
            };
            for m in &machines {
                loads.0[m.index()] += weight;
            }
            self.assignments.push(Assignment { group, machines });
        }
    }

    /// Per-machine load implied by the current assignments.
    pub fn load_vector(&self, weight: f64) -> LoadVector {
        let mut loads = LoadVector::zeros(self.machines);
        for a in &self.assignments {
            for m in &a.machines {
                loads.0[m.index()] += weight;
            }
        }
        loads
    }

    fn universes(&self, mode: LossMode) -> Vec<&[MachineId]> {
        match mode {
            LossMode::Strict if !self.assignments.is_empty() => {
                self.assignments.iter().map(|a| a.machines.as_slice()).collect()
            }
            _ => self.groups.iter().map(|g| g.members.as_slice()).collect(),
        }
    }
}

/// Number of coding groups needed to hold `N·S` slabs, `⌈N·S/(k+r)⌉`.
pub fn coding_group_count(shape: &ClusterShape, params: &CodecParams) -> usize {
    (shape.machines * shape.slabs_per_machine).div_ceil(params.width())
}

/// Partitions the cluster into `⌊N/(k+r+l)⌋` disjoint extended groups.
/// Leftover machines join the last group.
pub fn build_codingsets(
    shape: &ClusterShape,
    params: &CodecParams,
    load_factor: usize,
    seed: u64,
) -> Result<PlacementPlan> {
    let size = params.width() + load_factor;
    if shape.machines < size {
        return Err(PlacementError::ClusterTooSmall { machines: shape.machines, needed: size });
    }
    let mut ids: Vec<MachineId> = (0..shape.machines as u32).map(MachineId).collect();
    ids.shuffle(&mut rng::stream(seed, labels::PLACEMENT));

    let count = shape.machines / size;
    let mut groups: Vec<ExtendedGroup> = ids
        .chunks(size)
        .take(count)
        .enumerate()
        .map(|(id, chunk)| {
            let mut members = chunk.to_vec();
            members.sort();
            ExtendedGroup { id, members, load_factor }
        })
        .collect();
    if let Some(last) = groups.last_mut() {
        last.members.extend_from_slice(&ids[count * size..]);
        last.members.sort();
    }
    Ok(PlacementPlan {
        scheme: Scheme::CodingSets,
        params: *params,
        load_factor,
        machines: shape.machines,
        seed,
        range_assignment: RangeAssignment::default(),
        groups,
        assignments: Vec::new(),
    })
}

/// One independent uniform `(k+r)`-subset per coding group.
pub fn build_eccache(shape: &ClusterShape, params: &CodecParams, seed: u64) -> Result<PlacementPlan> {
    let width = params.width();
    if shape.machines < width {
        return Err(PlacementError::ClusterTooSmall { machines: shape.machines, needed: width });
    }
    let mut rng = rng::stream(seed, labels::PLACEMENT);
    let groups = (0..coding_group_count(shape, params))
        .map(|id| {
            let mut members: Vec<MachineId> = index::sample(&mut rng, shape.machines, width)
                .into_iter()
                .map(|i| MachineId(i as u32))
                .collect();
            members.sort();
            ExtendedGroup { id, members, load_factor: 0 }
        })
        .collect();
    Ok(fixed_plan(Scheme::EcCache, shape, params, seed, groups))
}

/// Coding groups whose members are each the lighter of two random candidates.
pub fn build_power_of_two(
    shape: &ClusterShape,
    params: &CodecParams,
    seed: u64,
) -> Result<PlacementPlan> {
    let width = params.width();
    if shape.machines < width.max(2) {
        return Err(PlacementError::ClusterTooSmall { machines: shape.machines, needed: width });
    }
    let mut rng = rng::stream(seed, labels::PLACEMENT);
    let mut loads = LoadVector::zeros(shape.machines);
    let mut taken = vec![false; shape.machines];
    let groups = (0..coding_group_count(shape, params))
        .map(|id| {
            let mut members = Vec::with_capacity(width);
            while members.len() < width {
                let m = pick_two_excluding(&loads, &taken, members.len(), &mut rng);
                taken[m.index()] = true;
                members.push(m);
            }
            for m in &members {
                loads.0[m.index()] += 1.0;
                taken[m.index()] = false;
            }
            members.sort();
            ExtendedGroup { id, members, load_factor: 0 }
        })
        .collect();
    Ok(fixed_plan(Scheme::PowerOfTwo, shape, params, seed, groups))
}

fn fixed_plan(
    scheme: Scheme,
    shape: &ClusterShape,
    params: &CodecParams,
    seed: u64,
    groups: Vec<ExtendedGroup>,
) -> PlacementPlan {
    let assignments = groups
        .iter()
        .map(|g| Assignment { group: g.id, machines: g.members.clone() })
        .collect();
    PlacementPlan {
        scheme,
        params: *params,
        load_factor: 0,
        machines: shape.machines,
        seed,
        range_assignment: RangeAssignment::RoundRobin,
        groups,
        assignments,
    }
}

/// Builds the plan for `scheme` with the default number of coding groups.
pub fn build_plan(
    scheme: Scheme,
    shape: &ClusterShape,
    params: &CodecParams,
    load_factor: usize,
    seed: u64,
) -> Result<PlacementPlan> {
    match scheme {
        Scheme::CodingSets => build_codingsets(shape, params, load_factor, seed),
        Scheme::EcCache => build_eccache(shape, params, seed),
        Scheme::PowerOfTwo => build_power_of_two(shape, params, seed),
    }
}

/// Per-machine load, indexed by machine id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadVector(pub Vec<f64>);

impl LoadVector {
    pub fn zeros(machines: usize) -> Self {
        Self(vec![0.0; machines])
    }

    pub fn get(&self, m: MachineId) -> f64 {
        self.0[m.index()]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The `count` least-loaded candidates, ties by ascending id, returned in
/// ascending id order.
pub fn least_loaded(candidates: &[MachineId], loads: &LoadVector, count: usize) -> Vec<MachineId> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| loads.get(*a).total_cmp(&loads.get(*b)).then(a.cmp(b)));
    sorted.truncate(count);
    sorted.sort();
    sorted
}

/// The `k + r` least-loaded members of an extended group.
pub fn select_members(group: &ExtendedGroup, loads: &LoadVector, params: &CodecParams) -> Vec<MachineId> {
    least_loaded(&group.members, loads, params.width())
}

/// Samples two distinct machines and returns the lighter one (lower id on ties).
pub fn power_of_two_pick<R: Rng + ?Sized>(loads: &LoadVector, rng: &mut R) -> MachineId {
    let n = loads.len();
    assert!(n >= 2, "power of two choices needs at least two machines");
    let pair = index::sample(rng, n, 2);
    lighter(loads, MachineId(pair.index(0) as u32), MachineId(pair.index(1) as u32))
}

fn lighter(loads: &LoadVector, a: MachineId, b: MachineId) -> MachineId {
    match loads.get(a).total_cmp(&loads.get(b)) {
        std::cmp::Ordering::Less => a,
        std::cmp::Ordering::Greater => b,
        std::cmp::Ordering::Equal => a.min(b),
    }
}

fn pick_two_excluding<R: Rng + ?Sized>(
    loads: &LoadVector,
    taken: &[bool],
    taken_count: usize,
    rng: &mut R,
) -> MachineId {
    let n = loads.len();
    if n - taken_count == 1 {
        return MachineId(taken.iter().position(|t| !*t).unwrap() as u32);
    }
    loop {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b && !taken[a] && !taken[b] {
            return lighter(loads, MachineId(a as u32), MachineId(b as u32));
        }
    }
}

/// Distinct `(r+1)`-subsets of machines lying inside some copyset universe.
pub fn count_copysets(plan: &PlacementPlan, params: &CodecParams) -> u128 {
    let size = params.r + 1;
    let universes = plan.universes(LossMode::Conservative);
    let mut seen = vec![false; plan.machines];
    let disjoint = universes.iter().all(|u| {
        u.iter().all(|m| !std::mem::replace(&mut seen[m.index()], true))
    });
    if disjoint {
        return universes.iter().map(|u| binomial_u128(u.len(), size)).sum();
    }
    let mut sets: HashSet<Vec<MachineId>> = HashSet::new();
    for u in universes {
        let mut sorted = u.to_vec();
        sorted.sort();
        for_each_combination(&sorted, size, &mut |c| {
            sets.insert(c.to_vec());
        });
    }
    sets.len() as u128
}

fn for_each_combination(items: &[MachineId], size: usize, f: &mut dyn FnMut(&[MachineId])) {
    let n = items.len();
    if size > n {
        return;
    }
    let mut idx: Vec<usize> = (0..size).collect();
    let mut buf: Vec<MachineId> = Vec::with_capacity(size);
    loop {
        buf.clear();
        buf.extend(idx.iter().map(|&i| items[i]));
        f(&buf);
        let Some(pos) = (0..size).rev().find(|&i| idx[i] != i + n - size) else {
            return;
        };
        idx[pos] += 1;
        for j in pos + 1..size {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

pub fn binomial_u128(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `1 - (1 - P_group·G)^C(⌊N·f⌋, r+1)` with `P_group = C(g, r+1)/C(N, r+1)`.
///
/// For EC-Cache (and power of two, which places randomly as far as loss is
/// concerned) `g = k+r` and `G = N·S/(k+r)`; for CodingSets `g = k+r+l` and
/// `G = N/(k+r+l)`. `P_group·G` is clamped to `[0, 1]`.
pub fn loss_probability_analytic(
    scheme: Scheme,
    shape: &ClusterShape,
    params: &CodecParams,
    load_factor: usize,
) -> Result<f64> {
    shape.validate()?;
    let n = shape.machines;
    let (group_size, groups) = match scheme {
        Scheme::CodingSets => {
            let g = params.width() + load_factor;
            (g, n as f64 / g as f64)
        }
        Scheme::EcCache | Scheme::PowerOfTwo => (
            params.width(),
            (n * shape.slabs_per_machine) as f64 / params.width() as f64,
        ),
    };
    if n < group_size {
        return Err(PlacementError::ClusterTooSmall { machines: n, needed: group_size });
    }
    let failures = shape.failed_machines();
    let copyset = params.r + 1;
    if failures < copyset {
        return Ok(0.0);
    }
    let p_group = binomial(group_size, copyset) / binomial(n, copyset);
    let per_copyset = (p_group * groups).clamp(0.0, 1.0);
    if per_copyset >= 1.0 {
        return Ok(1.0);
    }
    let exponent = binomial(failures, copyset);
    Ok(-(exponent * (-per_copyset).ln_1p()).exp_m1())
}

/// Which machine sets count as a coding group when checking for loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `r + 1` failures anywhere inside one extended group.
    #[default]
    Conservative,
    /// `r + 1` failures among the machines actually chosen for one range.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub estimate: f64,
    /// 95% normal-approximation half-width.
    pub half_width: f64,
    pub losses: u64,
    pub trials: u64,
}

impl MonteCarloEstimate {
    fn from_counts(losses: u64, trials: u64) -> Self {
        let p = losses as f64 / trials as f64;
        let half_width = 1.96 * (p * (1.0 - p) / trials as f64).sqrt();
        Self { estimate: p, half_width, losses, trials }
    }

    pub fn lower(&self) -> f64 {
        self.estimate - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.estimate + self.half_width
    }

    pub fn overlaps(&self, other: &MonteCarloEstimate) -> bool {
        self.lower() <= other.upper() && other.lower() <= self.upper()
    }
}

const TRIALS_PER_CHUNK: u64 = 4096;

/// Fraction of uniformly random `⌊N·f⌋`-machine failure sets that take out
/// `r + 1` members of some group. Trials run in fixed chunks with derived
/// seeds so the result does not depend on the thread count.
pub fn loss_probability_montecarlo(
    plan: &PlacementPlan,
    shape: &ClusterShape,
    params: &CodecParams,
    trials: u64,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    loss_probability_montecarlo_with(plan, shape, params, trials, seed, LossMode::Conservative)
}

pub fn loss_probability_montecarlo_with(
    plan: &PlacementPlan,
    shape: &ClusterShape,
    params: &CodecParams,
    trials: u64,
    seed: u64,
    mode: LossMode,
) -> Result<MonteCarloEstimate> {
    shape.validate()?;
    if shape.machines != plan.machines {
        return Err(PlacementError::InvalidShape(format!(
            "shape has {} machines, plan has {}",
            shape.machines, plan.machines
        )));
    }
    let trials = trials.max(1);
    let failures = shape.failed_machines();
    let threshold = params.r + 1;
    if failures < threshold {
        return Ok(MonteCarloEstimate::from_counts(0, trials));
    }
    let membership = Membership::new(plan, mode);
    let chunks = trials.div_ceil(TRIALS_PER_CHUNK);
    let base = derive_seed(seed, labels::MONTE_CARLO);
    let losses: u64 = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = rng::stream(base, chunk);
            let mut counter = membership.counter();
            let start = chunk * TRIALS_PER_CHUNK;
            let end = (start + TRIALS_PER_CHUNK).min(trials);
            let mut lost = 0u64;
            for _ in start..end {
                let failed = index::sample(&mut rng, shape.machines, failures).into_vec();
                if membership.is_loss(failed.iter().copied(), threshold, &mut counter) {
                    lost += 1;
                }
            }
            lost
        })
        .sum();
    Ok(MonteCarloEstimate::from_counts(losses, trials))
}

/// Exact loss probability by enumerating every `⌊N·f⌋`-subset of machines.
pub fn loss_probability_exact(
    plan: &PlacementPlan,
    shape: &ClusterShape,
    params: &CodecParams,
    mode: LossMode,
) -> Result<f64> {
    const LIMIT: f64 = 5.0e7;
    shape.validate()?;
    let n = shape.machines;
    let failures = shape.failed_machines();
    let threshold = params.r + 1;
    if failures < threshold {
        return Ok(0.0);
    }
    let total = binomial(n, failures);
    if total > LIMIT {
        return Err(PlacementError::EnumerationTooLarge(total));
    }
    let membership = Membership::new(plan, mode);
    let mut counter = membership.counter();
    let machines: Vec<MachineId> = (0..n as u32).map(MachineId).collect();
    let mut lost = 0u64;
    let mut seen = 0u64;
    for_each_combination(&machines, failures, &mut |set| {
        seen += 1;
        if membership.is_loss(set.iter().map(|m| m.index()), threshold, &mut counter) {
            lost += 1;
        }
    });
    Ok(lost as f64 / seen as f64)
}

/// Machine to universe index lists, for counting failures per group.
struct Membership {
    of_machine: Vec<Vec<u32>>,
    universes: usize,
}

impl Membership {
    fn new(plan: &PlacementPlan, mode: LossMode) -> Self {
        let universes = plan.universes(mode);
        let mut of_machine = vec![Vec::new(); plan.machines];
        for (u, members) in universes.iter().enumerate() {
            for m in members.iter() {
                of_machine[m.index()].push(u as u32);
            }
        }
        Self { of_machine, universes: universes.len() }
    }

    fn counter(&self) -> Vec<u16> {
        vec![0; self.universes]
    }

    fn is_loss(
        &self,
        failed: impl Iterator<Item = usize> + Clone,
        threshold: usize,
        counter: &mut [u16],
    ) -> bool {
        let mut loss = false;
        for m in failed.clone() {
            for &u in &self.of_machine[m] {
                counter[u as usize] += 1;
                if counter[u as usize] as usize >= threshold {
                    loss = true;
                }
            }
        }
        for m in failed {
            for &u in &self.of_machine[m] {
                counter[u as usize] = 0;
            }
        }
        loss
    }
}

/// Imbalance summary of a load vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadImbalance {
    /// `max / max(min, ε)`.
    pub max_to_min: f64,
    /// Population standard deviation over mean.
    pub coefficient_of_variation: f64,
    /// `min / mean`.
    pub min_utilization: f64,
    /// Set when the minimum was below `ε` and the floor was applied.
    pub floored: bool,
}

pub fn load_imbalance(loads: &LoadVector, epsilon: f64) -> LoadImbalance {
    assert!(!loads.is_empty(), "load vector must be non-empty");
    let n = loads.len() as f64;
    let max = loads.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = loads.0.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = loads.0.iter().sum::<f64>() / n;
    let var = loads.0.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let floored = min < epsilon;
    let max_to_min = if max == 0.0 { 1.0 } else { max / min.max(epsilon) };
    let (cv, util) = if mean == 0.0 { (0.0, 1.0) } else { (var.sqrt() / mean, min / mean) };
    LoadImbalance { max_to_min, coefficient_of_variation: cv, min_utilization: util, floored }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn p(k: usize, r: usize) -> CodecParams {
        CodecParams::new(k, r, 0).unwrap()
    }

    #[test]
    fn codingsets_partition_with_remainder() {
        let shape = ClusterShape::new(1000, 16, 0.01);
        let plan = build_codingsets(&shape, &p(8, 2), 2, 1).unwrap();
        // 1000 = 83 * 12 + 4
        assert_eq!(plan.groups.len(), 83);
        assert!(plan.groups[..82].iter().all(|g| g.members.len() == 12));
        assert_eq!(plan.groups[82].members.len(), 16);
        let mut all: Vec<MachineId> = plan.groups.iter().flat_map(|g| g.members.clone()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 1000);
    }

    #[test]
    fn codingsets_exact_fit_and_too_small() {
        let plan = build_codingsets(&ClusterShape::new(12, 1, 0.0), &p(8, 2), 2, 0).unwrap();
        assert_eq!(plan.groups.len(), 1);
        assert_eq!(plan.groups[0].members.len(), 12);
        let err = build_codingsets(&ClusterShape::new(5, 1, 0.0), &p(8, 2), 0, 0).unwrap_err();
        assert_eq!(err, PlacementError::ClusterTooSmall { machines: 5, needed: 10 });
    }

    #[test]
    fn select_members_cases() {
        let group = ExtendedGroup { id: 0, members: (0..12).map(MachineId).collect(), load_factor: 2 };
        let increasing = LoadVector((0..12).map(|i| i as f64).collect());
        assert_eq!(select_members(&group, &increasing, &p(8, 2)), (0..10).map(MachineId).collect::<Vec<_>>());

        let whole = ExtendedGroup { id: 0, members: (0..10).map(MachineId).collect(), load_factor: 0 };
        let loads = LoadVector(vec![9.0, 1.0, 5.0, 3.0, 8.0, 2.0, 7.0, 0.0, 4.0, 6.0]);
        assert_eq!(select_members(&whole, &loads, &p(8, 2)), whole.members);
    }

    #[test]
    fn select_members_matches_sort_oracle() {
        let mut rng = rng::SimRng::seed_from_u64(3);
        for _ in 0..50 {
            let loads = LoadVector((0..14).map(|_| rng.random_range(0..5) as f64).collect());
            let group = ExtendedGroup { id: 0, members: (0..14).map(MachineId).collect(), load_factor: 4 };
            let mut oracle: Vec<(f64, u32)> = (0..14).map(|i| (loads.0[i as usize], i)).collect();
            oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut expected: Vec<MachineId> = oracle[..10].iter().map(|x| MachineId(x.1)).collect();
            expected.sort();
            assert_eq!(select_members(&group, &loads, &p(8, 2)), expected);
        }
    }

    #[test]
    fn eccache_groups() {
        let single = build_eccache(&ClusterShape::new(10, 1, 0.0), &p(8, 2), 5).unwrap();
        assert_eq!(single.groups.len(), 1);
        assert_eq!(single.groups[0].members, (0..10).map(MachineId).collect::<Vec<_>>());

        let shape = ClusterShape::new(1000, 16, 0.01);
        let plan = build_eccache(&shape, &p(8, 2), 9).unwrap();
        assert_eq!(plan.groups.len(), 1600);
        assert!(plan.groups.iter().all(|g| {
            let mut m = g.members.clone();
            m.dedup();
            m.len() == 10
        }));
        assert_eq!(plan, build_eccache(&shape, &p(8, 2), 9).unwrap());
        assert_ne!(plan, build_eccache(&shape, &p(8, 2), 10).unwrap());
    }

    #[test]
    fn power_of_two_basics() {
        let mut rng = rng::SimRng::seed_from_u64(1);
        let equal = LoadVector::zeros(8);
        for _ in 0..100 {
            let m = power_of_two_pick(&equal, &mut rng);
            assert!(m.index() < 8);
        }
        let loads = LoadVector(vec![3.0, 7.0]);
        for _ in 0..20 {
            assert_eq!(power_of_two_pick(&loads, &mut rng), MachineId(0));
        }
    }

    #[test]
    fn power_of_two_tie_takes_lower_id() {
        let loads = LoadVector(vec![1.0; 2]);
        assert_eq!(lighter(&loads, MachineId(1), MachineId(0)), MachineId(0));
    }

    #[test]
    fn power_of_two_prefers_light_half() {
        let n = 100;
        let loads = LoadVector((0..n).map(|i| if i < n / 2 { 1.0 } else { 10.0 }).collect());
        let mut rng = rng::SimRng::seed_from_u64(2);
        let trials = 100_000;
        let light = (0..trials).filter(|_| power_of_two_pick(&loads, &mut rng).index() < n / 2).count();
        // P(at least one light candidate) = 1 - (50*49)/(100*99) ~ 0.7525
        let frac = light as f64 / trials as f64;
        assert!(frac > 0.5, "{frac}");
        assert!((frac - 0.752_525).abs() < 0.01, "{frac}");
    }

    #[test]
    fn copyset_counts() {
        let one = build_codingsets(&ClusterShape::new(10, 1, 0.0), &p(8, 2), 0, 0).unwrap();
        assert_eq!(count_copysets(&one, &p(8, 2)), 120);

        let extended = build_codingsets(&ClusterShape::new(24, 1, 0.0), &p(8, 2), 2, 0).unwrap();
        assert_eq!(extended.groups.len(), 2);
        assert_eq!(count_copysets(&extended, &p(8, 2)), 2 * 220);

        let two = build_codingsets(&ClusterShape::new(20, 1, 0.0), &p(8, 2), 0, 0).unwrap();
        assert_eq!(count_copysets(&two, &p(8, 2)), 240);
    }

    #[test]
    fn overlapping_groups_are_deduplicated() {
        let shape = ClusterShape::new(12, 1, 0.0);
        let mut plan = build_eccache(&shape, &p(8, 2), 0).unwrap();
        plan.groups = vec![
            ExtendedGroup { id: 0, members: (0..10).map(MachineId).collect(), load_factor: 0 },
            ExtendedGroup { id: 1, members: (2..12).map(MachineId).collect(), load_factor: 0 },
        ];
        // Both contain C(8,3) = 56 shared triples from machines 2..10.
        assert_eq!(count_copysets(&plan, &p(8, 2)), 120 + 120 - 56);
    }

    #[test]
    fn analytic_edge_cases() {
        let params = p(8, 2);
        let few = ClusterShape::new(1000, 16, 0.002);
        assert_eq!(loss_probability_analytic(Scheme::EcCache, &few, &params, 0).unwrap(), 0.0);
        let all = ClusterShape::new(10, 1, 1.0);
        assert_eq!(loss_probability_analytic(Scheme::EcCache, &all, &params, 0).unwrap(), 1.0);
        let bad = ClusterShape::new(1000, 16, 1.5);
        assert!(loss_probability_analytic(Scheme::EcCache, &bad, &params, 0).is_err());
    }

    #[test]
    fn analytic_base_parameters() {
        let params = p(8, 2);
        let shape = ClusterShape::new(1000, 16, 0.01);
        let ec = loss_probability_analytic(Scheme::EcCache, &shape, &params, 0).unwrap();
        let cs = loss_probability_analytic(Scheme::CodingSets, &shape, &params, 2).unwrap();
        // hand evaluation: C(1000,3) = 166_167_000, C(10,3) = 120
        let ec_hand = 1.0 - (1.0 - 120.0 / 166_167_000.0 * 1600.0f64).powf(120.0);
        let cs_hand = 1.0 - (1.0 - 220.0 / 166_167_000.0 * (1000.0 / 12.0f64)).powf(120.0);
        assert!((ec - ec_hand).abs() < 1e-12);
        assert!((cs - cs_hand).abs() < 1e-12);
        assert!(ec / cs >= 5.0, "{ec} / {cs}");
    }

    #[test]
    fn analytic_is_monotone() {
        let params = p(8, 2);
        let mut last = 0.0;
        for s in [1, 2, 4, 8, 16, 32, 64, 100] {
            let v = loss_probability_analytic(Scheme::EcCache, &ClusterShape::new(1000, s, 0.01), &params, 0).unwrap();
            assert!(v >= last);
            last = v;
        }
        let mut last = 0.0;
        for l in 0..8 {
            let v = loss_probability_analytic(Scheme::CodingSets, &ClusterShape::new(1000, 16, 0.01), &params, l).unwrap();
            assert!(v >= last);
            last = v;
        }
        for scheme in [Scheme::CodingSets, Scheme::EcCache] {
            let mut last = 0.0;
            for f in [0.0, 0.003, 0.005, 0.01, 0.02, 0.05] {
                let v = loss_probability_analytic(scheme, &ClusterShape::new(1000, 16, f), &params, 2).unwrap();
                assert!(v >= last);
                last = v;
            }
        }
    }

    #[test]
    fn montecarlo_edges() {
        let params = p(8, 2);
        let shape = ClusterShape::new(100, 1, 0.0);
        let plan = build_codingsets(&shape, &params, 0, 0).unwrap();
        let mc = loss_probability_montecarlo(&plan, &shape, &params, 1000, 0).unwrap();
        assert_eq!(mc.estimate, 0.0);

        let whole = ClusterShape::new(10, 1, 1.0);
        let plan = build_codingsets(&whole, &params, 0, 0).unwrap();
        let mc = loss_probability_montecarlo(&plan, &whole, &params, 1000, 0).unwrap();
        assert_eq!(mc.estimate, 1.0);
    }

    #[test]
    fn montecarlo_is_reproducible() {
        let params = p(4, 2);
        let shape = ClusterShape::new(60, 1, 0.05);
        let plan = build_codingsets(&shape, &params, 0, 4).unwrap();
        let a = loss_probability_montecarlo(&plan, &shape, &params, 20_000, 11).unwrap();
        let b = loss_probability_montecarlo(&plan, &shape, &params, 20_000, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn strict_mode_is_bounded_by_conservative() {
        let params = p(4, 2);
        let shape = ClusterShape::new(48, 4, 0.0625);
        let mut plan = build_codingsets(&shape, &params, 2, 1).unwrap();
        let mut loads = LoadVector::zeros(48);
        plan.assign_ranges(20, &mut loads, 1.0);
        let strict = loss_probability_exact(&plan, &shape, &params, LossMode::Strict).unwrap();
        let loose = loss_probability_exact(&plan, &shape, &params, LossMode::Conservative).unwrap();
        assert!(strict <= loose);
        assert!(strict > 0.0);
    }

    #[test]
    fn imbalance_metrics() {
        let uniform = load_imbalance(&LoadVector(vec![5.0; 4]), 1.0);
        assert_eq!(uniform.max_to_min, 1.0);
        assert_eq!(uniform.coefficient_of_variation, 0.0);

        let ramp = load_imbalance(&LoadVector(vec![1.0, 2.0, 3.0, 4.0]), 0.5);
        assert_eq!(ramp.max_to_min, 4.0);
        // sqrt(1.25) / 2.5
        assert!((ramp.coefficient_of_variation - 0.447_213_595).abs() < 1e-9);
        assert!(!ramp.floored);

        let idle = load_imbalance(&LoadVector(vec![0.0, 4.0, 8.0]), 2.0);
        assert!(idle.floored);
        assert_eq!(idle.max_to_min, 4.0);
    }

    #[test]
    fn failed_machine_count_rounding() {
        assert_eq!(ClusterShape::new(1000, 16, 0.01).failed_machines(), 10);
        assert_eq!(ClusterShape::new(60, 1, 0.05).failed_machines(), 3);
        assert_eq!(ClusterShape::new(1000, 1, 0.0029).failed_machines(), 2);
    }
}
