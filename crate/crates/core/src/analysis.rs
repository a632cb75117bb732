//! Experiment driver: loss-probability curves, load-balance comparisons and
//! data-path latency runs, each swept over a cartesian product of parameter
//! values and written as one CSV per run.
//!
//! Every row carries the seed and a hash of the resolved configuration
//! (including referenced fault-script and trace contents), and sweep points
//! are merged in sweep order, so identical inputs give identical bytes.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coding::CodecParams;
use crate::manager::{ManagerConfig, OpKind, OpOutcome, OpRecord};
use crate::monitor::MonitorConfig;
use crate::placement::{
    build_plan, coding_group_count, load_imbalance, loss_probability_analytic, loss_probability_exact,
    loss_probability_montecarlo, ClusterShape, LossMode, PlacementError, Scheme,
};
use crate::rng::{self, labels};
use crate::sim::{ClusterConfig, FaultScript, LatencyModel, SimError, SplitContext};
use crate::system::{HydraSystem, SystemConfig, SystemError};
use crate::workload::{self, page_from_seed, TraceError, TraceOp, WorkloadSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("monotonicity violated: {0}")]
    Monotonicity(String),
    #[error("report has no rows")]
    EmptyReport,
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;

fn invalid(msg: impl Into<String>) -> AnalysisError {
    AnalysisError::ConfigInvalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    LossCurves,
    LoadBalance,
    Datapath,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::LossCurves => "loss-curves",
            Scenario::LoadBalance => "load-balance",
            Scenario::Datapath => "datapath",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A sweep value; booleans map to 0/1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Float(f64),
}

impl Scalar {
    pub fn as_f64(self) -> f64 {
        match self {
            Scalar::Bool(b) => f64::from(u8::from(b)),
            Scalar::Int(i) => i as f64,
            Scalar::Float(f) => f,
        }
    }
}

/// Comparison rows computed from the same latency model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Replication factors; reads take the fastest copy, writes the slowest.
    pub replication: Vec<usize>,
    /// Disk latency added on the SSD-backup path; `None` disables that row.
    pub ssd_latency_us: Option<f64>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { replication: vec![2, 3], ssd_latency_us: Some(80.0) }
    }
}

fn default_schemes() -> Vec<Scheme> {
    vec![Scheme::CodingSets, Scheme::EcCache]
}

fn default_trials() -> u64 {
    100_000
}

fn default_epsilon() -> f64 {
    1e-9
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_shape() -> ClusterShape {
    ClusterShape::new(1000, 16, 0.01)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub scenario: Scenario,
    #[serde(default)]
    pub seed: u64,
    /// Load-balance results are averaged over these; empty means `[seed]`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_shape")]
    pub shape: ClusterShape,
    #[serde(default)]
    pub params: CodecParams,
    #[serde(default)]
    pub load_factor: usize,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    #[serde(default = "default_trials")]
    pub trials: u64,
    /// Also enumerate every failure set (small clusters only).
    #[serde(default)]
    pub exact: bool,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub latency: LatencyModel,
    #[serde(default)]
    pub manager: ManagerConfig,
    #[serde(default)]
    pub monitor: MonitorConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub baselines: BaselineConfig,
    #[serde(default)]
    pub fault_script: Option<PathBuf>,
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub sweep: BTreeMap<String, Vec<Scalar>>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scenario,
            seed: 0,
            seeds: Vec::new(),
            shape: default_shape(),
            params: CodecParams::default(),
            load_factor: 0,
            schemes: default_schemes(),
            trials: default_trials(),
            exact: false,
            epsilon: default_epsilon(),
            latency: LatencyModel::default(),
            manager: ManagerConfig::default(),
            monitor: MonitorConfig::default(),
            cluster: ClusterConfig::default(),
            workload: WorkloadSpec::default(),
            baselines: BaselineConfig::default(),
            fault_script: None,
            trace: None,
            sweep: BTreeMap::new(),
            output_dir: default_output(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| invalid(e.to_string()))
    }

    pub fn system_config(&self) -> SystemConfig {
        SystemConfig {
            shape: self.shape,
            params: self.params,
            scheme: self.schemes.first().copied().unwrap_or(Scheme::CodingSets),
            load_factor: self.load_factor,
            cluster: self.cluster.clone(),
            latency: self.latency.clone(),
            manager: self.manager.clone(),
            monitor: self.monitor.clone(),
            seed: self.seed,
        }
    }

    fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// Checks everything that does not need the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!(
                "schema_version {} not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.shape.validate()?;
        self.params.validate().map_err(|e| invalid(e.to_string()))?;
        self.latency.validate()?;
        self.monitor.validate().map_err(|e| invalid(e.to_string()))?;
        if self.schemes.is_empty() {
            return Err(invalid("schemes must not be empty"));
        }
        if self.scenario == Scenario::LossCurves && self.trials == 0 {
            return Err(invalid("trials must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid("epsilon must be positive"));
        }
        if self.manager.page_size == 0 {
            return Err(invalid("page size must be positive"));
        }
        for (name, values) in &self.sweep {
            if values.is_empty() {
                return Err(invalid(format!("sweep list `{name}` is empty")));
            }
            for v in values {
                let mut probe = self.clone();
                probe.apply(name, v.as_f64())?;
                probe.shape.validate()?;
                probe.params.validate().map_err(|e| invalid(e.to_string()))?;
                probe.latency.validate()?;
            }
        }
        Ok(())
    }

    /// Sets one named scalar parameter.
    pub fn apply(&mut self, name: &str, value: f64) -> Result<()> {
        let int = || -> Result<usize> {
            if value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(invalid(format!("`{name}` needs a non-negative integer, got {value}")))
            }
        };
        let flag = || -> Result<bool> {
            match value {
                v if v == 0.0 => Ok(false),
                v if v == 1.0 => Ok(true),
                _ => Err(invalid(format!("`{name}` needs a boolean, got {value}"))),
            }
        };
        match name {
            "machines" => self.shape.machines = int()?,
            "slabs_per_machine" => self.shape.slabs_per_machine = int()?,
            "failure_fraction" => self.shape.failure_fraction = value,
            "k" => self.params.k = int()?,
            "r" => self.params.r = int()?,
            "delta" => self.params.delta = int()?,
            "load_factor" => self.load_factor = int()?,
            "trials" => self.trials = int()? as u64,
            "median_us" => self.latency.median_us = value,
            "sigma" => self.latency.sigma = value,
            "bandwidth_bytes_per_us" => self.latency.bandwidth_bytes_per_us = value,
            "per_split_us" => self.latency.per_split_us = value,
            "straggler_probability" => self.latency.straggler_probability = value,
            "straggler_multiplier" => self.latency.straggler_multiplier = value,
            "background_multiplier" => self.latency.background_multiplier = value,
            "encode_us" => self.latency.encode_us = value,
            "decode_us" => self.latency.decode_us = value,
            "context_switch_us" => self.latency.context_switch_us = value,
            "copy_us" => self.latency.copy_us = value,
            "async_parity" => self.manager.async_parity = flag()?,
            "run_to_completion" => self.manager.run_to_completion = flag()?,
            "in_place_coding" => self.manager.in_place_coding = flag()?,
            "verify_reads" => self.manager.verify_reads = flag()?,
            "headroom" => self.monitor.headroom = value,
            "operations" => self.workload.operations = int()?,
            "read_fraction" => self.workload.read_fraction = value,
            "interarrival_us" => self.workload.interarrival_us = value,
            other => return Err(invalid(format!("unknown sweep parameter `{other}`"))),
        }
        Ok(())
    }
}

/// One point of the sweep: parameter values in sorted-name order.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint(pub Vec<(String, f64)>);

impl SweepPoint {
    fn get(&self, name: &str) -> Option<f64> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    fn without(&self, name: &str) -> Vec<(String, u64)> {
        self.0.iter().filter(|(n, _)| n != name).map(|(n, v)| (n.clone(), v.to_bits())).collect()
    }
}

/// Cartesian product of the sweep lists; one empty point without a sweep.
pub fn sweep_points(sweep: &BTreeMap<String, Vec<Scalar>>) -> Vec<SweepPoint> {
    let mut points = vec![SweepPoint(Vec::new())];
    for (name, values) in sweep {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut next = p.0.clone();
                    next.push((name.clone(), v.as_f64()));
                    SweepPoint(next)
                })
            })
            .collect();
    }
    points
}

/// A validated configuration with its referenced files loaded.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub script: FaultScript,
    pub trace: Option<Vec<TraceOp>>,
    pub hash: String,
}

impl Experiment {
    /// Loads a TOML config; relative file references resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        let mut config = ExperimentConfig::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.fault_script, &mut config.trace].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if config.output_dir.is_relative() {
            config.output_dir = base.join(&config.output_dir);
        }
        Self::from_config(config)
    }

    pub fn from_config(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut script_text = String::new();
        let script = match &config.fault_script {
            Some(p) => {
                script_text = fs::read_to_string(p)
                    .map_err(|e| invalid(format!("fault script {}: {e}", p.display())))?;
                FaultScript::from_toml_str(&script_text)?
            }
            None => FaultScript::default(),
        };
        let mut trace_text = String::new();
        let trace = match &config.trace {
            Some(p) => {
                trace_text =
                    fs::read_to_string(p).map_err(|e| invalid(format!("trace {}: {e}", p.display())))?;
                Some(workload::parse_trace(&trace_text)?)
            }
            None => None,
        };
        let hash = config_hash(&config, &[&script_text, &trace_text]);
        Ok(Self { config, script, trace, hash })
    }

    /// Re-derives the hash after command-line overrides.
    pub fn rehash(&mut self) -> Result<()> {
        self.config.validate()?;
        let script = toml::to_string(&self.script).map_err(|e| invalid(e.to_string()))?;
        let trace = format!("{:?}", self.trace);
        self.hash = config_hash(&self.config, &[&script, &trace]);
        Ok(())
    }
}

/// First 12 hex digits of SHA-256 over the config (without the output
/// directory) and the contents of referenced files.
pub fn config_hash(config: &ExperimentConfig, attachments: &[&str]) -> String {
    let mut canonical = config.clone();
    canonical.output_dir = PathBuf::new();
    canonical.fault_script = None;
    canonical.trace = None;
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&canonical).expect("config serializes"));
    for a in attachments {
        hasher.update((a.len() as u64).to_le_bytes());
        hasher.update(a.as_bytes());
    }
    hex::encode(hasher.finalize())[..12].to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub scenario: Scenario,
    pub config_hash: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ExperimentReport {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Cell `name` of every row parsed as `f64` (blank cells become NaN).
    pub fn numbers(&self, name: &str) -> Vec<f64> {
        let Some(c) = self.column(name) else { return Vec::new() };
        self.rows.iter().map(|r| r[c].parse().unwrap_or(f64::NAN)).collect()
    }

    pub fn file_name(&self) -> String {
        format!("{}_{}.csv", self.scenario, self.config_hash)
    }
}

/// Nine significant digits, so float noise does not leak into reports.
fn num(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

fn header(point: &SweepPoint, columns: &[&str]) -> Vec<String> {
    point
        .0
        .iter()
        .map(|(n, _)| n.clone())
        .chain(columns.iter().map(|c| c.to_string()))
        .chain(["seed".to_string(), "config_hash".to_string()])
        .collect()
}

fn row(point: &SweepPoint, cells: Vec<String>, seed: u64, hash: &str) -> Vec<String> {
    point.0.iter().map(|(_, v)| num(*v)).chain(cells).chain([seed.to_string(), hash.to_string()]).collect()
}

fn resolved(base: &ExperimentConfig, point: &SweepPoint) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    for (name, value) in &point.0 {
        c.apply(name, *value)?;
    }
    Ok(c)
}

pub fn run_experiment(exp: &Experiment) -> Result<ExperimentReport> {
    match exp.config.scenario {
        Scenario::LossCurves => run_loss_curves(exp),
        Scenario::LoadBalance => run_load_balance(exp),
        Scenario::Datapath => run_datapath(exp),
    }
}

const LOSS_COLUMNS: &[&str] =
    &["scheme", "l", "analytic", "mc_estimate", "mc_half_width", "mc_lower", "mc_upper", "exact"];

/// Analytic and Monte Carlo loss probability per sweep point and scheme.
pub fn run_loss_curves(exp: &Experiment) -> Result<ExperimentReport> {
    let base = &exp.config;
    if base.scenario != Scenario::LossCurves {
        return Err(invalid("scenario is not loss-curves"));
    }
    let points = sweep_points(&base.sweep);
    let per_point: Vec<Result<Vec<(Scheme, f64, Vec<String>)>>> = points
        .par_iter()
        .map(|point| {
            let c = resolved(base, point)?;
            c.schemes
                .iter()
                .map(|&scheme| {
                    let l = if scheme == Scheme::CodingSets { c.load_factor } else { 0 };
                    let analytic = loss_probability_analytic(scheme, &c.shape, &c.params, l)?;
                    let plan = build_plan(scheme, &c.shape, &c.params, l, c.seed)?;
                    let mc = loss_probability_montecarlo(&plan, &c.shape, &c.params, c.trials, c.seed)?;
                    let exact = if c.exact {
                        num(loss_probability_exact(&plan, &c.shape, &c.params, LossMode::Conservative)?)
                    } else {
                        String::new()
                    };
                    let cells = vec![
                        scheme.to_string(),
                        l.to_string(),
                        num(analytic),
                        num(mc.estimate),
                        num(mc.half_width),
                        num(mc.lower()),
                        num(mc.upper()),
                        exact,
                    ];
                    Ok((scheme, analytic, row(point, cells, c.seed, &exp.hash)))
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    let mut analytic = Vec::new();
    for (point, result) in points.iter().zip(per_point) {
        for (scheme, value, r) in result? {
            analytic.push((point.clone(), scheme, value));
            rows.push(r);
        }
    }
    for axis in ["failure_fraction", "slabs_per_machine", "load_factor"] {
        check_monotone(&analytic, axis)?;
    }
    Ok(ExperimentReport {
        scenario: Scenario::LossCurves,
        config_hash: exp.hash.clone(),
        header: header(&points[0], LOSS_COLUMNS),
        rows,
    })
}

/// Loss must not decrease along `axis` with every other parameter fixed.
fn check_monotone(values: &[(SweepPoint, Scheme, f64)], axis: &str) -> Result<()> {
    let mut lines: HashMap<(Scheme, Vec<(String, u64)>), Vec<(f64, f64)>> = HashMap::new();
    for (point, scheme, v) in values {
        if let Some(x) = point.get(axis) {
            lines.entry((*scheme, point.without(axis))).or_default().push((x, *v));
        }
    }
    for ((scheme, _), mut line) in lines {
        line.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in line.windows(2) {
            if w[1].1 < w[0].1 * (1.0 - 1e-9) {
                return Err(AnalysisError::Monotonicity(format!(
                    "{scheme}: loss {} at {axis}={} below {} at {axis}={}",
                    w[1].1, w[1].0, w[0].1, w[0].0
                )));
            }
        }
    }
    Ok(())
}

const BALANCE_COLUMNS: &[&str] =
    &["policy", "seeds", "max_to_min", "coefficient_of_variation", "min_utilization", "floored"];

/// Averages over seeds of the imbalance produced by placing `N·S` slabs.
pub fn run_load_balance(exp: &Experiment) -> Result<ExperimentReport> {
    let base = &exp.config;
    if base.scenario != Scenario::LoadBalance {
        return Err(invalid("scenario is not load-balance"));
    }
    let points = sweep_points(&base.sweep);
    let policies = [Scheme::CodingSets, Scheme::EcCache, Scheme::PowerOfTwo];
    let per_point: Vec<Result<Vec<Vec<String>>>> = points
        .par_iter()
        .map(|point| {
            let c = resolved(base, point)?;
            let seeds = c.seed_list();
            policies
                .iter()
                .map(|&scheme| {
                    let samples: Vec<_> = seeds
                        .par_iter()
                        .map(|&seed| imbalance_for(scheme, &c, seed))
                        .collect::<Result<_>>()?;
                    let n = samples.len() as f64;
                    let mean = |f: fn(&crate::placement::LoadImbalance) -> f64| {
                        samples.iter().map(f).sum::<f64>() / n
                    };
                    let policy = match scheme {
                        Scheme::CodingSets => format!("codingsets(l={})", c.load_factor),
                        other => other.to_string(),
                    };
                    let cells = vec![
                        policy,
                        seeds.len().to_string(),
                        num(mean(|x| x.max_to_min)),
                        num(mean(|x| x.coefficient_of_variation)),
                        num(mean(|x| x.min_utilization)),
                        samples.iter().any(|x| x.floored).to_string(),
                    ];
                    Ok(row(point, cells, c.seed, &exp.hash))
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_point {
        rows.extend(r?);
    }
    Ok(ExperimentReport {
        scenario: Scenario::LoadBalance,
        config_hash: exp.hash.clone(),
        header: header(&points[0], BALANCE_COLUMNS),
        rows,
    })
}

/// Places `⌈N·S/(k+r)⌉` coding groups' worth of slabs under `scheme`.
pub fn imbalance_for(
    scheme: Scheme,
    c: &ExperimentConfig,
    seed: u64,
) -> Result<crate::placement::LoadImbalance> {
    let l = if scheme == Scheme::CodingSets { c.load_factor } else { 0 };
    let mut plan = build_plan(scheme, &c.shape, &c.params, l, seed)?;
    let loads = if scheme == Scheme::CodingSets {
        let mut loads = crate::placement::LoadVector::zeros(c.shape.machines);
        plan.assign_ranges(coding_group_count(&c.shape, &c.params), &mut loads, 1.0);
        loads
    } else {
        plan.load_vector(1.0)
    };
    Ok(load_imbalance(&loads, c.epsilon))
}

/// Outcome of replaying a workload on one simulated system.
#[derive(Debug, Clone)]
pub struct DatapathRun {
    /// Measured operations in submission order.
    pub records: Vec<OpRecord>,
    pub wrong_pages: usize,
    pub unrecoverable_ranges: usize,
    pub regenerations: usize,
}

impl DatapathRun {
    pub fn latencies_us(&self, kind: OpKind) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.kind == kind && r.outcome.is_success())
            .filter_map(|r| r.latency_ns())
            .map(|ns| ns as f64 / 1_000.0)
            .collect()
    }

    pub fn count(&self, pred: impl Fn(&OpOutcome) -> bool) -> usize {
        self.records.iter().filter(|r| pred(&r.outcome)).count()
    }

    pub fn failed_ops(&self) -> usize {
        self.count(|o| {
            matches!(o, OpOutcome::Unrecoverable | OpOutcome::Uncorrectable | OpOutcome::WriteFailed)
        })
    }
}

/// Replays `ops` on a fresh system and checks every read against the last
/// successful write to the same page.
pub fn replay(config: &SystemConfig, script: &FaultScript, ops: &[TraceOp], warmup: usize) -> Result<DatapathRun> {
    let mut system = HydraSystem::new(config)?;
    system.inject(script)?;
    let page_size = config.manager.page_size;
    let ids: Vec<_> = ops
        .iter()
        .map(|op| match op.kind {
            OpKind::Write => {
                let page = page_from_seed(op.payload_seed.unwrap_or_default(), page_size);
                system.write(op.at, op.addr, page)
            }
            OpKind::Read => system.read(op.at, op.addr),
        })
        .collect();
    system.run();
    // page locks are granted in arrival order: time, then submission order
    let mut order: Vec<usize> = (0..ops.len()).collect();
    order.sort_by_key(|&i| (ops[i].at, i));
    let mut latest: HashMap<_, u64> = HashMap::new();
    let mut wrong = 0;
    for i in order {
        let rec = system.record(ids[i]).expect("every op is recorded");
        match ops[i].kind {
            OpKind::Write if rec.outcome.is_success() => {
                latest.insert(ops[i].addr, ops[i].payload_seed.unwrap_or_default());
            }
            OpKind::Read if rec.outcome.is_success() => {
                let expected = latest.get(&ops[i].addr).map(|s| page_from_seed(*s, page_size));
                if rec.page.as_ref() != expected.as_ref() && i >= warmup {
                    wrong += 1;
                }
            }
            _ => {}
        }
    }
    let records = ids[warmup..].iter().map(|id| system.record(*id).unwrap().clone()).collect();
    Ok(DatapathRun {
        records,
        wrong_pages: wrong,
        unrecoverable_ranges: system.unrecoverable_ranges.len(),
        regenerations: system.monitors.reports().iter().filter(|r| r.completed).count(),
    })
}

/// Nearest-rank percentile; NaN for an empty sample.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

const DATAPATH_COLUMNS: &[&str] = &[
    "system",
    "reads",
    "writes",
    "read_p50_us",
    "read_p99_us",
    "write_p50_us",
    "write_p99_us",
    "durable_p50_us",
    "queue_us",
    "network_us",
    "coding_us",
    "throughput_ops_per_s",
    "unrecoverable",
    "wrong_pages",
    "corrected",
];

/// Latency percentiles, phase breakdown and failure counts for one workload,
/// plus replication and SSD-backup comparison rows.
pub fn run_datapath(exp: &Experiment) -> Result<ExperimentReport> {
    let base = &exp.config;
    if base.scenario != Scenario::Datapath {
        return Err(invalid("scenario is not datapath"));
    }
    let points = sweep_points(&base.sweep);
    let per_point: Vec<Result<Vec<Vec<String>>>> = points
        .par_iter()
        .map(|point| {
            let c = resolved(base, point)?;
            let (ops, warmup) = match &exp.trace {
                Some(t) => (t.clone(), 0),
                None => workload::generate(&c.workload, &exp.script, c.seed),
            };
            let run = replay(&c.system_config(), &exp.script, &ops, warmup)?;
            let mut rows = vec![row(point, hydra_cells(&run), c.seed, &exp.hash)];
            let reads = run.records.iter().filter(|r| r.kind == OpKind::Read).count();
            let writes = run.records.len() - reads;
            for cells in baseline_cells(&c, reads.max(1), writes.max(1)) {
                rows.push(row(point, cells, c.seed, &exp.hash));
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_point {
        rows.extend(r?);
    }
    Ok(ExperimentReport {
        scenario: Scenario::Datapath,
        config_hash: exp.hash.clone(),
        header: header(&points[0], DATAPATH_COLUMNS),
        rows,
    })
}

fn hydra_cells(run: &DatapathRun) -> Vec<String> {
    let reads = run.latencies_us(OpKind::Read);
    let writes = run.latencies_us(OpKind::Write);
    let durable: Vec<f64> = run
        .records
        .iter()
        .filter(|r| r.kind == OpKind::Write)
        .filter_map(|r| r.fully_durable_at.map(|d| d.saturating_sub(r.submitted) as f64 / 1_000.0))
        .collect();
    let done: Vec<&OpRecord> = run.records.iter().filter(|r| r.completed.is_some()).collect();
    let n = done.len().max(1) as f64;
    let mean = |f: &dyn Fn(&OpRecord) -> u64| done.iter().map(|r| f(r) as f64).sum::<f64>() / n / 1_000.0;
    let queue = mean(&|r| r.queue_ns());
    let coding = mean(&|r| r.coding_ns);
    let network = mean(&|r| {
        r.latency_ns().unwrap_or(0).saturating_sub(r.queue_ns() + r.coding_ns + r.overhead_ns)
    });
    let first = run.records.iter().map(|r| r.submitted).min();
    let last = run.records.iter().filter_map(|r| r.completed).max();
    let throughput = match (first, last) {
        (Some(a), Some(b)) if b > a => done.len() as f64 / ((b.0 - a.0) as f64 / 1e9),
        _ => 0.0,
    };
    vec![
        "hydra".into(),
        reads.len().to_string(),
        writes.len().to_string(),
        num(percentile(&reads, 50.0)),
        num(percentile(&reads, 99.0)),
        num(percentile(&writes, 50.0)),
        num(percentile(&writes, 99.0)),
        num(percentile(&durable, 50.0)),
        num(queue),
        num(network),
        num(coding),
        num(throughput),
        run.failed_ops().to_string(),
        run.wrong_pages.to_string(),
        run.count(|o| matches!(o, OpOutcome::Corrected(_))).to_string(),
    ]
}

/// Rows for replication(n) and SSD backup drawn from the latency model.
fn baseline_cells(c: &ExperimentConfig, reads: usize, writes: usize) -> Vec<Vec<String>> {
    let model = &c.latency;
    let page = c.manager.page_size;
    let mut rng = rng::stream(c.seed, labels::BASELINE);
    let draw = |rng: &mut rng::SimRng| {
        model.sample_split_latency(rng, SplitContext { bytes: page, ..Default::default() }).nanos as f64 / 1_000.0
    };
    let row = |name: String, r: &[f64], w: &[f64]| {
        vec![
            name,
            r.len().to_string(),
            w.len().to_string(),
            num(percentile(r, 50.0)),
            num(percentile(r, 99.0)),
            num(percentile(w, 50.0)),
            num(percentile(w, 99.0)),
            num(percentile(w, 50.0)),
            num(0.0),
            num(r.iter().chain(w).sum::<f64>() / (r.len() + w.len()) as f64),
            num(0.0),
            String::new(),
            "0".into(),
            "0".into(),
            "0".into(),
        ]
    };
    let mut out = Vec::new();
    for &n in &c.baselines.replication {
        let n = n.max(1);
        let r: Vec<f64> = (0..reads).map(|_| (0..n).map(|_| draw(&mut rng)).fold(f64::INFINITY, f64::min)).collect();
        let w: Vec<f64> = (0..writes).map(|_| (0..n).map(|_| draw(&mut rng)).fold(0.0, f64::max)).collect();
        out.push(row(format!("replication({n})"), &r, &w));
    }
    if let Some(ssd) = c.baselines.ssd_latency_us {
        let r: Vec<f64> = (0..reads).map(|_| draw(&mut rng) + ssd).collect();
        let w: Vec<f64> = (0..writes).map(|_| draw(&mut rng) + ssd).collect();
        out.push(row("ssd-backup".into(), &r, &w));
    }
    out
}

/// Writes `<scenario>_<hash>.csv` into `dir` and returns its path.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<PathBuf> {
    if report.rows.is_empty() {
        return Err(AnalysisError::EmptyReport);
    }
    fs::create_dir_all(dir)?;
    let path = dir.join(report.file_name());
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(&report.header)?;
    for r in &report.rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(path)
}
