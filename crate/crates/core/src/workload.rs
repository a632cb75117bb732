//! Workload traces: parsing, synthetic generation and deterministic payloads.
//!
//! Trace rows are `time_us, op, range, page[, payload_seed]` with `op` one of
//! `R` or `W`. A header row is optional.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coding::Page;
use crate::manager::{OpKind, PageAddr};
use crate::rng::{self, labels, SimRng};
use crate::sim::{FaultScript, SimTime};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceOp {
    pub at: SimTime,
    pub kind: OpKind,
    pub addr: PageAddr,
    pub payload_seed: Option<u64>,
}

/// Page contents derived from a seed, so traces stay small.
pub fn page_from_seed(seed: u64, page_size: usize) -> Page {
    let mut bytes = vec![0u8; page_size];
    SimRng::seed_from_u64(seed).fill_bytes(&mut bytes);
    Page::new(bytes)
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceOp>, TraceError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut ops = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record?;
        let err = |message: String| TraceError::Parse { line, message };
        if i == 0 && record.get(0).is_some_and(|f| f.eq_ignore_ascii_case("time") || f.eq_ignore_ascii_case("time_us")) {
            continue;
        }
        if record.len() < 4 || record.len() > 5 {
            return Err(err(format!("expected 4 or 5 fields, got {}", record.len())));
        }
        let time: f64 = record[0].parse().map_err(|_| err(format!("bad time `{}`", &record[0])))?;
        if !(time >= 0.0 && time.is_finite()) {
            return Err(err(format!("time must be non-negative, got {time}")));
        }
        let kind = match &record[1] {
            "R" | "r" => OpKind::Read,
            "W" | "w" => OpKind::Write,
            other => return Err(err(format!("op must be R or W, got `{other}`"))),
        };
        let range: u64 = record[2].parse().map_err(|_| err(format!("bad range id `{}`", &record[2])))?;
        let page: u32 = record[3].parse().map_err(|_| err(format!("bad page index `{}`", &record[3])))?;
        let payload_seed = match record.get(4).filter(|s| !s.is_empty()) {
            Some(s) => Some(s.parse().map_err(|_| err(format!("bad payload seed `{s}`")))?),
            None => None,
        };
        if kind == OpKind::Write && payload_seed.is_none() {
            return Err(err("write without payload seed".into()));
        }
        ops.push(TraceOp { at: SimTime::from_micros(time), kind, addr: PageAddr::new(range, page), payload_seed });
    }
    Ok(ops)
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceOp>, TraceError> {
    parse_trace(&std::fs::read_to_string(path)?)
}

pub fn write_trace(path: &Path, ops: &[TraceOp]) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["time_us", "op", "range", "page", "payload_seed"])?;
    for op in ops {
        w.write_record([
            format!("{}", op.at.as_micros()),
            match op.kind {
                OpKind::Read => "R".into(),
                OpKind::Write => "W".into(),
            },
            op.addr.range.0.to_string(),
            op.addr.page.to_string(),
            op.payload_seed.map_or(String::new(), |s| s.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Uniform random page addresses with Poisson arrivals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub ranges: u64,
    pub pages_per_range: u32,
    /// Measured operations after the warm-up writes.
    pub operations: usize,
    pub read_fraction: f64,
    /// Mean gap between arrivals.
    pub interarrival_us: f64,
    /// Write every page once before measuring.
    pub warmup: bool,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            ranges: 4,
            pages_per_range: 16,
            operations: 2_000,
            read_fraction: 0.5,
            interarrival_us: 20.0,
            warmup: true,
        }
    }
}

/// Warm-up writes followed by the measured operations. Burst windows in
/// `script` shorten the gaps between arrivals.
pub fn generate(spec: &WorkloadSpec, script: &FaultScript, seed: u64) -> (Vec<TraceOp>, usize) {
    let mut rng = rng::stream(seed, labels::WORKLOAD);
    let mut ops = Vec::new();
    let mut t = 0.0f64;
    let gap = Exp::new(1.0 / spec.interarrival_us.max(1e-9)).expect("positive rate");
    if spec.warmup {
        for range in 0..spec.ranges {
            for page in 0..spec.pages_per_range {
                ops.push(TraceOp {
                    at: SimTime::from_micros(t),
                    kind: OpKind::Write,
                    addr: PageAddr::new(range, page),
                    payload_seed: Some(rng.random()),
                });
                t += spec.interarrival_us;
            }
        }
        // let the warm-up drain before measuring
        t += 100.0 * spec.interarrival_us;
    }
    let warmup = ops.len();
    for _ in 0..spec.operations {
        let burst = script.burst_multiplier(SimTime::from_micros(t));
        t += gap.sample(&mut rng) / burst;
        let addr = PageAddr::new(rng.random_range(0..spec.ranges.max(1)), rng.random_range(0..spec.pages_per_range.max(1)));
        let read = rng.random_bool(spec.read_fraction.clamp(0.0, 1.0));
        ops.push(TraceOp {
            at: SimTime::from_micros(t),
            kind: if read { OpKind::Read } else { OpKind::Write },
            addr,
            payload_seed: (!read).then(|| rng.random()),
        });
    }
    (ops, warmup)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_and_without_header() {
        let text = "time_us,op,range,page,payload_seed\n0,W,1,2,99\n1.5,R,1,2\n";
        let ops = parse_trace(text).unwrap();
        assert_eq!(ops.len(), 2);
        assert_eq!(ops[0].payload_seed, Some(99));
        assert_eq!(ops[1].at, SimTime(1_500));
        assert_eq!(parse_trace("0,W,1,2,99\n").unwrap().len(), 1);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(matches!(parse_trace("0,X,1,2\n"), Err(TraceError::Parse { line: 1, .. })));
        assert!(matches!(parse_trace("0,W,1,2\n"), Err(TraceError::Parse { .. })));
        assert!(matches!(parse_trace("0,R,1\n"), Err(TraceError::Parse { .. })));
        assert!(matches!(parse_trace("0,R,1,2\nx,R,1,2\n"), Err(TraceError::Parse { line: 2, .. })));
    }

    #[test]
    fn trace_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let (ops, _) = generate(&WorkloadSpec { operations: 50, ..Default::default() }, &FaultScript::default(), 3);
        write_trace(&path, &ops).unwrap();
        assert_eq!(load_trace(&path).unwrap(), ops);
    }

    #[test]
    fn generation_is_seeded() {
        let spec = WorkloadSpec::default();
        let a = generate(&spec, &FaultScript::default(), 1);
        let b = generate(&spec, &FaultScript::default(), 1);
        assert_eq!(a, b);
        assert_eq!(a.1, 64);
        assert_ne!(a.0, generate(&spec, &FaultScript::default(), 2).0);
    }

    #[test]
    fn payload_pages_are_deterministic() {
        assert_eq!(page_from_seed(5, 4096), page_from_seed(5, 4096));
        assert_ne!(page_from_seed(5, 4096), page_from_seed(6, 4096));
    }
}
