//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line with the measured values before asserting.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::time::{Duration, Instant};

use hydra_core::analysis::{
    emit_report, imbalance_for, percentile, replay, run_experiment, Experiment, ExperimentConfig, Scalar,
    Scenario,
};
use hydra_core::coding::{min_splits, Codec, CodecParams, Page, RecoveryMode, Split};
use hydra_core::manager::{OpKind, OpOutcome, PageAddr};
use hydra_core::placement::{
    binomial_u128, build_plan, count_copysets, loss_probability_analytic, loss_probability_exact,
    loss_probability_montecarlo, ClusterShape, LossMode, MachineId, Scheme,
};
use hydra_core::sim::{FaultEvent, FaultScript, LatencyModel, RangeId, SimTime, StragglerScope};
use hydra_core::system::{HydraSystem, SystemConfig};
use hydra_core::workload::{page_from_seed, TraceOp};
use num_rational::Ratio;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Written to the raw stderr handle so the line shows without `--nocapture`.
fn verdict(n: u32, ok: bool, detail: String) {
    let line = format!("criterion {n}: {} ({detail})\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {n} failed: {detail}");
}

fn random_page(rng: &mut ChaCha8Rng) -> Page {
    let mut bytes = vec![0u8; 4096];
    rng.fill(&mut bytes[..]);
    Page::new(bytes)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else { return out };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[test]
fn criterion_01_exhaustive_round_trip() {
    let start = Instant::now();
    let codec = Codec::new(CodecParams::new(8, 2, 0).unwrap()).unwrap();
    let subsets = combinations(10, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = 0;
    for _ in 0..100 {
        let page = random_page(&mut rng);
        let splits = codec.encode_page(&page).unwrap();
        for s in &subsets {
            let chosen: Vec<Split> = s.iter().map(|&i| splits[i].clone()).collect();
            if codec.decode(&chosen).unwrap() != page {
                failures += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        subsets.len() == 45 && failures == 0 && elapsed < Duration::from_secs(5),
        format!("{} subsets x 100 pages, {failures} mismatches, {elapsed:.2?}", subsets.len()),
    );
}

#[test]
fn criterion_02_detection_and_correction_thresholds() {
    let params = CodecParams::new(8, 3, 1).unwrap();
    let codec = Codec::new(params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut misses, mut false_alarms, mut wrong_corrections) = (0, 0, 0);
    for _ in 0..100 {
        let page = random_page(&mut rng);
        let splits = codec.encode_page(&page).unwrap();
        let mut order: Vec<usize> = (0..11).collect();
        order.shuffle(&mut rng);
        let nine: Vec<Split> = order[..9].iter().map(|&i| splits[i].clone()).collect();
        if codec.detect_corruption(&nine, 1).unwrap() {
            false_alarms += 1;
        }
        let victim = rng.random_range(0..9);
        let mut bad = nine.clone();
        let at = rng.random_range(0..bad[victim].bytes.len());
        bad[victim].bytes[at] ^= rng.random_range(1..=255u8);
        if !codec.detect_corruption(&bad, 1).unwrap() {
            misses += 1;
        }
        let mut eleven: Vec<Split> = order.iter().map(|&i| splits[i].clone()).collect();
        let victim = rng.random_range(0..11);
        let at = rng.random_range(0..eleven[victim].bytes.len());
        eleven[victim].bytes[at] ^= rng.random_range(1..=255u8);
        let fixed = codec.correct_corruption(&eleven, 1).unwrap();
        if fixed.page != page || fixed.corrupted != BTreeSet::from([eleven[victim].index]) {
            wrong_corrections += 1;
        }
    }
    let base = CodecParams::new(8, 2, 1).unwrap();
    let failure = min_splits(RecoveryMode::Failure, &base);
    let detect = min_splits(RecoveryMode::Detect, &base);
    let correct = min_splits(RecoveryMode::Correct, &base);
    let overheads_ok = failure.overhead == Ratio::new(5, 4)
        && detect.count == 9
        && detect.overhead == Ratio::new(9, 8)
        && correct.count == 11
        && correct.overhead == Ratio::new(11, 8);
    verdict(
        2,
        misses == 0 && false_alarms == 0 && wrong_corrections == 0 && overheads_ok,
        format!(
            "misses {misses}, false alarms {false_alarms}, bad corrections {wrong_corrections}, overheads {}/{}/{}",
            failure.overhead, detect.overhead, correct.overhead
        ),
    );
}

#[test]
fn criterion_03_copyset_counts() {
    let params = CodecParams::new(8, 2, 0).unwrap();
    let single = build_plan(Scheme::CodingSets, &ClusterShape::new(10, 16, 0.0), &params, 0, 0).unwrap();
    let extended = build_plan(Scheme::CodingSets, &ClusterShape::new(12, 16, 0.0), &params, 2, 0).unwrap();
    let (a, b) = (count_copysets(&single, &params), count_copysets(&extended, &params));
    verdict(3, a == 120 && b == 220, format!("8+2 group {a}, l=2 group {b}"));
}

#[test]
fn criterion_04_analytic_vs_exact_loss() {
    let start = Instant::now();
    let shape = ClusterShape::new(60, 16, 0.05);
    let params = CodecParams::new(4, 2, 0).unwrap();
    let plan = build_plan(Scheme::CodingSets, &shape, &params, 0, 4).unwrap();
    let exact = loss_probability_exact(&plan, &shape, &params, LossMode::Conservative).unwrap();
    let mc = loss_probability_montecarlo(&plan, &shape, &params, 100_000, 4).unwrap();
    let analytic = loss_probability_analytic(Scheme::CodingSets, &shape, &params, 0).unwrap();
    let elapsed = start.elapsed();
    let within = (mc.estimate - exact).abs() <= 3.0 * mc.half_width;
    let ratio = analytic / exact;
    verdict(
        4,
        shape.failed_machines() == 3
            && within
            && (0.5..=2.0).contains(&ratio)
            && elapsed < Duration::from_secs(30),
        format!(
            "exact {exact:.6} over {} triples, mc {:.6} +/- {:.6}, analytic {analytic:.6} (ratio {ratio:.3}), {elapsed:.2?}",
            binomial_u128(60, 3),
            mc.estimate,
            mc.half_width
        ),
    );
}

#[test]
fn criterion_05_order_of_magnitude_availability() {
    let start = Instant::now();
    let shape = ClusterShape::new(1000, 16, 0.01);
    let params = CodecParams::new(8, 2, 0).unwrap();
    let ec = loss_probability_analytic(Scheme::EcCache, &shape, &params, 0).unwrap();
    let cs = loss_probability_analytic(Scheme::CodingSets, &shape, &params, 2).unwrap();
    let ec_plan = build_plan(Scheme::EcCache, &shape, &params, 0, 5).unwrap();
    let cs_plan = build_plan(Scheme::CodingSets, &shape, &params, 2, 5).unwrap();
    let ec_mc = loss_probability_montecarlo(&ec_plan, &shape, &params, 100_000, 5).unwrap();
    let cs_mc = loss_probability_montecarlo(&cs_plan, &shape, &params, 100_000, 5).unwrap();
    let elapsed = start.elapsed();
    let ratio = ec / cs;
    verdict(
        5,
        ratio >= 5.0 && ec_mc.lower() > cs_mc.upper() && elapsed < Duration::from_secs(60),
        format!(
            "analytic eccache {ec:.3e} / codingsets {cs:.3e} = {ratio:.1}; mc eccache [{:.3e}, {:.3e}] codingsets [{:.3e}, {:.3e}], {elapsed:.2?}",
            ec_mc.lower(),
            ec_mc.upper(),
            cs_mc.lower(),
            cs_mc.upper()
        ),
    );
}

#[test]
fn criterion_06_load_balance_ordering() {
    let start = Instant::now();
    let mut config = ExperimentConfig::new(Scenario::LoadBalance);
    config.shape = ClusterShape::new(10_000, 16, 0.0);
    config.params = CodecParams::new(8, 2, 0).unwrap();
    let mean = |scheme: Scheme, l: usize| {
        let mut c = config.clone();
        c.load_factor = l;
        (0..20u64).map(|seed| imbalance_for(scheme, &c, seed).unwrap().max_to_min).sum::<f64>() / 20.0
    };
    let p2 = mean(Scheme::PowerOfTwo, 0);
    let cs4 = mean(Scheme::CodingSets, 4);
    let cs2 = mean(Scheme::CodingSets, 2);
    let ec = mean(Scheme::EcCache, 0);
    let elapsed = start.elapsed();
    verdict(
        6,
        p2 <= cs4 && cs4 <= cs2 && cs2 <= ec && elapsed < Duration::from_secs(60),
        format!(
            "max/min power_of_two {p2:.3} <= codingsets(4) {cs4:.3} <= codingsets(2) {cs2:.3} <= eccache {ec:.3}, {elapsed:.2?}"
        ),
    );
}

fn read_latencies(params: CodecParams, latency: LatencyModel, reads: usize) -> Vec<f64> {
    let mut config = SystemConfig {
        shape: ClusterShape::new(params.width() + 2, 16, 0.0),
        params,
        load_factor: 0,
        latency,
        seed: 7,
        ..SystemConfig::default()
    };
    config.cluster.record_log = false;
    let mut system = HydraSystem::new(&config).unwrap();
    for p in 0..16u32 {
        system.write(SimTime(p as u64 * 100_000), PageAddr::new(0, p), page_from_seed(p as u64, 4096));
    }
    system.run();
    let t0 = system.now().0 + 1_000;
    let ids: Vec<_> = (0..reads)
        .map(|i| system.read(SimTime(t0 + i as u64 * 100_000), PageAddr::new(0, i as u32 % 16)))
        .collect();
    system.run();
    ids.iter()
        .map(|id| {
            let rec = system.record(*id).unwrap();
            assert_eq!(rec.outcome, OpOutcome::Ok);
            rec.latency_ns().unwrap() as f64 / 1_000.0
        })
        .collect()
}

#[test]
fn criterion_07_late_binding_tail() {
    let latency = LatencyModel {
        straggler_probability: 0.05,
        straggler_multiplier: 10.0,
        straggler_scope: StragglerScope::PerOperation,
        ..LatencyModel::default()
    };
    let plain = read_latencies(CodecParams::new(8, 2, 0).unwrap(), latency.clone(), 10_000);
    let late = read_latencies(CodecParams::new(8, 2, 1).unwrap(), latency, 10_000);
    let (p50_0, p99_0) = (percentile(&plain, 50.0), percentile(&plain, 99.0));
    let (p50_1, p99_1) = (percentile(&late, 50.0), percentile(&late, 99.0));
    verdict(
        7,
        p99_0 >= 2.0 * p99_1 && p50_1 / p50_0 <= 1.10,
        format!(
            "p99 {p99_0:.2} -> {p99_1:.2} us ({:.1}x), p50 {p50_0:.2} -> {p50_1:.2} us (ratio {:.3})",
            p99_0 / p99_1,
            p50_1 / p50_0
        ),
    );
}

fn write_latencies(async_parity: bool, writes: usize) -> Vec<f64> {
    let mut config = SystemConfig { load_factor: 0, seed: 8, ..SystemConfig::default() };
    config.manager.async_parity = async_parity;
    config.cluster.record_log = false;
    let mut system = HydraSystem::new(&config).unwrap();
    let ids: Vec<_> = (0..writes)
        .map(|i| {
            let addr = PageAddr::new(i as u64 % 4, (i / 4) as u32 % 64);
            system.write(SimTime(i as u64 * 50_000), addr, page_from_seed(i as u64, 4096))
        })
        .collect();
    system.run();
    ids.iter()
        .map(|id| {
            let rec = system.record(*id).unwrap();
            assert_eq!(rec.outcome, OpOutcome::Ok);
            rec.latency_ns().unwrap() as f64 / 1_000.0
        })
        .collect()
}

#[test]
fn criterion_08_async_parity_hides_encoding() {
    let encode = LatencyModel::default().encode_us;
    let a = percentile(&write_latencies(true, 10_000), 50.0);
    let s = percentile(&write_latencies(false, 10_000), 50.0);
    verdict(
        8,
        a <= s - encode,
        format!("p50 async {a:.3} us, sync {s:.3} us, encode {encode} us, gap {:.3} us", s - a),
    );
}

const FAULT_EPOCH_US: f64 = 2_000.0;

/// Slab losses hit only machines of `fault_group`, at most `r` concurrently
/// per epoch, with every failed machine back before the next epoch. Pages of
/// the other ranges get at most `Δ` corrupted splits until rewritten.
fn random_faults(
    rng: &mut ChaCha8Rng,
    config: &SystemConfig,
    ops: &[TraceOp],
    fault_members: &[MachineId],
    fault_ranges: &[u64],
    corrupt_ranges: &[u64],
) -> FaultScript {
    let r = config.params.r;
    let width = config.params.width();
    let end = ops.last().unwrap().at.as_micros();
    let start = ops.iter().find(|o| o.kind == OpKind::Read).unwrap().at.as_micros();
    let mut events = Vec::new();
    let mut t = start;
    while t + FAULT_EPOCH_US < end {
        let losses = rng.random_range(1..=r);
        let evictions = rng.random_range(0..=losses.min(1));
        let failures = losses - evictions;
        for j in index::sample(rng, fault_members.len(), failures) {
            let machine = fault_members[j].0;
            events.push(FaultEvent::Fail { machine, at_us: t + 10.0 });
            events.push(FaultEvent::Recover { machine, at_us: t + FAULT_EPOCH_US / 2.0 });
        }
        for _ in 0..evictions {
            let range = fault_ranges[rng.random_range(0..fault_ranges.len())];
            events.push(FaultEvent::Evict { range, index: rng.random_range(0..width), at_us: t + 20.0 });
        }
        t += FAULT_EPOCH_US;
    }
    // a page may be corrupted again only after a write replaced it
    let mut dirty: BTreeSet<(u64, u32)> = BTreeSet::new();
    let mut next_corruption = start;
    for op in ops.iter().filter(|o| o.at.as_micros() >= start) {
        let key = (op.addr.range.0, op.addr.page);
        if op.kind == OpKind::Write {
            dirty.remove(&key);
        }
        if op.at.as_micros() < next_corruption || !corrupt_ranges.contains(&key.0) {
            continue;
        }
        if dirty.insert(key) {
            events.push(FaultEvent::Corrupt {
                range: key.0,
                index: rng.random_range(0..width),
                page: key.1,
                offset: rng.random_range(0..512),
                mask: vec![rng.random_range(1..=255)],
                at_us: op.at.as_micros() - 1.0,
            });
            next_corruption = op.at.as_micros() + rng.random_range(20.0..200.0);
        }
    }
    FaultScript::new(events)
}

fn fault_config(seed: u64) -> SystemConfig {
    let mut config = SystemConfig {
        shape: ClusterShape::new(26, 16, 0.0),
        params: CodecParams::new(8, 3, 1).unwrap(),
        load_factor: 2,
        seed,
        ..SystemConfig::default()
    };
    config.manager.verify_reads = true;
    config.cluster.record_log = false;
    config
}

fn uniform_ops(rng: &mut ChaCha8Rng, ranges: &[u64], pages: u32, count: usize) -> Vec<TraceOp> {
    let mut ops = Vec::new();
    let mut t = 0.0;
    for &range in ranges {
        for page in 0..pages {
            ops.push(TraceOp {
                at: SimTime::from_micros(t),
                kind: OpKind::Write,
                addr: PageAddr::new(range, page),
                payload_seed: Some(rng.random()),
            });
            t += 5.0;
        }
    }
    t += 500.0;
    for _ in 0..count {
        t += rng.random_range(1.0..40.0);
        let read = rng.random_bool(0.6);
        ops.push(TraceOp {
            at: SimTime::from_micros(t),
            kind: if read { OpKind::Read } else { OpKind::Write },
            addr: PageAddr::new(ranges[rng.random_range(0..ranges.len())], rng.random_range(0..pages)),
            payload_seed: (!read).then(|| rng.random()),
        });
    }
    ops
}

#[test]
fn criterion_09_read_your_writes_under_faults() {
    let mut wrong = 0;
    let mut failed = 0;
    let mut operations = 0;
    let mut corrected = 0;
    let mut regenerations = 0;
    for seed in 0..3u64 {
        let config = fault_config(seed);
        let plan = build_plan(config.scheme, &config.shape, &config.params, config.load_factor, seed).unwrap();
        let mut by_group: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
        for range in 0..8u64 {
            by_group.entry(plan.group_for_range(range)).or_default().push(range);
        }
        assert_eq!(by_group.len(), 2, "both groups need ranges");
        let (&fault_group, fault_ranges) = by_group.iter().next().unwrap();
        let corrupt_ranges = &by_group.iter().nth(1).unwrap().1;
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let ranges: Vec<u64> = (0..8).collect();
        let ops = uniform_ops(&mut rng, &ranges, 16, 10_000);
        let warmup = 8 * 16;
        let script =
            random_faults(&mut rng, &config, &ops, &plan.groups[fault_group].members, fault_ranges, corrupt_ranges);
        let run = replay(&config, &script, &ops, warmup).unwrap();
        operations += run.records.len();
        wrong += run.wrong_pages;
        failed += run.failed_ops() + run.unrecoverable_ranges;
        corrected += run.count(|o| matches!(o, OpOutcome::Corrected(_)));
        regenerations += run.regenerations;
    }

    // r + 1 failures inside one range
    let config = fault_config(11);
    let mut system = HydraSystem::new(&config).unwrap();
    let mut chosen: BTreeMap<usize, u64> = BTreeMap::new();
    for range in 0..8u64 {
        system.map_range(RangeId(range)).unwrap();
        chosen.entry(system.manager.range(RangeId(range)).unwrap().group).or_insert(range);
    }
    let targets: Vec<u64> = chosen.values().copied().collect();
    for (i, &range) in targets.iter().enumerate() {
        for p in 0..8u32 {
            system.write(SimTime::from_micros(i as f64 * 100.0 + p as f64), PageAddr::new(range, p), page_from_seed(p as u64, 4096));
        }
    }
    system.run();
    let victim = targets[0];
    let machines = system.manager.range(RangeId(victim)).unwrap().machines();
    let t = system.now().as_micros() + 10.0;
    system
        .inject(&FaultScript::new(
            machines[..config.params.r + 1].iter().map(|m| FaultEvent::Fail { machine: m.0, at_us: t }).collect(),
        ))
        .unwrap();
    system.run();
    let reads: Vec<_> = targets.iter().map(|&r| (r, system.read(system.now(), PageAddr::new(r, 3)))).collect();
    system.run();
    let lost_reads: Vec<u64> = reads
        .iter()
        .filter(|(_, id)| system.record(*id).unwrap().outcome == OpOutcome::Unrecoverable)
        .map(|(r, _)| *r)
        .collect();
    let exact = system.unrecoverable_ranges == BTreeSet::from([RangeId(victim)]) && lost_reads == vec![victim];

    verdict(
        9,
        wrong == 0 && failed == 0 && exact,
        format!(
            "{operations} ops over 3 scripts: {wrong} wrong pages, {failed} failures, {corrected} corrected reads, \
             {regenerations} regenerations; r+1 failures in {victim} -> unrecoverable {:?} of {} ranges",
            system.unrecoverable_ranges,
            targets.len()
        ),
    );
}

#[test]
fn criterion_10_regeneration_equivalence() {
    let params = CodecParams::new(8, 2, 1).unwrap();
    let codec = Codec::new(params).unwrap();
    let pages = 32u32;
    let mut mismatched = 0;
    let mut bad_reads = 0;
    let mut reads_during = 0;
    for index in 0..params.width() {
        let mut config = SystemConfig {
            shape: ClusterShape::new(12, 16, 0.0),
            params,
            load_factor: 0,
            seed: index as u64,
            ..SystemConfig::default()
        };
        config.cluster.record_log = false;
        let mut system = HydraSystem::new(&config).unwrap();
        for p in 0..pages {
            system.write(SimTime::from_micros(p as f64), PageAddr::new(0, p), page_from_seed(1000 + p as u64, 4096));
        }
        system.run();
        let victim = system.manager.range(RangeId(0)).unwrap().slots[index].at.machine;
        let t = system.now().as_micros() + 5.0;
        system.inject(&FaultScript::new(vec![FaultEvent::Fail { machine: victim.0, at_us: t }])).unwrap();
        let reads: Vec<_> = (0..200u32)
            .map(|i| (i % pages, system.read(SimTime::from_micros(t + 1.0 + i as f64 * 0.5), PageAddr::new(0, i % pages))))
            .collect();
        system.run();
        let report = system.monitors.reports().iter().find(|r| r.index == index && r.completed).expect("regenerated");
        for (p, id) in reads {
            let rec = system.record(id).unwrap();
            if rec.page.as_ref() != Some(&page_from_seed(1000 + p as u64, 4096)) {
                bad_reads += 1;
            }
            let started = rec.started.unwrap();
            if started >= report.started && started < report.finished {
                reads_during += 1;
            }
        }
        let slot = system.manager.range(RangeId(0)).unwrap().slots[index].at;
        for p in 0..pages {
            let expected = codec.encode_page(&page_from_seed(1000 + p as u64, 4096)).unwrap();
            if system.cluster.peek_split(slot, p) != Some(expected[index].bytes.as_slice()) {
                mismatched += 1;
            }
        }
    }
    verdict(
        10,
        mismatched == 0 && bad_reads == 0 && reads_during > 0,
        format!(
            "{} slots x {pages} pages: {mismatched} split mismatches; {reads_during} reads during regeneration, {bad_reads} wrong",
            params.width()
        ),
    );
}

#[test]
fn criterion_11_byte_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("faults.toml"),
        "[[events]]\nkind = \"fail\"\nmachine = 2\nat_us = 3000.0\n\n\
         [[events]]\nkind = \"corrupt\"\nrange = 1\nindex = 4\npage = 2\noffset = 9\nmask = [5]\nat_us = 2500.0\n",
    )
    .unwrap();
    let mut configs = Vec::new();
    let mut loss = ExperimentConfig::new(Scenario::LossCurves);
    loss.shape = ClusterShape::new(300, 8, 0.02);
    loss.load_factor = 2;
    loss.trials = 20_000;
    loss.sweep.insert("load_factor".into(), vec![Scalar::Int(0), Scalar::Int(2)]);
    configs.push(loss);
    let mut balance = ExperimentConfig::new(Scenario::LoadBalance);
    balance.shape = ClusterShape::new(500, 16, 0.0);
    balance.seeds = vec![1, 2, 3];
    configs.push(balance);
    let mut datapath = ExperimentConfig::new(Scenario::Datapath);
    datapath.shape = ClusterShape::new(14, 16, 0.0);
    datapath.load_factor = 2;
    datapath.workload.operations = 500;
    datapath.fault_script = Some(dir.path().join("faults.toml"));
    datapath.sweep.insert("async_parity".into(), vec![Scalar::Bool(true), Scalar::Bool(false)]);
    configs.push(datapath);

    let mut identical = 0;
    let mut names = Vec::new();
    for config in &configs {
        let bytes: Vec<Vec<u8>> = ["first", "second"]
            .iter()
            .map(|sub| {
                let exp = Experiment::from_config(config.clone()).unwrap();
                let path = emit_report(&run_experiment(&exp).unwrap(), &dir.path().join(sub)).unwrap();
                names.push(path.file_name().unwrap().to_string_lossy().into_owned());
                fs::read(path).unwrap()
            })
            .collect();
        if bytes[0] == bytes[1] {
            identical += 1;
        }
    }
    names.dedup();
    verdict(
        11,
        identical == configs.len(),
        format!("{identical}/{} scenarios byte-identical: {}", configs.len(), names.join(", ")),
    );
}
