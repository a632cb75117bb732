use hydra_core::analysis::{run_datapath, Experiment, ExperimentConfig, ExperimentReport, Scalar, Scenario};
use hydra_core::coding::CodecParams;
use hydra_core::placement::ClusterShape;
use hydra_core::sim::{FaultEvent, FaultScript, StragglerScope};
use hydra_core::workload::{generate, WorkloadSpec};

fn datapath(tweak: impl FnOnce(&mut ExperimentConfig)) -> ExperimentReport {
    let mut c = ExperimentConfig::new(Scenario::Datapath);
    c.shape = ClusterShape::new(24, 16, 0.0);
    c.load_factor = 2;
    c.workload = WorkloadSpec { operations: 4_000, read_fraction: 0.8, interarrival_us: 50.0, ..Default::default() };
    c.baselines.replication.clear();
    c.baselines.ssd_latency_us = None;
    tweak(&mut c);
    run_datapath(&Experiment::from_config(c).unwrap()).unwrap()
}

#[test]
fn median_read_falls_then_rises_with_k() {
    // transfer-bound links, where splitting a page pays off
    let report = datapath(|c| {
        c.latency.bandwidth_bytes_per_us = 1_000.0;
        c.params = CodecParams::new(1, 2, 1).unwrap();
        c.sweep.insert("k".into(), [1, 2, 8, 16].map(Scalar::Int).to_vec());
        c.shape = ClusterShape::new(40, 16, 0.0);
    });
    let p50 = report.numbers("read_p50_us");
    assert_eq!(p50.len(), 4);
    assert!(p50[1] < p50[0], "k=1 {} vs k=2 {}", p50[0], p50[1]);
    assert!(p50[3] > p50[2], "k=8 {} vs k=16 {}", p50[2], p50[3]);
}

#[test]
fn late_binding_trims_tail_without_hurting_median() {
    let report = datapath(|c| {
        c.latency.straggler_probability = 0.05;
        c.latency.straggler_scope = StragglerScope::PerOperation;
        c.sweep.insert("delta".into(), vec![Scalar::Int(0), Scalar::Int(1)]);
    });
    let (p50, p99) = (report.numbers("read_p50_us"), report.numbers("read_p99_us"));
    assert!(p99[1] < p99[0]);
    assert!(p50[1] <= p50[0] * 1.10);
}

#[test]
fn async_parity_lowers_write_median() {
    let report = datapath(|c| {
        c.workload.read_fraction = 0.2;
        c.sweep.insert("async_parity".into(), vec![Scalar::Bool(true), Scalar::Bool(false)]);
    });
    let w = report.numbers("write_p50_us");
    assert!(w[0] + ExperimentConfig::new(Scenario::Datapath).latency.encode_us <= w[1], "{w:?}");
    // durability still waits for parity
    let durable = report.numbers("durable_p50_us");
    assert!(durable[0] > w[0]);
}

#[test]
fn overhead_flags_reduce_read_latency() {
    let report = datapath(|c| {
        c.sweep.insert("run_to_completion".into(), vec![Scalar::Bool(false), Scalar::Bool(true)]);
        c.sweep.insert("in_place_coding".into(), vec![Scalar::Bool(false), Scalar::Bool(true)]);
    });
    let p50 = report.numbers("read_p50_us");
    // sorted sweep keys: in_place_coding outer, run_to_completion inner
    let (neither, in_place_only, both) = (p50[0], p50[2], p50[3]);
    assert!(both < in_place_only && in_place_only < neither, "{p50:?}");
}

#[test]
fn baselines_order_reads_and_writes() {
    let report = datapath(|c| {
        c.baselines.replication = vec![1, 3];
        c.baselines.ssd_latency_us = Some(80.0);
    });
    let sys = report.column("system").unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r[sys].as_str()).collect();
    assert_eq!(names, ["hydra", "replication(1)", "replication(3)", "ssd-backup"]);
    let reads = report.numbers("read_p50_us");
    let writes = report.numbers("write_p50_us");
    assert!(reads[2] <= reads[1] && writes[2] >= writes[1]);
    assert!(reads[3] > 80.0);
}

#[test]
fn background_load_and_failure_stay_correct() {
    let dir = tempfile::tempdir().unwrap();
    let script = "[[events]]\nkind = \"background_load\"\nstart_us = 5000.0\nend_us = 60000.0\nmultiplier = 3.0\n\n\
                  [[events]]\nkind = \"fail\"\nmachine = 5\nat_us = 20000.0\n\n\
                  [[events]]\nkind = \"burst\"\nstart_us = 30000.0\nend_us = 40000.0\nrate_multiplier = 4.0\n";
    std::fs::write(dir.path().join("f.toml"), script).unwrap();
    let report = datapath(|c| c.fault_script = Some(dir.path().join("f.toml")));
    let row = &report.rows[0];
    assert_eq!(row[report.column("wrong_pages").unwrap()], "0");
    assert_eq!(row[report.column("unrecoverable").unwrap()], "0");
}

#[test]
fn bursts_compress_arrivals() {
    let spec = WorkloadSpec { operations: 500, warmup: false, ..Default::default() };
    let calm = generate(&spec, &FaultScript::default(), 4).0;
    let bursty = generate(
        &spec,
        &FaultScript::new(vec![FaultEvent::Burst { start_us: 0.0, end_us: 1e9, rate_multiplier: 5.0 }]),
        4,
    )
    .0;
    assert!(bursty.last().unwrap().at < calm.last().unwrap().at);
}
