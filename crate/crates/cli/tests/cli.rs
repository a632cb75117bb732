use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hydra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hydra")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const LOSS: &str = r#"
schema_version = 1
scenario = "loss-curves"
seed = 3
load_factor = 2
trials = 2000
[shape]
machines = 100
slabs_per_machine = 4
failure_fraction = 0.03
[sweep]
failure_fraction = [0.02, 0.04]
"#;

#[test]
fn loss_writes_named_csv_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), LOSS);
    let mut outputs = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let o = hydra(&["loss", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
        assert_eq!(files.len(), 1);
        let name = files[0].file_name().unwrap().to_string_lossy().into_owned();
        assert!(name.starts_with("loss-curves_") && name.ends_with(".csv"), "{name}");
        outputs.push((name, fs::read(&files[0]).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let text = String::from_utf8(outputs[0].1.clone()).unwrap();
    // header plus two sweep points times two schemes
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().next().unwrap().ends_with("seed,config_hash"));
}

#[test]
fn seed_override_changes_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), LOSS);
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    assert!(hydra(&["loss", "--config", &cfg, "--out", out]).status.success());
    assert!(hydra(&["loss", "--config", &cfg, "--out", out, "--seed", "9", "--trials", "500"]).status.success());
    assert_eq!(fs::read_dir(out).unwrap().count(), 2);
}

#[test]
fn validate_config_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), LOSS);
    let ok = hydra(&["validate-config", "--config", &cfg]);
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("ok: loss-curves"));

    let bad = write_config(dir.path(), &LOSS.replace("[0.02, 0.04]", "[]"));
    let o = hydra(&["validate-config", "--config", &bad]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty"));

    let missing = write_config(dir.path(), &format!("fault_script = \"nope.toml\"\n{LOSS}"));
    assert!(!hydra(&["validate-config", "--config", &missing]).status.success());
}

#[test]
fn scenario_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), LOSS);
    let o = hydra(&["balance", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("loss-curves"));
}

#[test]
fn datapath_with_trace_and_faults() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("faults.toml"),
        "[[events]]\nkind = \"fail\"\nmachine = 3\nat_us = 50.0\n",
    )
    .unwrap();
    let mut trace = String::from("time_us,op,range,page,payload_seed\n");
    for p in 0..8 {
        trace.push_str(&format!("{},W,0,{p},{}\n", p * 5, 100 + p));
    }
    for p in 0..8 {
        trace.push_str(&format!("{},R,0,{p}\n", 200 + p * 5));
    }
    fs::write(dir.path().join("trace.csv"), trace).unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
schema_version = 1
scenario = "datapath"
fault_script = "faults.toml"
trace = "trace.csv"
output_dir = "results"
load_factor = 2
[shape]
machines = 12
slabs_per_machine = 16
failure_fraction = 0.0
"#,
    );
    let o = hydra(&["datapath", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let file = fs::read_dir(dir.path().join("results")).unwrap().next().unwrap().unwrap().path();
    let mut rows = csv::Reader::from_path(file).unwrap();
    let header = rows.headers().unwrap().clone();
    let col = |n: &str| header.iter().position(|h| h == n).unwrap();
    let first = rows.records().next().unwrap().unwrap();
    assert_eq!(&first[col("system")], "hydra");
    assert_eq!(&first[col("reads")], "8");
    assert_eq!(&first[col("wrong_pages")], "0");
    assert_eq!(&first[col("unrecoverable")], "0");

    fs::write(dir.path().join("trace.csv"), "0,W,0,1\n").unwrap();
    let o = hydra(&["datapath", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("trace line 1"));
}
