use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
name = "small"
seed = 9
duration = 30.0
warmup = 5.0
drain = 10.0
bucket = 5.0

[model]
hidden_size = 256
num_layers = 4
bytes_per_elem = 2
tp_degree = 1

[[scenarios]]
name = "s"
prompt_len = [[512, 1.0]]
output_len = [[16, 1.0]]
ttft_slo_ms = 2000.0
e2e_timeout_ms = 20000.0

[profiles.s]
ttft_ms = [[1, 60.0], [2, 90.0]]
tpot_ms = [[1, 10.0], [16, 14.0]]
prefix_benefit = 1.0

[[groups]]
name = "g"
scenarios = ["s"]
n_prefill = 2
n_decode = 2
batch_prefill = 2
batch_decode = 16

[[traffic.slots]]
start = 0.0
rates = { s = 8.0 }
"#;

fn pdsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdsim")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_accepts_good_and_names_bad_cross_references() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), "good.toml", SMALL);
    let o = pdsim(&["validate", &good]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("group g: 2P2D"));

    let orphan = SMALL.replace("scenarios = [\"s\"]", "scenarios = []");
    let bad = write_config(dir.path(), "bad.toml", &orphan);
    let o = pdsim(&["validate", &good, &bad]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("bad.toml") && err.contains('s'), "{err}");
    assert!(err.contains("1 of 2 configs are invalid"), "{err}");
}

#[test]
fn run_writes_outputs_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = pdsim(&["run", &cfg, "--out", out.to_str().unwrap(), "--event-log"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("throughput"));
    }
    for file in ["metrics.csv", "report.json", "events.jsonl"] {
        let x = fs::read(a.join(file)).unwrap();
        assert!(!x.is_empty(), "{file} is empty");
        assert_eq!(x, fs::read(b.join(file)).unwrap(), "{file} differs between runs");
    }
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("start,end,arrivals"));
    assert_eq!(csv.lines().count(), 1 + 8);
}

#[test]
fn seed_and_duration_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("o");
    let o = pdsim(&["run", &cfg, "--seed", "77", "--duration", "20", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 77);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
}

#[test]
fn zero_traffic_reports_null_success() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "zero.toml", &SMALL.replace("s = 8.0", "s = 0.0"));
    let out = dir.path().join("o");
    let o = pdsim(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["summary"]["success_rate"].is_null());
    assert_eq!(report["summary"]["throughput"], 0.0);
}

#[test]
fn report_normalizes_without_touching_raw_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("o");
    assert!(pdsim(&["run", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let raw = fs::read(out.join("metrics.csv")).unwrap();
    let o = pdsim(&["report", out.to_str().unwrap(), "--normalize"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("violations"));
    assert_eq!(fs::read(out.join("metrics.csv")).unwrap(), raw);
    let norm = fs::read_to_string(out.join("metrics.normalized.csv")).unwrap();
    let rps: Vec<f64> = norm.lines().skip(1).map(|l| l.split(',').nth(5).unwrap().parse().unwrap()).collect();
    assert!(rps.iter().all(|&x| (0.0..=1.0).contains(&x)));
    assert!(rps.contains(&1.0));
}

#[test]
fn ratio_experiment_writes_one_frame_per_split_and_an_argmax() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("sweep");
    let o = pdsim(&["sweep", &cfg, "--experiment", "ratio", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 3);
    assert_eq!(fs::read_dir(out.join("frames")).unwrap().count(), 3);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("ratio_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["points"].as_array().unwrap().len(), 3);
    assert!(summary["best"]["n_prefill"].as_u64().is_some());
}

#[test]
fn sweep_axes_multiply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let o = pdsim(&["sweep", &cfg, "--ratio", "1:3,2:2", "--load", "0.5,1", "--mode", "block_free,block_fixed"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = stdout(&o).lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).count();
    assert_eq!(rows, 8);

    let o = pdsim(&["sweep", &cfg, "--experiment", "policy"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains(",baseline,") && text.contains(",on_demand,"));
}

#[test]
fn bad_arguments_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    assert!(!pdsim(&["sweep", &cfg, "--ratio", "0:4"]).status.success());
    assert!(!pdsim(&["sweep", &cfg, "--mode", "teleport"]).status.success());
    assert!(!pdsim(&["run", "/nonexistent.toml"]).status.success());
    assert!(!pdsim(&["report", dir.path().to_str().unwrap()]).status.success());
}
