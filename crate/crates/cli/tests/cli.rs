use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_openvlc-sim"));
    c.env_remove("RUST_BACKTRACE");
    c
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn short_two_node(dir: &Path) -> PathBuf {
    let p = dir.join("s.json");
    fs::write(
        &p,
        r#"{
          "t_end_s": 5,
          "nodes": [
            { "id": 1, "address": 1, "position": [0, 0, 0] },
            { "id": 2, "address": 2, "position": [0.6, 0, 0] }
          ],
          "channel": { "noise_sigma": 0.0 },
          "traffic": [ { "kind": "saturation", "src": 1, "dst": 2, "payload_bytes": 200 } ]
        }"#,
    )
    .unwrap();
    p
}

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = short_two_node(dir.path());
    let out = dir.path().join("out");
    let stdout = ok(bin().arg("run").arg(&spec).arg("--out").arg(&out).output().unwrap());
    let summary: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert!(summary["flows"][0]["delivered_bytes"].as_u64().unwrap() > 0);
    for f in ["metrics.csv", "rtt.csv", "trace.jsonl", "summary.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("flow,src,dst,interval_start_s"));
    let first = fs::read_to_string(out.join("trace.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    for key in ["time_us", "node", "kind", "detail"] {
        assert!(line.get(key).is_some(), "trace line lacks {key}");
    }
}

#[test]
fn run_overrides_seed_and_duration() {
    let dir = tempfile::tempdir().unwrap();
    let spec = short_two_node(dir.path());
    let stdout = ok(bin()
        .arg("run")
        .arg(&spec)
        .args(["--seed", "7", "--t-end", "2"])
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap());
    let summary: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(summary["seed"], 7);
    assert_eq!(summary["t_end_s"], 2.0);
}

#[test]
fn sweep_emits_csv() {
    let dir = tempfile::tempdir().unwrap();
    let spec = short_two_node(dir.path());
    let csv_path = dir.path().join("sweep.csv");
    ok(bin()
        .arg("sweep")
        .arg(&spec)
        .args(["--payloads", "50..150:50", "--out"])
        .arg(&csv_path)
        .output()
        .unwrap());
    let mut r = csv::Reader::from_path(&csv_path).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    for row in &rows {
        let sim: f64 = row[1].parse().unwrap();
        let analytic: f64 = row[2].parse().unwrap();
        assert!((sim - analytic).abs() / analytic < 0.03, "{row:?}");
    }
}

#[test]
fn calibrate_hits_target_points() {
    let dir = tempfile::tempdir().unwrap();
    let written = dir.path().join("cal.json");
    let stdout = ok(bin()
        .arg("calibrate")
        .arg(scenario("two_node.json"))
        .args(["--target-points", "50:6,1000:18", "--write"])
        .arg(&written)
        .output()
        .unwrap());
    assert!(stdout.contains("proc_overhead_a_us = 14433.9"), "{stdout}");
    let spec: serde_json::Value = serde_json::from_str(&fs::read_to_string(&written).unwrap()).unwrap();
    let b = spec["mac"]["proc_overhead_b_us_per_byte"].as_f64().unwrap();
    assert!((b - 23.387).abs() < 1e-3);
}

#[test]
fn calibrate_rejects_targets_above_capacity() {
    let out = bin()
        .arg("calibrate")
        .arg(scenario("two_node.json"))
        .args(["--target-points", "50:20,1000:30"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("negative overhead"));
}

#[test]
fn codec_round_trips_hex_and_symbols() {
    let hex = ok(bin().args(["codec", "encode", "--data", "48656c6c6f"]).output().unwrap());
    assert!(hex.trim().starts_with("0005000200010011"));
    let decoded = ok(bin().args(["codec", "decode", "--data", hex.trim()]).output().unwrap());
    let v: serde_json::Value = serde_json::from_str(&decoded).unwrap();
    assert_eq!(v["payload"], "48656c6c6f");
    assert_eq!(v["src"], 1);

    let dir = tempfile::tempdir().unwrap();
    let symbols = ok(bin()
        .args(["codec", "encode", "--format", "symbols", "--data", "00ff"])
        .output()
        .unwrap());
    assert_eq!(symbols.trim().len(), 32 + 16 * (12 + 16));
    let f = dir.path().join("frame.txt");
    fs::write(&f, &symbols).unwrap();
    let decoded = ok(bin()
        .args(["codec", "decode", "--format", "symbols", "--input"])
        .arg(&f)
        .output()
        .unwrap());
    assert!(decoded.contains("\"payload\":\"00ff\""));
}

#[test]
fn codec_reports_garbage() {
    let out = bin().args(["codec", "decode", "--data", "zz"]).output().unwrap();
    assert!(!out.status.success());
    let out = bin()
        .args(["codec", "decode", "--format", "symbols", "--data", "HLHL"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn shipped_scenarios_load() {
    for name in ["two_node.json", "two_node_calibrated.json", "ping.json", "uplink.json", "downlink.json"] {
        openvlc_core::harness::scenario::load_scenario(scenario(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
