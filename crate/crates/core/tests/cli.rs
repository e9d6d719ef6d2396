use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn distzo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distzo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).expect("stderr is JSON")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn run_writes_outputs_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let o = distzo(&["run", "--steps", "10", "--out-dir", dir.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(stdout_json(&o)["steps"], 10);
    }
    let steps_a = std::fs::read_to_string(a.join("steps.jsonl")).unwrap();
    let steps_b = std::fs::read_to_string(b.join("steps.jsonl")).unwrap();
    assert_eq!(steps_a.lines().count(), 10);
    assert_eq!(steps_a, steps_b);
    let first: Value = serde_json::from_str(steps_a.lines().next().unwrap()).unwrap();
    for key in ["iter", "seed", "loss_pos", "loss_neg", "g"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert!(report["tokens_per_sec"].as_f64().unwrap() > 0.0);
    assert!(report["peak_device_bytes"].as_u64().unwrap() > 0);
    assert!(a.join("timeline.json").exists());
}

#[test]
fn streamed_run_exports_a_timeline() {
    let tmp = tempfile::tempdir().unwrap();
    let o = distzo(&["run", "--strategy", "zo2", "--steps", "3", "--out-dir", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tl: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("timeline.json")).unwrap()).unwrap();
    let entries = tl.as_array().unwrap();
    assert!(!entries.is_empty());
    for key in ["op", "block_id", "stream", "start", "end"] {
        assert!(entries[0].get(key).is_some(), "{key}");
    }
}

#[test]
fn invalid_mesh_exits_with_config_code() {
    let o = distzo(&["run", "--strategy", "2d", "--workers", "3"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr_json(&o);
    assert_eq!(err["error"], "config");
    assert_eq!(err["exit_code"], 2);
}

#[test]
fn malformed_config_file_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(tmp.path(), "bad.json", r#"{"strategy": "mezo", "bogus": 1}"#);
    assert_eq!(distzo(&["run", "--config", &bad]).status.code(), Some(2));
    let missing = tmp.path().join("nope.json");
    assert_eq!(distzo(&["run", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "cfg.json",
        r#"{"strategy": "pertp", "hyper": {"epsilon": 0.001, "lr": 0.01, "steps": 3}}"#,
    );
    let out = tmp.path().join("out");
    let o = distzo(&["run", "--config", &cfg, "--steps", "4", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = stdout_json(&o);
    assert_eq!(r["steps"], 4);
    assert_eq!(r["strategy"], "pertp");
    assert_eq!(r["workers"], 2);
}

#[test]
fn compare_tabulates_and_guards_models() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write(tmp.path(), "a.json", r#"{"strategy": "mezo"}"#);
    let b = write(tmp.path(), "b.json", r#"{"strategy": "zo2"}"#);
    let out = tmp.path().join("cmp");
    let o = distzo(&["compare", &a, &b, "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,workers,peak_device_bytes,tokens_per_sec,speedup_vs_first");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("mezo,1,"));
    assert!(lines[2].starts_with("zo2,1,"));

    let reports = [out.join("run-0/report.json"), out.join("run-1/report.json")];
    let o = distzo(&[
        "compare",
        "--reports",
        reports[0].to_str().unwrap(),
        reports[1].to_str().unwrap(),
        "--out-dir",
        tmp.path().join("again").to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 3);

    let big = write(tmp.path(), "c.json", r#"{"model": {"vocab_size":16,"d_model":8,"n_heads":2,"n_blocks":3,"seq_len":8}}"#);
    let o = distzo(&["compare", &a, &big, "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_passes_and_detects_injected_faults() {
    let o = distzo(&["verify", "--steps", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let r = stdout_json(&o);
    assert_eq!(r["passed"], true);
    assert_eq!(r["properties"].as_array().unwrap().len(), 9);

    let status = |r: &Value, name: &str| {
        r["properties"]
            .as_array()
            .unwrap()
            .iter()
            .find(|p| p["name"] == name)
            .unwrap()["status"]
            .as_str()
            .unwrap()
            .to_string()
    };
    let o = distzo(&["verify", "--steps", "5", "--inject", "seed-mismatch"]);
    assert_eq!(o.status.code(), Some(1));
    let r = stdout_json(&o);
    assert_eq!(status(&r, "pertp_matches_mezo"), "fail");
    assert_eq!(status(&r, "zo2_matches_mezo"), "pass");

    let o = distzo(&["verify", "--steps", "5", "--inject", "skip-flush"]);
    assert_eq!(o.status.code(), Some(1));
    let r = stdout_json(&o);
    assert_eq!(status(&r, "zo2_matches_mezo"), "fail");
    assert_eq!(status(&r, "pertp_matches_mezo"), "pass");
}

#[test]
fn simulate_reports_makespan_and_timeline() {
    let tmp = tempfile::tempdir().unwrap();
    let topo = write(
        tmp.path(),
        "topo.json",
        r#"{"host_bw": 1.0, "peer_bw": 6.0, "latency": 0.0, "devices": 4}"#,
    );
    let o = distzo(&["simulate", "--topology", &topo, "--params", "4096", "--out-dir", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = stdout_json(&o);
    assert_eq!(r["devices"], 4);
    let upload = r["speedup"]["upload"].as_f64().unwrap();
    assert!((3.5..=5.0).contains(&upload), "{upload}");
    assert!(tmp.path().join("timeline.json").exists());

    let o = distzo(&["simulate", "--topology", "no-such-profile"]);
    assert_eq!(o.status.code(), Some(2));
    let o = distzo(&["simulate", "--plan", "pipelined", "--direction", "offload"]);
    assert_eq!(o.status.code(), Some(2));
}
