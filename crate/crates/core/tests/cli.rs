mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{autocorrelation_peak, csv_column};
use serde_json::Value;

fn oinv(args: &[&str], env_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_oinv"));
    cmd.args(args).env_remove("OINV_OUT_DIR");
    if let Some(root) = env_root {
        cmd.env("OINV_OUT_DIR", root);
    }
    cmd.output().unwrap()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn invert_writes_trajectory_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("inv");
    let o = oinv(&["--out", out.to_str().unwrap(), "invert"], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let traj = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(
        traj.lines().next().unwrap(),
        "iter,z_0,z_1,step_distance,pred_0,pred_1"
    );
    let s = summary(&out);
    assert_eq!(s["tool"], "oinv");
    assert_eq!(s["base_seed"], 20241015);
    assert!(s["wall_clock_seconds"].is_null());
    assert!(s["null_reasons"]["wall_clock_seconds"].is_string());
    let rec = &s["records"][0];
    assert!(rec["period"].is_null() && rec["null_reasons"]["period"].is_string());
    // every null field carries a reason
    for (k, v) in rec.as_object().unwrap() {
        if v.is_null() {
            assert!(rec["null_reasons"][k].is_string(), "{k}");
        }
    }
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let o = oinv(&["--out", dir.to_str().unwrap(), "verify"], None);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.len() > 3);
    assert_eq!(fa, fb);
}

#[test]
fn sequential_flag_does_not_change_output() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(oinv(&["--out", a.to_str().unwrap(), "sweep"], None)
        .status
        .success());
    assert!(oinv(
        &["--sequential", "--out", b.to_str().unwrap(), "sweep"],
        None
    )
    .status
    .success());
    assert_eq!(files(&a), files(&b));
}

#[test]
fn summary_floats_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("root");
    assert!(oinv(&["--out", out.to_str().unwrap(), "root"], None)
        .status
        .success());
    let text = std::fs::read_to_string(out.join("summary.json")).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    // the shortest form of every parsed float is the token that was written
    let mut stack = vec![&v];
    let mut seen = 0;
    while let Some(x) = stack.pop() {
        match x {
            Value::Array(a) => stack.extend(a),
            Value::Object(o) => stack.extend(o.values()),
            Value::Number(n) if n.is_f64() => {
                assert!(text.contains(&n.to_string()), "{n}");
                seen += 1;
            }
            _ => {}
        }
    }
    assert!(seen > 5);
    let r = v["records"][0]["root_residual"].as_f64().unwrap();
    assert!(r < 1e-8);
}

#[test]
fn env_root_is_used_without_out_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let o = oinv(&["root"], Some(tmp.path()));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("runs/default/summary.json").exists());
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(oinv(&["--out", a.to_str().unwrap(), "root"], None)
        .status
        .success());
    assert!(
        oinv(&["--seed", "7", "--out", b.to_str().unwrap(), "root"], None)
            .status
            .success()
    );
    let (sa, sb) = (summary(&a), summary(&b));
    assert_eq!(sb["base_seed"], 7);
    assert_ne!(sa["config_hash"], sb["config_hash"]);
}

#[test]
fn exit_codes() {
    assert_eq!(oinv(&["no-such-command"], None).status.code(), Some(1));
    assert_eq!(oinv(&["--help"], None).status.code(), Some(0));
    let o = oinv(&["--config", "/nonexistent/cfg.json", "root"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/cfg.json"));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    let mut v: Value =
        serde_json::from_str(oinv_core::harness::config::DEFAULT_CONFIG_JSON).unwrap();
    v["gamma"] = 1.5.into();
    std::fs::write(&cfg, v.to_string()).unwrap();
    assert_eq!(
        oinv(&["--config", cfg.to_str().unwrap(), "root"], None)
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn group_distance_autocorrelation_peaks_at_period() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("v");
    assert!(oinv(&["--out", out.to_str().unwrap(), "verify"], None)
        .status
        .success());
    let s = summary(&out);
    for m in 1..=3 {
        let rec = s["records"]
            .as_array()
            .unwrap()
            .iter()
            .find(|r| r["label"] == format!("group_m{m}"))
            .unwrap();
        let p = rec["period"].as_u64().unwrap() as usize;
        assert!(p >= 2);
        let series: Vec<f64> = csv_column(
            &out.join(format!("group/m{m}/distance.csv")),
            "distance_to_start",
        )
        .into_iter()
        .map(Option::unwrap)
        .collect();
        let tail = &series[series.len() - 50..];
        assert_eq!(autocorrelation_peak(tail, 25, 1e-6), p, "m = {m}");
    }
}
