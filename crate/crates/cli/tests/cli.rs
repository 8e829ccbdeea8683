use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SHORT: &str = r#"
[scenario]
name = "short"
sim_time = 2.0

[ego]
v0_ego = 10.0
v_ref_ego = 12.0

[nv]
v0_nv = 12.0
s0_nv = -10.0
q_s = 0.0
q_v = 1.0
q_a = 0.0

[geometry]
s_ramp_start = 0.0
s_ramp_end = 60.0
"#;

fn aimpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aimpc")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("scenario.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let out = dir.path().join("run");
    let o = aimpc(&["run", &cfg, "--mode", "cv", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,s_ego,v_ego,a_ego,l_ego,rl_ego,ua_ego,ul_ego,s_nv,v_nv,a_nv,u_nv,alpha_s,alpha_v,alpha_a,mu,beta,obj,nodes"
    );
    let times: Vec<f64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(times.len(), 6);
    assert!(times.windows(2).all(|w| w[1] > w[0]));

    let text = std::fs::read_to_string(out.join("metrics.json")).unwrap();
    let keys = [
        "merge_outcome",
        "merge_time_s",
        "hindrance_pct",
        "rms_jerk",
        "min_same_lane_gap_m",
        "mean_solve_ms",
        "max_solve_ms",
        "final_alpha",
    ];
    let pos: Vec<usize> = keys.iter().map(|k| text.find(&format!("\"{k}\"")).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]), "key order {pos:?}");
    let m = read_json(&out.join("metrics.json"));
    assert!(m["mean_solve_ms"].is_null());
    for svg in ["position.svg", "lateral.svg", "alpha.svg"] {
        let s = std::fs::read_to_string(out.join(svg)).unwrap();
        assert!(s.starts_with("<svg"));
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = aimpc(&["run", &cfg, "--mode", "aimpc", "--out", out.to_str().unwrap(), "--seed", "3"]);
        assert!(o.status.success());
    }
    for f in ["trajectory.csv", "metrics.json", "position.svg"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn timing_flag_fills_solve_times() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let out = dir.path().join("t");
    let o = aimpc(&["run", &cfg, "--mode", "ca", "--out", out.to_str().unwrap(), "--timing"]);
    assert!(o.status.success());
    let m = read_json(&out.join("metrics.json"));
    assert!(m["mean_solve_ms"].as_f64().unwrap() >= 0.0);
}

#[test]
fn missing_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SHORT.replace("v0_nv = 12.0\n", ""));
    let o = aimpc(&["run", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("v0_nv"));
}

#[test]
fn unknown_key_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SHORT.replace("s0_nv = -10.0", "s_nv0 = -10.0"));
    let o = aimpc(&["run", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("s_nv0") && err.contains("line 12"), "{err}");
}

#[test]
fn unknown_mode_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let o = aimpc(&["run", &cfg, "--mode", "fast", "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_needs_two_modes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let o = aimpc(&["compare", &cfg, "--modes", "cv", "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_emits_orderings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let out = dir.path().join("cmp");
    let o = aimpc(&["compare", &cfg, "--modes", "cv,ca", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let c = read_json(&out.join("comparison.json"));
    assert_eq!(c["scenario"], "short");
    assert!(c["modes"]["cv"]["merge_outcome"].is_string());
    assert_eq!(c["orderings"]["hindrance_pct"].as_array().unwrap().len(), 2);
    assert_eq!(c["orderings"]["rms_jerk"].as_array().unwrap().len(), 2);
    assert_eq!(c["pairwise"].as_array().unwrap().len(), 1);
    assert!(out.join("cv").join("trajectory.csv").exists());
    assert!(out.join("ca").join("metrics.json").exists());
}

#[test]
fn impute_bench_recovers_speed_tracking() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let o = aimpc(&["impute-bench", "--nature", "0,1,0", "--windows", "5", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = read_json(&out.join("summary.json"));
    assert!(s["final_alpha"]["alpha_v"].as_f64().unwrap() >= 0.8);
    let csv = std::fs::read_to_string(out.join("alpha.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn impute_bench_accepts_mixed_nature() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let o = aimpc(&["impute-bench", "--nature", "0.4,0.4,0.2", "--windows", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn impute_bench_rejects_off_simplex_nature() {
    let dir = tempfile::tempdir().unwrap();
    let o = aimpc(&["impute-bench", "--nature", "0.5,0.6,0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
