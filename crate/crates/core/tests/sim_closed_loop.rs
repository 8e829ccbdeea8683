//! Short closed-loop runs: determinism, logging, safety and artifact round trips.

use aimpc_core::imputation::WeightVector;
use aimpc_core::io::{csv_rows, parse_scenario, read_csv, write_csv};
use aimpc_core::neighbor::NvTrueWeights;
use aimpc_core::sim::{
    compute_metrics, impute_bench, run_scenario, run_unimpeded, safety_violations, BenchSetup, Mode, Scenario,
};

const SHORT: &str = r#"
[scenario]
name = "short"
sim_time = 2.4

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

fn short() -> Scenario {
    parse_scenario(SHORT).unwrap().scenario
}

fn modes() -> [Mode; 4] {
    [
        Mode::AiMpc,
        Mode::NonAdaptive(WeightVector::uniform()),
        Mode::BaselineCv,
        Mode::BaselineCa,
    ]
}

#[test]
fn one_record_per_sample() {
    let sc = short().with_mode(Mode::BaselineCv);
    let log = run_scenario(&sc).unwrap();
    assert_eq!(log.records.len(), sc.steps() + 1);
    assert_eq!(log.solve_ms.len(), log.records.len());
    for (k, r) in log.records.iter().enumerate() {
        assert!((r.t - k as f64 * sc.ts()).abs() < 1e-12);
    }
}

#[test]
fn repeated_runs_match_bit_for_bit() {
    for mode in modes() {
        let sc = short().with_mode(mode);
        let a = run_scenario(&sc).unwrap();
        let b = run_scenario(&sc).unwrap();
        assert!(a.same_trajectory(&b), "{}", mode.label());
    }
}

#[test]
fn every_mode_keeps_its_distance() {
    for mode in modes() {
        let sc = short().with_mode(mode);
        let log = run_scenario(&sc).unwrap();
        let v = safety_violations(&log, &sc.planner.safety);
        assert!(v.is_empty(), "{}: {v:?}", mode.label());
    }
}

#[test]
fn imputed_weights_stay_on_the_simplex() {
    let sc = short().with_mode(Mode::AiMpc);
    let log = run_scenario(&sc).unwrap();
    for r in &log.records {
        let a = r.alpha.as_array();
        assert!(a.iter().all(|x| *x >= 0.0), "{a:?}");
        assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12, "{a:?}");
    }
}

#[test]
fn fixed_weight_modes_never_update_alpha() {
    let w = WeightVector::new(0.2, 0.5, 0.3);
    let sc = short().with_mode(Mode::NonAdaptive(w));
    let log = run_scenario(&sc).unwrap();
    assert!(log.records.iter().all(|r| r.alpha == w));
}

#[test]
fn csv_round_trip_is_lossless_at_six_digits() {
    let sc = short().with_mode(Mode::AiMpc);
    let log = run_scenario(&sc).unwrap();
    let rows = csv_rows(&log);
    let text = write_csv(&rows);
    let back = read_csv(&text).unwrap();
    assert_eq!(back.len(), rows.len());
    for (a, b) in rows.iter().zip(&back) {
        assert!(a.same(b), "{a:?} vs {b:?}");
    }
    assert_eq!(write_csv(&back), text);
}

#[test]
fn ego_free_run_has_no_hindrance_against_itself() {
    let sc = short().with_mode(Mode::BaselineCa);
    let unimpeded = run_unimpeded(&sc).unwrap();
    assert_eq!(unimpeded.len(), sc.steps() + 1);
    let log = run_scenario(&sc).unwrap();
    let m = compute_metrics(&log, &sc.planner.safety, Some(&unimpeded), false).unwrap();
    assert!(m.hindrance_pct.unwrap() >= -1e-9);
    assert!(m.mean_solve_ms.is_none() && m.max_solve_ms.is_none());
}

#[test]
fn speed_tracking_nature_is_recovered() {
    let bench = impute_bench(NvTrueWeights { q_s: 0.0, q_v: 1.0, q_a: 0.0 }, 5, &BenchSetup::default()).unwrap();
    assert_eq!(bench.alphas.len(), 5);
    assert!(bench.errors.iter().any(|e| *e <= 0.15), "{:?}", bench.errors);
}

#[test]
fn shipped_configs_load() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["scenario_a", "scenario_b", "scenario_c"] {
        let file = aimpc_core::io::load_scenario(&dir.join(format!("{name}.toml"))).unwrap();
        assert_eq!(file.scenario.name, name);
        assert_eq!(file.scenario.planner.horizon.n, 15);
        assert!((file.scenario.sim_time - 8.0).abs() < 1e-12);
    }
}
