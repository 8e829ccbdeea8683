//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any of them fails.

use std::path::PathBuf;
use std::time::Instant;

use aimpc_core::dynamics::{ego_continuous, nv_continuous, ModelParams, VehicleModels};
use aimpc_core::imputation::WeightVector;
use aimpc_core::io::{csv_rows, load_scenario, metrics_json, write_csv};
use aimpc_core::miqp::{solve_miqp, MiqpStatus};
use aimpc_core::neighbor::NvTrueWeights;
use aimpc_core::qp::{kkt_residuals, solve_qp, QpStatus};
use aimpc_core::sim::{
    compute_metrics, impute_bench, run_scenario, run_unimpeded, safety_violations, BenchSetup, MergeOutcome, Metrics,
    Mode, Scenario, SimLog,
};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Run {
    scenario: String,
    mode: Mode,
    log: SimLog,
    metrics: Metrics,
    wall_s: f64,
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn load(name: &str) -> Scenario {
    load_scenario(&config_path(name))
        .unwrap_or_else(|e| panic!("{name}: {e}"))
        .scenario
}

fn execute(sc: &Scenario, mode: Mode) -> Run {
    let sc = sc.clone().with_mode(mode);
    let unimpeded = run_unimpeded(&sc).expect("ego-free run");
    let start = Instant::now();
    let log = run_scenario(&sc).expect("scenario run");
    let wall_s = start.elapsed().as_secs_f64();
    let metrics = compute_metrics(&log, &sc.planner.safety, Some(&unimpeded), true).expect("metrics");
    Run {
        scenario: sc.name.clone(),
        mode,
        log,
        metrics,
        wall_s,
    }
}

fn find<'a>(runs: &'a [Run], scenario: &str, label: &str) -> &'a Run {
    runs.iter()
        .find(|r| r.scenario == scenario && r.mode.label() == label)
        .unwrap_or_else(|| panic!("no run {scenario}/{label}"))
}

fn describe(r: &Run) -> String {
    format!(
        "{} {:?} hindrance {}",
        r.mode.label(),
        r.metrics.merge_outcome,
        r.metrics.hindrance_pct.map_or("n/a".into(), |h| format!("{h:.2}%"))
    )
}

fn solvers() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE);
    let mut qp_ok = 0;
    let mut first_bad = None;
    for case in 0..200 {
        let inst = random_instance(&mut rng);
        let p = &inst.problem;
        let oracle = qp_enumeration(&p.h, &p.f, &p.a_eq, &p.b_eq, &inst.g_rows, &inst.g_rhs);
        let ok = match (oracle, solve_qp(p, None)) {
            (None, Ok(sol)) => sol.status == QpStatus::Infeasible,
            (Some(best), Ok(sol)) => {
                sol.status == QpStatus::Optimal
                    && (sol.objective - best).abs() <= 1e-6 * (1.0 + best.abs())
                    && kkt_residuals(p, &sol).max() <= 1e-6
            }
            (_, Err(_)) => false,
        };
        if ok {
            qp_ok += 1;
        } else if first_bad.is_none() {
            first_bad = Some(format!("qp case {case}"));
        }
    }
    let mut miqp_ok = 0;
    for case in 0..200 {
        let p = random_miqp(&mut rng);
        let oracle = miqp_enumeration(&p, &integer_box(&p));
        let ok = match (oracle, solve_miqp(&p, None, 20_000)) {
            (None, Ok(sol)) => sol.status == MiqpStatus::Infeasible,
            (Some(best), Ok(sol)) => {
                sol.status == MiqpStatus::Optimal && (sol.objective - best).abs() <= 1e-6 * (1.0 + best.abs())
            }
            (_, Err(_)) => false,
        };
        if ok {
            miqp_ok += 1;
        } else if first_bad.is_none() {
            first_bad = Some(format!("miqp case {case}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        qp_ok == 200 && miqp_ok == 200 && secs < 60.0,
        format!(
            "qp {qp_ok}/200, miqp {miqp_ok}/200, {secs:.1} s{}",
            first_bad.map_or(String::new(), |b| format!(", first mismatch {b}"))
        ),
    )
}

/// Transition and input matrices over `ts` by RK4 on the matrix ODE
/// `Phi' = A Phi`, `Gamma' = A Gamma + B`.
fn integrate(a: &DMatrix<f64>, b: &DMatrix<f64>, ts: f64, steps: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let deriv = |phi: &DMatrix<f64>, gam: &DMatrix<f64>| (a * phi, a * gam + b);
    let mut phi = DMatrix::<f64>::identity(n, n);
    let mut gam = DMatrix::<f64>::zeros(n, b.ncols());
    let h = ts / steps as f64;
    for _ in 0..steps {
        let (k1p, k1g) = deriv(&phi, &gam);
        let (k2p, k2g) = deriv(&(&phi + &k1p * (h / 2.0)), &(&gam + &k1g * (h / 2.0)));
        let (k3p, k3g) = deriv(&(&phi + &k2p * (h / 2.0)), &(&gam + &k2g * (h / 2.0)));
        let (k4p, k4g) = deriv(&(&phi + &k3p * h), &(&gam + &k3g * h));
        phi += (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
        gam += (k1g + k2g * 2.0 + k3g * 2.0 + k4g) * (h / 6.0);
    }
    (phi, gam)
}

fn discretization() -> Verdict {
    let params = ModelParams::default();
    let ts = 0.4;
    let models = VehicleModels::new(params, ts).expect("models");
    let max_diff = |x: &DMatrix<f64>, y: &DMatrix<f64>| (x - y).abs().max();
    let (a, b) = ego_continuous(&params);
    let (phi, gam) = integrate(&a, &b, ts, 4000);
    let ego = max_diff(&phi, &models.ego.a_d).max(max_diff(&gam, &models.ego.b_d));
    let (a, b) = nv_continuous(params.tau);
    let (phi, gam) = integrate(&a, &b, ts, 4000);
    let nv = max_diff(&phi, &models.nv.a_d).max(max_diff(&gam, &models.nv.b_d));
    Verdict::new(
        ego <= 1e-6 && nv <= 1e-6,
        format!("max entry difference ego {ego:.2e}, neighbor {nv:.2e}"),
    )
}

fn scenario_a(runs: &[Run]) -> Verdict {
    let cv = find(runs, "scenario_a", "cv");
    let ca = find(runs, "scenario_a", "ca");
    let ai = find(runs, "scenario_a", "aimpc");
    let within_8s = ai.metrics.merge_time_s.is_some_and(|t| t <= 8.0);
    let h = |r: &Run| r.metrics.hindrance_pct.unwrap_or(f64::NAN);
    let ordered = h(ai) + 5.0 <= h(cv) && h(ai) + 5.0 <= h(ca);
    let pass = cv.metrics.merge_outcome == MergeOutcome::Failed
        && ca.metrics.merge_outcome == MergeOutcome::Failed
        && ai.metrics.merge_outcome == MergeOutcome::MergedBehind
        && within_8s
        && ordered;
    Verdict::new(pass, format!("{}; {}; {}", describe(cv), describe(ca), describe(ai)))
}

fn scenario_b(runs: &[Run]) -> Verdict {
    let na = find(runs, "scenario_b", "nonadaptive");
    let ai = find(runs, "scenario_b", "aimpc");
    let pass = na.metrics.merge_outcome == MergeOutcome::MergedAhead
        && ai.metrics.merge_outcome == MergeOutcome::MergedAhead
        && ai.metrics.rms_jerk < na.metrics.rms_jerk;
    Verdict::new(
        pass,
        format!(
            "{} jerk {:.3}; {} jerk {:.3}",
            describe(na),
            na.metrics.rms_jerk,
            describe(ai),
            ai.metrics.rms_jerk
        ),
    )
}

fn scenario_c(runs: &[Run]) -> Verdict {
    let na = find(runs, "scenario_c", "nonadaptive");
    let ai = find(runs, "scenario_c", "aimpc");
    let pass =
        na.metrics.merge_outcome == MergeOutcome::Failed && ai.metrics.merge_outcome == MergeOutcome::MergedBehind;
    Verdict::new(pass, format!("{}; {}", describe(na), describe(ai)))
}

fn on_simplex_exactly(w: &WeightVector) -> bool {
    let a = w.as_array();
    a.iter().all(|x| *x >= 0.0) && (a.iter().sum::<f64>() - 1.0).abs() <= 1e-12
}

fn imputation(runs: &[Run]) -> Verdict {
    let mut pass = true;
    let mut details = Vec::new();
    for (q_s, q_v, q_a) in [(0.0, 1.0, 0.0), (0.0, 0.0, 1.0)] {
        match impute_bench(NvTrueWeights { q_s, q_v, q_a }, 5, &BenchSetup::default()) {
            Ok(bench) => {
                let best = bench.errors.iter().copied().fold(f64::INFINITY, f64::min);
                let simplex = bench.alphas.iter().all(on_simplex_exactly);
                pass &= best <= 0.15 && simplex;
                details.push(format!(
                    "({q_s},{q_v},{q_a}) errors [{}]{}",
                    bench.errors.iter().map(|e| format!("{e:.3}")).collect::<Vec<_>>().join(", "),
                    if simplex { "" } else { " off simplex" }
                ));
            }
            Err(e) => {
                pass = false;
                details.push(format!("({q_s},{q_v},{q_a}) error: {e}"));
            }
        }
    }
    let closed_loop = runs
        .iter()
        .filter(|r| r.mode == Mode::AiMpc)
        .all(|r| r.log.records.iter().all(|rec| on_simplex_exactly(&rec.alpha)));
    pass &= closed_loop;
    if !closed_loop {
        details.push("closed-loop estimate off simplex".into());
    }
    Verdict::new(pass, details.join("; "))
}

fn safety(runs: &[Run], configs: &[(&str, Scenario)]) -> Verdict {
    let mut checked = 0;
    let mut bad = Vec::new();
    for r in runs.iter().filter(|r| r.metrics.merge_outcome != MergeOutcome::Failed) {
        let sc = &configs.iter().find(|(n, _)| *n == r.scenario).expect("config").1;
        checked += 1;
        let v = safety_violations(&r.log, &sc.planner.safety);
        if let Some(first) = v.first() {
            bad.push(format!("{}/{}: {first}", r.scenario, r.mode.label()));
        }
    }
    Verdict::new(
        bad.is_empty(),
        format!("{checked} merged runs checked{}", if bad.is_empty() { String::new() } else { format!("; {}", bad.join("; ")) }),
    )
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    if s.is_empty() {
        return f64::NAN;
    }
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

fn performance(runs: &[Run]) -> Verdict {
    let mut pass = true;
    let mut details = Vec::new();
    for r in runs.iter().filter(|r| r.mode == Mode::AiMpc) {
        let med = median(&r.log.solve_ms);
        pass &= med <= 2000.0 && r.wall_s <= 60.0;
        details.push(format!("{}: median step {med:.0} ms, run {:.1} s", r.scenario, r.wall_s));
    }
    Verdict::new(pass && !details.is_empty(), details.join("; "))
}

fn artifacts(sc: &Scenario, log: &SimLog) -> (String, String) {
    let unimpeded = run_unimpeded(sc).expect("ego-free run");
    let m = compute_metrics(log, &sc.planner.safety, Some(&unimpeded), false).expect("metrics");
    (write_csv(&csv_rows(log)), metrics_json(&m))
}

fn determinism(sc: &Scenario, first: &Run) -> Verdict {
    let sc = sc.clone().with_mode(first.mode);
    let again = run_scenario(&sc).expect("scenario run");
    let (csv_a, json_a) = artifacts(&sc, &first.log);
    let (csv_b, json_b) = artifacts(&sc, &again);
    Verdict::new(
        csv_a == csv_b && json_a == json_b,
        format!(
            "{}/{}: csv {}, json {}",
            first.scenario,
            first.mode.label(),
            if csv_a == csv_b { "identical" } else { "differs" },
            if json_a == json_b { "identical" } else { "differs" }
        ),
    )
}

fn main() {
    let configs: Vec<(&str, Scenario)> = ["scenario_a", "scenario_b", "scenario_c"]
        .into_iter()
        .map(|n| (n, load(&format!("{n}.toml"))))
        .collect();
    let mut runs = Vec::new();
    for (name, sc) in &configs {
        assert_eq!(sc.name, *name, "config name field");
        for mode in [
            Mode::AiMpc,
            Mode::NonAdaptive(WeightVector::uniform()),
            Mode::BaselineCv,
            Mode::BaselineCa,
        ] {
            runs.push(execute(sc, mode));
        }
    }

    let verdicts = [
        ("solver correctness", solvers()),
        ("discretization", discretization()),
        ("scenario A", scenario_a(&runs)),
        ("scenario B", scenario_b(&runs)),
        ("scenario C", scenario_c(&runs)),
        ("imputation recovery", imputation(&runs)),
        ("closed-loop safety", safety(&runs, &configs)),
        ("performance", performance(&runs)),
        ("determinism", determinism(&configs[0].1, find(&runs, "scenario_a", "aimpc"))),
    ];
    let mut failed = 0;
    for (i, (name, v)) in verdicts.iter().enumerate() {
        println!(
            "criterion {} ({name}): {} - {}",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", verdicts.len());
        std::process::exit(1);
    }
}
