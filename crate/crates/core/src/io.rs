//! Scenario files, trajectory CSV, metrics JSON and SVG plots.
//!
//! Config files are TOML with the sections `[scenario]`, `[ego]`, `[nv]`,
//! `[geometry]`, `[weights]`, `[solver]` and `[imputation]`. Keys carry the
//! names of the fields they set. `ego.v0_ego`, `nv.v0_nv` and the neighbor
//! weights `nv.q_s`, `nv.q_v`, `nv.q_a` are required; every other key falls
//! back to its default and the fallback is reported as a notice.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::imputation::{FitDynamics, WeightVector};
use crate::neighbor::NvTrueWeights;
use crate::sim::{ImputeBench, Metrics, Mode, Scenario, SimLog};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{0}")]
    Parse(String),
    #[error("missing required key `{key}` in [{section}]")]
    MissingKey { section: &'static str, key: &'static str },
    #[error("invalid value for `{key}`: {msg}")]
    Invalid { key: String, msg: String },
    #[error("malformed CSV at line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    File(#[from] std::io::Error),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioSection {
    name: Option<String>,
    mode: Option<String>,
    sim_time: Option<f64>,
    #[serde(rename = "Ts")]
    ts: Option<f64>,
    tau: Option<f64>,
    omega_n: Option<f64>,
    zeta: Option<f64>,
    #[serde(rename = "K")]
    k: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EgoSection {
    v0_ego: Option<f64>,
    s0_ego: Option<f64>,
    v_ref_ego: Option<f64>,
    #[serde(rename = "N")]
    n: Option<usize>,
    u_a_min: Option<f64>,
    m1: Option<f64>,
    b1: Option<f64>,
    m2: Option<f64>,
    b2: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NvSection {
    v0_nv: Option<f64>,
    s0_nv: Option<f64>,
    v_ref_nv: Option<f64>,
    q_s: Option<f64>,
    q_v: Option<f64>,
    q_a: Option<f64>,
    horizon: Option<usize>,
    a: Option<f64>,
    b: Option<f64>,
    lane: Option<f64>,
    control_reg: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometrySection {
    #[serde(rename = "L")]
    vehicle_length: Option<f64>,
    gap: Option<f64>,
    #[serde(rename = "M")]
    big_m: Option<f64>,
    s_ramp_start: Option<f64>,
    s_ramp_end: Option<f64>,
    l_enc: Option<f64>,
    l_merged: Option<f64>,
    lane_big_m: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsSection {
    q_s: Option<f64>,
    q_v: Option<f64>,
    q_a: Option<f64>,
    q_l: Option<f64>,
    q_ua: Option<f64>,
    alpha0: Option<WeightVector>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverSection {
    node_limit: Option<usize>,
    monotone_logic: Option<bool>,
    logic_penalty: Option<f64>,
    recovery_weight: Option<f64>,
    recovery_gap: Option<f64>,
    recovery_node_limit: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImputationSection {
    r: Option<usize>,
    regularization: Option<f64>,
    dynamics: Option<FitDynamics>,
    inactive_slack: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    scenario: ScenarioSection,
    #[serde(default)]
    ego: EgoSection,
    #[serde(default)]
    nv: NvSection,
    #[serde(default)]
    geometry: GeometrySection,
    #[serde(default)]
    weights: WeightsSection,
    #[serde(default)]
    solver: SolverSection,
    #[serde(default)]
    imputation: ImputationSection,
}

/// A parsed scenario file.
#[derive(Debug, Clone)]
pub struct ScenarioFile {
    pub scenario: Scenario,
    /// Mode named in the file, if any.
    pub mode: Option<Mode>,
    /// One line per key that fell back to its default.
    pub notices: Vec<String>,
}

/// Applies `value` to `slot`, or records that the default was kept.
fn set<T: std::fmt::Debug>(slot: &mut T, value: Option<T>, section: &str, key: &str, notices: &mut Vec<String>) {
    match value {
        Some(v) => *slot = v,
        None => notices.push(format!("[{section}] {key} not set, using {slot:?}")),
    }
}

fn required(value: Option<f64>, section: &'static str, key: &'static str) -> Result<f64, IoError> {
    value.ok_or(IoError::MissingKey { section, key })
}

/// Parses a mode label; `nonadaptive` holds `alpha` fixed.
pub fn parse_mode(label: &str, alpha: WeightVector) -> Result<Mode, IoError> {
    match label {
        "aimpc" => Ok(Mode::AiMpc),
        "nonadaptive" => Ok(Mode::NonAdaptive(alpha)),
        "cv" => Ok(Mode::BaselineCv),
        "ca" => Ok(Mode::BaselineCa),
        other => Err(IoError::Invalid {
            key: "mode".into(),
            msg: format!("unknown mode `{other}` (expected aimpc, nonadaptive, cv or ca)"),
        }),
    }
}

pub fn parse_scenario(text: &str) -> Result<ScenarioFile, IoError> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| IoError::Parse(e.to_string()))?;
    let mut notes = Vec::new();
    let n = &mut notes;

    let nature = NvTrueWeights {
        q_s: required(file.nv.q_s, "nv", "q_s")?,
        q_v: required(file.nv.q_v, "nv", "q_v")?,
        q_a: required(file.nv.q_a, "nv", "q_a")?,
    };
    let v0_ego = required(file.ego.v0_ego, "ego", "v0_ego")?;
    let v0_nv = required(file.nv.v0_nv, "nv", "v0_nv")?;
    let mut sc = Scenario::new("scenario", nature, v0_ego, v0_nv);

    let f = file.scenario;
    set(&mut sc.name, f.name, "scenario", "name", n);
    set(&mut sc.sim_time, f.sim_time, "scenario", "sim_time", n);
    set(&mut sc.planner.horizon.ts, f.ts, "scenario", "Ts", n);
    set(&mut sc.model.tau, f.tau, "scenario", "tau", n);
    set(&mut sc.model.omega_n, f.omega_n, "scenario", "omega_n", n);
    set(&mut sc.model.zeta, f.zeta, "scenario", "zeta", n);
    set(&mut sc.model.k, f.k, "scenario", "K", n);

    let e = file.ego;
    set(&mut sc.s0_ego, e.s0_ego, "ego", "s0_ego", n);
    set(&mut sc.v_ref_ego, e.v_ref_ego, "ego", "v_ref_ego", n);
    set(&mut sc.planner.horizon.n, e.n, "ego", "N", n);
    let adm = &mut sc.planner.admissibility;
    set(&mut adm.u_a_min, e.u_a_min, "ego", "u_a_min", n);
    set(&mut adm.m1, e.m1, "ego", "m1", n);
    set(&mut adm.b1, e.b1, "ego", "b1", n);
    set(&mut adm.m2, e.m2, "ego", "m2", n);
    set(&mut adm.b2, e.b2, "ego", "b2", n);
    sc.nv_mpc.admissibility = sc.planner.admissibility;

    let v = file.nv;
    set(&mut sc.s0_nv, v.s0_nv, "nv", "s0_nv", n);
    set(&mut sc.v_ref_nv, v.v_ref_nv, "nv", "v_ref_nv", n);
    set(&mut sc.nv_mpc.horizon, v.horizon, "nv", "horizon", n);
    set(&mut sc.nv_mpc.ellipse.a, v.a, "nv", "a", n);
    set(&mut sc.nv_mpc.ellipse.b, v.b, "nv", "b", n);
    set(&mut sc.nv_mpc.lane, v.lane, "nv", "lane", n);
    set(&mut sc.nv_mpc.control_reg, v.control_reg, "nv", "control_reg", n);

    let g = file.geometry;
    let s = &mut sc.planner.safety;
    set(&mut s.vehicle_length, g.vehicle_length, "geometry", "L", n);
    set(&mut s.gap, g.gap, "geometry", "gap", n);
    set(&mut s.big_m, g.big_m, "geometry", "M", n);
    set(&mut s.s_ramp_start, g.s_ramp_start, "geometry", "s_ramp_start", n);
    set(&mut s.s_ramp_end, g.s_ramp_end, "geometry", "s_ramp_end", n);
    set(&mut s.l_enc, g.l_enc, "geometry", "l_enc", n);
    set(&mut s.l_merged, g.l_merged, "geometry", "l_merged", n);
    set(&mut s.lane_big_m, g.lane_big_m, "geometry", "lane_big_m", n);

    let w = file.weights;
    let ew = &mut sc.planner.ego_weights;
    set(&mut ew.q_s, w.q_s, "weights", "q_s", n);
    set(&mut ew.q_v, w.q_v, "weights", "q_v", n);
    set(&mut ew.q_a, w.q_a, "weights", "q_a", n);
    set(&mut ew.q_l, w.q_l, "weights", "q_l", n);
    set(&mut ew.q_ua, w.q_ua, "weights", "q_ua", n);
    set(&mut sc.alpha0, w.alpha0, "weights", "alpha0", n);

    let o = file.solver;
    let p = &mut sc.planner;
    set(&mut p.node_limit, o.node_limit, "solver", "node_limit", n);
    set(&mut p.monotone_logic, o.monotone_logic, "solver", "monotone_logic", n);
    set(&mut p.logic_penalty, o.logic_penalty, "solver", "logic_penalty", n);
    set(&mut p.recovery_weight, o.recovery_weight, "solver", "recovery_weight", n);
    set(&mut p.recovery_gap, o.recovery_gap, "solver", "recovery_gap", n);
    set(&mut p.recovery_node_limit, o.recovery_node_limit, "solver", "recovery_node_limit", n);

    let i = file.imputation;
    let imp = &mut sc.imputation;
    set(&mut imp.r, i.r, "imputation", "r", n);
    set(&mut imp.regularization, i.regularization, "imputation", "regularization", n);
    set(&mut imp.dynamics, i.dynamics, "imputation", "dynamics", n);
    set(&mut imp.inactive_slack, i.inactive_slack, "imputation", "inactive_slack", n);

    let mode = f.mode.as_deref().map(|m| parse_mode(m, sc.alpha0)).transpose()?;
    if let Some(m) = &mode {
        sc.mode = *m;
    }
    sc.validate().map_err(|e| IoError::Invalid {
        key: "scenario".into(),
        msg: e.to_string(),
    })?;
    Ok(ScenarioFile {
        scenario: sc,
        mode,
        notices: notes,
    })
}

pub fn load_scenario(path: &Path) -> Result<ScenarioFile, IoError> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text)
}

/// Rounds to six significant digits.
pub fn round6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

fn fmt6(x: f64) -> String {
    let r = round6(x);
    if r == 0.0 {
        // Drops the sign of negative zero.
        "0".into()
    } else {
        format!("{r}")
    }
}

pub const CSV_HEADER: &str =
    "t,s_ego,v_ego,a_ego,l_ego,rl_ego,ua_ego,ul_ego,s_nv,v_nv,a_nv,u_nv,alpha_s,alpha_v,alpha_a,mu,beta,obj,nodes";

/// One trajectory row at file precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub t: f64,
    pub s_ego: f64,
    pub v_ego: f64,
    pub a_ego: f64,
    pub l_ego: f64,
    pub rl_ego: f64,
    pub ua_ego: f64,
    pub ul_ego: i32,
    pub s_nv: f64,
    pub v_nv: f64,
    pub a_nv: f64,
    pub u_nv: f64,
    pub alpha_s: f64,
    pub alpha_v: f64,
    pub alpha_a: f64,
    pub mu: u8,
    pub beta: u8,
    pub obj: f64,
    pub nodes: usize,
}

impl CsvRow {
    fn floats(&self) -> [f64; 15] {
        [
            self.t, self.s_ego, self.v_ego, self.a_ego, self.l_ego, self.rl_ego, self.ua_ego, self.s_nv,
            self.v_nv, self.a_nv, self.u_nv, self.alpha_s, self.alpha_v, self.alpha_a, self.obj,
        ]
    }

    fn rounded(mut self) -> Self {
        let r = self.floats().map(round6);
        [
            self.t, self.s_ego, self.v_ego, self.a_ego, self.l_ego, self.rl_ego, self.ua_ego, self.s_nv,
            self.v_nv, self.a_nv, self.u_nv, self.alpha_s, self.alpha_v, self.alpha_a, self.obj,
        ] = r;
        self
    }

    /// Equality that treats two NaN objectives as equal.
    pub fn same(&self, other: &Self) -> bool {
        let f = self.floats().iter().zip(other.floats()).all(|(a, b)| a == &b || (a.is_nan() && b.is_nan()));
        f && (self.ul_ego, self.mu, self.beta, self.nodes) == (other.ul_ego, other.mu, other.beta, other.nodes)
    }
}

/// Log rows rounded to file precision.
pub fn csv_rows(log: &SimLog) -> Vec<CsvRow> {
    log.records
        .iter()
        .map(|r| {
            CsvRow {
                t: r.t,
                s_ego: r.ego.s,
                v_ego: r.ego.v,
                a_ego: r.ego.a,
                l_ego: r.ego.l,
                rl_ego: r.ego.r_l,
                ua_ego: r.ego_control.u_a,
                ul_ego: r.ego_control.u_l,
                s_nv: r.nv.s,
                v_nv: r.nv.v,
                a_nv: r.nv.a,
                u_nv: r.nv_control,
                alpha_s: r.alpha.alpha_s,
                alpha_v: r.alpha.alpha_v,
                alpha_a: r.alpha.alpha_a,
                mu: r.binaries.mu,
                beta: r.binaries.beta,
                obj: r.objective,
                nodes: r.nodes,
            }
            .rounded()
        })
        .collect()
}

pub fn write_csv(rows: &[CsvRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let f = |x: f64| fmt6(x);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            f(r.t),
            f(r.s_ego),
            f(r.v_ego),
            f(r.a_ego),
            f(r.l_ego),
            f(r.rl_ego),
            f(r.ua_ego),
            r.ul_ego,
            f(r.s_nv),
            f(r.v_nv),
            f(r.a_nv),
            f(r.u_nv),
            f(r.alpha_s),
            f(r.alpha_v),
            f(r.alpha_a),
            r.mu,
            r.beta,
            f(r.obj),
            r.nodes
        );
    }
    out
}

pub fn read_csv(text: &str) -> Result<Vec<CsvRow>, IoError> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| IoError::Csv { line: 1, msg: e.to_string() })?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != CSV_HEADER {
        return Err(IoError::Csv {
            line: 1,
            msg: format!("unexpected header `{header}`"),
        });
    }
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| IoError::Csv { line: i + 2, msg: e.to_string() }))
        .collect()
}

/// Metrics as a JSON object in field order.
pub fn metrics_json(m: &Metrics) -> String {
    let mut s = serde_json::to_string_pretty(m).expect("metrics serialize");
    s.push('\n');
    s
}

/// Per-mode metrics plus orderings by hindrance and jerk, lowest first.
pub fn comparison_json(scenario: &str, runs: &[(String, Metrics)]) -> String {
    let mut modes = Map::new();
    for (label, m) in runs {
        modes.insert(label.clone(), serde_json::to_value(m).expect("metrics serialize"));
    }
    let order_by = |key: fn(&Metrics) -> Option<f64>| {
        let mut v: Vec<(&str, f64)> = runs.iter().filter_map(|(l, m)| key(m).map(|x| (l.as_str(), x))).collect();
        v.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
        v.into_iter().map(|(l, _)| Value::from(l)).collect::<Vec<_>>()
    };
    let lower = |a: Option<f64>, b: Option<f64>, la: &str, lb: &str| match (a, b) {
        (Some(x), Some(y)) if x < y => Value::from(la),
        (Some(x), Some(y)) if y < x => Value::from(lb),
        (Some(_), Some(_)) => Value::from("tie"),
        _ => Value::Null,
    };
    let mut pairwise = Vec::new();
    for (i, (la, ma)) in runs.iter().enumerate() {
        for (lb, mb) in &runs[i + 1..] {
            pairwise.push(json!({
                "a": la,
                "b": lb,
                "lower_hindrance": lower(ma.hindrance_pct, mb.hindrance_pct, la, lb),
                "lower_rms_jerk": lower(Some(ma.rms_jerk), Some(mb.rms_jerk), la, lb),
            }));
        }
    }
    let doc = json!({
        "scenario": scenario,
        "modes": modes,
        "orderings": {
            "hindrance_pct": order_by(|m| m.hindrance_pct),
            "rms_jerk": order_by(|m| Some(m.rms_jerk)),
        },
        "pairwise": pairwise,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("comparison serialize");
    s.push('\n');
    s
}

pub const BENCH_HEADER: &str = "window,alpha_s,alpha_v,alpha_a,error";

pub fn bench_csv(bench: &ImputeBench) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for (k, (a, e)) in bench.alphas.iter().zip(&bench.errors).enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            k + 1,
            fmt6(a.alpha_s),
            fmt6(a.alpha_v),
            fmt6(a.alpha_a),
            fmt6(*e)
        );
    }
    out
}

pub fn bench_summary_json(bench: &ImputeBench, tol: f64) -> String {
    let doc = json!({
        "nature": bench.nature,
        "windows": bench.alphas.len(),
        "final_alpha": bench.alphas.last(),
        "final_error": bench.final_error(),
        "tolerance": tol,
        "converged": bench.converged(tol),
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("summary serialize");
    s.push('\n');
    s
}

/// Writes through a temporary file in the same directory and renames it.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), IoError> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Plot kinds emitted for every run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Position,
    Lateral,
    Alpha,
}

impl PlotKind {
    pub const ALL: [PlotKind; 3] = [PlotKind::Position, PlotKind::Lateral, PlotKind::Alpha];

    pub fn file_name(&self) -> &'static str {
        match self {
            PlotKind::Position => "position.svg",
            PlotKind::Lateral => "lateral.svg",
            PlotKind::Alpha => "alpha.svg",
        }
    }
}

const COLORS: [&str; 3] = ["#1f4fd1", "#c8261b", "#2a8a2a"];

/// Renders one plot from CSV text.
pub fn plot_from_csv(csv_text: &str, kind: PlotKind) -> Result<String, IoError> {
    let rows = read_csv(csv_text)?;
    let t: Vec<f64> = rows.iter().map(|r| r.t).collect();
    let (title, y_label, series): (&str, &str, Vec<(&str, Vec<f64>)>) = match kind {
        PlotKind::Position => (
            "Longitudinal position",
            "s [m]",
            vec![
                ("ego", rows.iter().map(|r| r.s_ego).collect()),
                ("neighbor", rows.iter().map(|r| r.s_nv).collect()),
            ],
        ),
        PlotKind::Lateral => (
            "Ego lateral position",
            "l [lane]",
            vec![("ego", rows.iter().map(|r| r.l_ego).collect())],
        ),
        PlotKind::Alpha => (
            "Imputed neighbor weights",
            "alpha",
            vec![
                ("alpha_s", rows.iter().map(|r| r.alpha_s).collect()),
                ("alpha_v", rows.iter().map(|r| r.alpha_v).collect()),
                ("alpha_a", rows.iter().map(|r| r.alpha_a).collect()),
            ],
        ),
    };
    Ok(line_plot(title, y_label, &t, &series))
}

fn line_plot(title: &str, y_label: &str, x: &[f64], series: &[(&str, Vec<f64>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 50.0;
    let finite = |v: &[f64]| v.iter().copied().filter(|x| x.is_finite()).collect::<Vec<_>>();
    let xs = finite(x);
    let ys: Vec<f64> = series.iter().flat_map(|(_, v)| finite(v)).collect();
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        match (lo.is_finite(), hi > lo) {
            (true, true) => (lo, hi),
            (true, false) => (lo - 0.5, lo + 0.5),
            _ => (0.0, 1.0),
        }
    };
    let (x0, x1) = range(&xs);
    let (y0, y1) = range(&ys);
    let px = |v: f64| LEFT + (v - x0) / (x1 - x0) * (W - LEFT - RIGHT);
    let py = |v: f64| H - BOTTOM - (v - y0) / (y1 - y0) * (H - TOP - BOTTOM);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - LEFT - RIGHT,
        H - TOP - BOTTOM
    );
    for k in 0..=4 {
        let f = f64::from(k) / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(xv),
            H - BOTTOM + 16.0,
            fmt6(round3(xv))
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            py(yv) + 4.0,
            fmt6(round3(yv))
        );
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#dddddd"/>"##,
            W - RIGHT,
            py(yv),
            py(yv)
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">t [s]</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{y_label}</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (k, (name, v)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = x
            .iter()
            .zip(v)
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|(a, b)| format!("{:.2},{:.2}", px(*a), py(*b)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = TOP + 16.0 + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" x2="{:.1}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{name}</text>"#,
            LEFT + 10.0,
            LEFT + 30.0,
            LEFT + 36.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}
