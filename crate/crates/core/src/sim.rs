//! Closed-loop merging scenarios: imputation, ego planning, neighbor control
//! and plant updates per step, plus the metrics computed from the log.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    DynamicsError, EgoControl, EgoState, ModelParams, NvControl, NvState, VehicleModels,
};
use crate::imputation::{impute_weights, ImputationConfig, TrajectoryWindow, WeightVector};
use crate::miqp::MiqpStatus;
use crate::neighbor::{NeighborError, NvController, NvMpcConfig, NvReference, NvTrueWeights};
use crate::planner::{
    baseline_predict, check_initial, BaselineMode, JointPlanner, NvModel, PlanResult, PlannerConfig,
    PlannerError, ReferenceSignal, SafetyConfig, StepBinaries,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("non-finite plant state at t = {t} s")]
    NonFinite { t: f64 },
    #[error("planner failed at t = {t} s: {source}")]
    Planner { t: f64, source: PlannerError },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Neighbor(#[from] NeighborError),
    #[error("logs are on different time grids")]
    GridMismatch,
}

/// How the ego predicts the neighbor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Mode {
    /// Joint planning with weights imputed online.
    AiMpc,
    /// Joint planning with fixed weights.
    NonAdaptive(WeightVector),
    BaselineCv,
    BaselineCa,
}

impl Mode {
    pub fn label(&self) -> &'static str {
        match self {
            Mode::AiMpc => "aimpc",
            Mode::NonAdaptive(_) => "nonadaptive",
            Mode::BaselineCv => "cv",
            Mode::BaselineCa => "ca",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub mode: Mode,
    pub nv_true_weights: NvTrueWeights,
    pub v0_ego: f64,
    pub v0_nv: f64,
    pub s0_ego: f64,
    pub s0_nv: f64,
    pub v_ref_ego: f64,
    pub v_ref_nv: f64,
    /// Simulated duration [s]; a whole number of sampling periods.
    pub sim_time: f64,
    /// Weights used before the first imputation window is complete.
    pub alpha0: WeightVector,
    pub model: ModelParams,
    pub planner: PlannerConfig,
    pub nv_mpc: NvMpcConfig,
    pub imputation: ImputationConfig,
}

impl Scenario {
    /// Default configuration with both vehicles at the origin holding their
    /// initial speeds as references.
    pub fn new(name: &str, nv_true_weights: NvTrueWeights, v0_ego: f64, v0_nv: f64) -> Self {
        Self {
            name: name.to_string(),
            mode: Mode::AiMpc,
            nv_true_weights,
            v0_ego,
            v0_nv,
            s0_ego: 0.0,
            s0_nv: 0.0,
            v_ref_ego: v0_ego,
            v_ref_nv: v0_nv,
            sim_time: 8.0,
            alpha0: WeightVector::uniform(),
            model: ModelParams::default(),
            planner: PlannerConfig::default(),
            nv_mpc: NvMpcConfig::default(),
            imputation: ImputationConfig::default(),
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn ts(&self) -> f64 {
        self.planner.horizon.ts
    }

    /// Number of plant updates.
    pub fn steps(&self) -> usize {
        (self.sim_time / self.ts()).round() as usize
    }

    pub fn initial_ego(&self) -> EgoState {
        EgoState {
            s: self.s0_ego,
            v: self.v0_ego,
            ..EgoState::default()
        }
    }

    pub fn initial_nv(&self) -> NvState {
        NvState {
            s: self.s0_nv,
            v: self.v0_nv,
            a: 0.0,
        }
    }

    pub fn nv_reference(&self, t: f64) -> NvReference {
        NvReference {
            s_ref: self.s0_nv + self.v_ref_nv * t,
            v_ref: self.v_ref_nv,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        let ts = self.ts();
        if !(self.sim_time > 0.0) || ((self.sim_time / ts).round() * ts - self.sim_time).abs() > 1e-9 {
            return bad(format!("sim_time {} must be a positive multiple of Ts = {ts}", self.sim_time));
        }
        for (k, v) in [
            ("v0_ego", self.v0_ego),
            ("v0_nv", self.v0_nv),
            ("v_ref_ego", self.v_ref_ego),
            ("v_ref_nv", self.v_ref_nv),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{k} = {v} must be finite and nonnegative"));
            }
        }
        if !self.s0_ego.is_finite() || !self.s0_nv.is_finite() {
            return bad("initial positions must be finite".into());
        }
        let alpha_ok = |a: &WeightVector| a.is_on_simplex(1e-9);
        if !alpha_ok(&self.alpha0) {
            return bad(format!("alpha0 {:?} is not on the simplex", self.alpha0.as_array()));
        }
        if let Mode::NonAdaptive(a) = &self.mode {
            if !alpha_ok(a) {
                return bad(format!("fixed alpha {:?} is not on the simplex", a.as_array()));
            }
        }
        if self.imputation.r == 0 {
            return bad("imputation window r must be >= 1".into());
        }
        self.model.validate()?;
        self.nv_true_weights.validate()?;
        let v_max = self.v0_ego.max(self.v0_nv).max(self.v_ref_ego).max(self.v_ref_nv);
        self.planner.admissibility.validate(v_max)?;
        self.nv_mpc.admissibility.validate(v_max)?;
        self.nv_mpc.ellipse.validate(self.planner.safety.vehicle_length)?;
        let p = &self.planner;
        p.safety
            .validate()
            .and_then(|_| p.ego_weights.validate())
            .and_then(|_| check_initial(&self.initial_ego(), &self.initial_nv(), p))
            .map_err(|e| SimError::InvalidScenario(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlannerOutcome {
    Optimal,
    /// Node limit hit; the incumbent was applied.
    NodeLimit,
    /// The hard problem had no solution; the slack-penalized plan was applied.
    Recovery,
    /// No plan this step; the previous plan's continuation or braking was applied.
    Fallback,
}

/// One row of the closed-loop log: states at `t` and the commands applied from `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub ego: EgoState,
    pub nv: NvState,
    pub ego_control: EgoControl,
    pub nv_control: f64,
    pub alpha: WeightVector,
    /// Logic flags acting on the first predicted state.
    pub binaries: StepBinaries,
    /// Plan objective; NaN on fallback steps.
    pub objective: f64,
    pub nodes: usize,
    pub planner: PlannerOutcome,
    pub nv_fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub name: String,
    pub mode: Mode,
    pub ts: f64,
    pub records: Vec<StepRecord>,
    /// Wall-clock planner time per record [ms]; excluded from comparisons of runs.
    pub solve_ms: Vec<f64>,
}

impl SimLog {
    /// Whether two logs agree bit for bit, ignoring wall-clock timings.
    pub fn same_trajectory(&self, other: &SimLog) -> bool {
        let bits = |r: &StepRecord| {
            let e = r.ego;
            let n = r.nv;
            let a = r.alpha;
            (
                [
                    r.t, e.s, e.v, e.a, e.l, e.r_l, n.s, n.v, n.a, r.ego_control.u_a, r.nv_control, a.alpha_s,
                    a.alpha_v, a.alpha_a, r.objective,
                ]
                .map(f64::to_bits),
                r.ego_control.u_l,
                r.binaries,
                r.nodes,
                r.planner,
                r.nv_fallback,
            )
        };
        self.ts.to_bits() == other.ts.to_bits()
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| bits(a) == bits(b))
    }
}

/// Ego command when no fresh plan exists: continue the last plan, then brake
/// in the current lane.
fn fallback_control(last: Option<&(usize, PlanResult)>, k: usize, x: &EgoState, last_lane: i32, sc: &Scenario) -> EgoControl {
    let adm = &sc.planner.admissibility;
    if let Some((k_plan, plan)) = last {
        if let Some(u) = plan.ego_controls.get(k - k_plan) {
            return EgoControl {
                u_a: adm.clamp(u.u_a, x.v),
                u_l: u.u_l,
            };
        }
    }
    EgoControl {
        u_a: if x.v > 1.0 { adm.u_a_min } else { 0.0 },
        u_l: last_lane,
    }
}

fn imputation_window(history: &[NvState], sc: &Scenario) -> Option<TrajectoryWindow> {
    let r = sc.imputation.r;
    let k = history.len().checked_sub(1)?;
    if k < r {
        return None;
    }
    let ts = sc.ts();
    Some(TrajectoryWindow {
        states: history[k - r..=k].to_vec(),
        ts,
        s_ref: (k - r..=k).map(|j| sc.nv_reference(ts * j as f64).s_ref).collect(),
        v_ref: sc.v_ref_nv,
    })
}

/// Runs the closed loop for `sc.sim_time`, logging `steps + 1` records.
pub fn run_scenario(sc: &Scenario) -> Result<SimLog, SimError> {
    sc.validate()?;
    let models = VehicleModels::new(sc.model, sc.ts())?;
    let mut planner =
        JointPlanner::new(models.clone(), sc.planner.clone()).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
    let mut nv_ctl = NvController::new(models.nv.clone(), sc.nv_mpc, sc.nv_true_weights)?;
    let ts = sc.ts();
    let n = sc.planner.horizon.n;
    let adm = sc.planner.admissibility;

    let mut x_ego = sc.initial_ego();
    let mut x_nv = sc.initial_nv();
    let mut alpha = match sc.mode {
        Mode::NonAdaptive(a) => a,
        _ => sc.alpha0,
    };
    let mut nv_history = vec![x_nv];
    let mut last_plan: Option<(usize, PlanResult)> = None;
    let mut last_lane = 0;
    let steps = sc.steps();
    let mut records = Vec::with_capacity(steps + 1);
    let mut solve_ms = Vec::with_capacity(steps + 1);

    for k in 0..=steps {
        let t = ts * k as f64;
        if !x_ego.is_finite() || !x_nv.is_finite() {
            return Err(SimError::NonFinite { t });
        }

        if sc.mode == Mode::AiMpc {
            if let Some(window) = imputation_window(&nv_history, sc) {
                let v_mean = window.states.iter().map(|s| s.v).sum::<f64>() / window.states.len() as f64;
                let bounds = (adm.u_a_min, adm.max_accel(v_mean));
                if let Ok(res) = impute_weights(&window, &alpha, &models.nv, bounds, &sc.imputation) {
                    alpha = res.alpha;
                }
            }
        }

        let nv_model = match sc.mode {
            Mode::AiMpc | Mode::NonAdaptive(_) => NvModel::Joint(alpha),
            Mode::BaselineCv => NvModel::Frozen(baseline_predict(&x_nv, BaselineMode::ConstantVelocity, n, ts)),
            Mode::BaselineCa => NvModel::Frozen(baseline_predict(&x_nv, BaselineMode::ConstantAcceleration, n, ts)),
        };
        let refs = ReferenceSignal::anchored(x_ego.s, sc.v_ref_ego, 1.0, sc.s0_nv + sc.v_ref_nv * t, sc.v_ref_nv, n, ts);

        let started = Instant::now();
        let planned = match planner.plan(&x_ego, &x_nv, &nv_model, &refs) {
            Ok(plan) => Ok((plan, false)),
            Err(PlannerError::InfeasibleGeometry(_) | PlannerError::Infeasible | PlannerError::NodeLimit) => {
                planner.plan_recovery(&x_ego, &x_nv, &nv_model, &refs).map(|p| (p, true))
            }
            Err(e) => Err(e),
        };
        solve_ms.push(started.elapsed().as_secs_f64() * 1e3);

        let (ego_control, binaries, objective, nodes, outcome) = match planned {
            Ok((plan, recovered)) => {
                let outcome = match plan.stats.status {
                    _ if recovered => PlannerOutcome::Recovery,
                    MiqpStatus::NodeLimit => PlannerOutcome::NodeLimit,
                    _ => PlannerOutcome::Optimal,
                };
                let row = (plan.u_ego_first, plan.binaries[0], plan.objective, plan.stats.nodes, outcome);
                last_plan = Some((k, plan));
                row
            }
            Err(PlannerError::InfeasibleGeometry(_) | PlannerError::Infeasible | PlannerError::NodeLimit) => {
                planner.reset();
                let u = fallback_control(last_plan.as_ref(), k, &x_ego, last_lane, sc);
                let flags = StepBinaries { mu: 0, beta: 0, gamma: 0 };
                (u, flags, f64::NAN, 0, PlannerOutcome::Fallback)
            }
            Err(e) => return Err(SimError::Planner { t, source: e }),
        };
        last_lane = ego_control.u_l;

        // The neighbor reacts to the ego state observed at the same instant.
        let nv_plan = nv_ctl.plan(&x_nv, Some(&x_ego), &sc.nv_reference(t));

        records.push(StepRecord {
            t,
            ego: x_ego,
            nv: x_nv,
            ego_control,
            nv_control: nv_plan.control.u,
            alpha,
            binaries,
            objective,
            nodes,
            planner: outcome,
            nv_fallback: nv_plan.fallback,
        });

        if k < steps {
            x_ego = models.step_ego(&x_ego, &ego_control);
            x_nv = models.step_nv(&x_nv, &nv_plan.control);
            nv_history.push(x_nv);
        }
    }

    Ok(SimLog {
        name: sc.name.clone(),
        mode: sc.mode,
        ts,
        records,
        solve_ms,
    })
}

/// Neighbor states on the scenario grid with the ego removed.
pub fn run_unimpeded(sc: &Scenario) -> Result<Vec<NvState>, SimError> {
    sc.validate()?;
    let models = VehicleModels::new(sc.model, sc.ts())?;
    let mut ctl = NvController::new(models.nv.clone(), sc.nv_mpc, sc.nv_true_weights)?;
    let mut x = sc.initial_nv();
    let mut out = vec![x];
    for k in 0..sc.steps() {
        let plan = ctl.plan(&x, None, &sc.nv_reference(sc.ts() * k as f64));
        x = models.step_nv(&x, &plan.control);
        out.push(x);
    }
    Ok(out)
}

/// Shortfall of the neighbor's travel distance against the ego-free run [%].
pub fn hindrance(log: &SimLog, unimpeded: &[NvState]) -> Result<f64, SimError> {
    if log.records.len() != unimpeded.len() || log.records.is_empty() {
        return Err(SimError::GridMismatch);
    }
    let start = unimpeded[0].s;
    let free = unimpeded[unimpeded.len() - 1].s - start;
    let actual = log.records[log.records.len() - 1].nv.s - log.records[0].nv.s;
    if free <= 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * (free - actual) / free)
}

/// RMS of the finite-difference derivative of the ego's acceleration state.
pub fn rms_jerk(log: &SimLog) -> f64 {
    let a: Vec<f64> = log.records.iter().map(|r| r.ego.a).collect();
    rms_jerk_of(&a, log.ts)
}

pub fn rms_jerk_of(accel: &[f64], ts: f64) -> f64 {
    if accel.len() < 2 {
        return 0.0;
    }
    let sum: f64 = accel.windows(2).map(|w| ((w[1] - w[0]) / ts).powi(2)).sum();
    (sum / (accel.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeOutcome {
    MergedAhead,
    MergedBehind,
    Failed,
}

/// Outcome and merge time: the first record with `l >= l_merged`, provided
/// the ego never passed the ramp end before it.
pub fn merge_outcome(log: &SimLog, cfg: &SafetyConfig) -> (MergeOutcome, Option<f64>) {
    for r in &log.records {
        if r.ego.l >= cfg.l_merged {
            let outcome = if r.ego.s > r.nv.s {
                MergeOutcome::MergedAhead
            } else {
                MergeOutcome::MergedBehind
            };
            return (outcome, Some(r.t));
        }
        if r.ego.s > cfg.s_ramp_end + 1e-6 {
            break;
        }
    }
    (MergeOutcome::Failed, None)
}

/// Whether the ego occupies part of the neighbor's lane.
pub fn lanes_overlap(ego: &EgoState, cfg: &SafetyConfig) -> bool {
    ego.l > cfg.l_enc
}

/// Smallest longitudinal distance over records where the lanes overlap.
pub fn min_same_lane_gap(log: &SimLog, cfg: &SafetyConfig) -> Option<f64> {
    log.records
        .iter()
        .filter(|r| lanes_overlap(&r.ego, cfg))
        .map(|r| (r.ego.s - r.nv.s).abs())
        .min_by(f64::total_cmp)
}

/// Descriptions of every record that breaks spacing or ramp discipline.
pub fn safety_violations(log: &SimLog, cfg: &SafetyConfig) -> Vec<String> {
    let mut out = Vec::new();
    for r in &log.records {
        let gap = (r.ego.s - r.nv.s).abs();
        if lanes_overlap(&r.ego, cfg) && gap < cfg.min_spacing() - 0.1 {
            out.push(format!("t = {:.1} s: gap {gap:.3} m with l_ego = {:.3}", r.t, r.ego.l));
        }
        if r.ego.l < cfg.l_merged && r.ego.s > cfg.s_ramp_end + 0.1 {
            out.push(format!("t = {:.1} s: ego at s = {:.3} m past the ramp end unmerged", r.t, r.ego.s));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub merge_outcome: MergeOutcome,
    pub merge_time_s: Option<f64>,
    pub hindrance_pct: Option<f64>,
    pub rms_jerk: f64,
    pub min_same_lane_gap_m: Option<f64>,
    pub mean_solve_ms: Option<f64>,
    pub max_solve_ms: Option<f64>,
    pub final_alpha: WeightVector,
}

/// Metrics of a run. Timings are left out unless requested so that repeated
/// runs give identical metrics.
pub fn compute_metrics(
    log: &SimLog,
    cfg: &SafetyConfig,
    unimpeded: Option<&[NvState]>,
    timing: bool,
) -> Result<Metrics, SimError> {
    let (merge_outcome, merge_time_s) = merge_outcome(log, cfg);
    let hindrance_pct = unimpeded.map(|u| hindrance(log, u)).transpose()?;
    let (mean_solve_ms, max_solve_ms) = if timing && !log.solve_ms.is_empty() {
        (
            Some(log.solve_ms.iter().sum::<f64>() / log.solve_ms.len() as f64),
            log.solve_ms.iter().copied().max_by(f64::total_cmp),
        )
    } else {
        (None, None)
    };
    Ok(Metrics {
        merge_outcome,
        merge_time_s,
        hindrance_pct,
        rms_jerk: rms_jerk(log),
        min_same_lane_gap_m: min_same_lane_gap(log, cfg),
        mean_solve_ms,
        max_solve_ms,
        final_alpha: log.records.last().map_or(WeightVector::uniform(), |r| r.alpha),
    })
}

/// Imputation run on a neighbor driving alone.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputeBench {
    pub nature: WeightVector,
    /// Neighbor states, one per sample.
    pub states: Vec<NvState>,
    /// Estimate after each completed window.
    pub alphas: Vec<WeightVector>,
    /// L-infinity distance of each estimate from the nature.
    pub errors: Vec<f64>,
}

impl ImputeBench {
    pub fn final_error(&self) -> Option<f64> {
        self.errors.last().copied()
    }

    pub fn converged(&self, tol: f64) -> bool {
        self.final_error().is_some_and(|e| e <= tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchSetup {
    pub v0: f64,
    pub v_ref: f64,
    pub model: ModelParams,
    pub ts: f64,
    pub nv_mpc: NvMpcConfig,
    pub imputation: ImputationConfig,
    pub alpha0: WeightVector,
}

impl Default for BenchSetup {
    /// Starts below the reference speed so that every basis term is excited.
    fn default() -> Self {
        Self {
            v0: 10.0,
            v_ref: 12.0,
            model: ModelParams::default(),
            ts: 0.4,
            nv_mpc: NvMpcConfig::default(),
            imputation: ImputationConfig::default(),
            alpha0: WeightVector::uniform(),
        }
    }
}

/// Simulates the neighbor tracking its references and imputes its weights
/// after every sample once `r` steps are available, for `windows` windows.
pub fn impute_bench(nature: NvTrueWeights, windows: usize, setup: &BenchSetup) -> Result<ImputeBench, SimError> {
    let models = VehicleModels::new(setup.model, setup.ts)?;
    let mut ctl = NvController::new(models.nv.clone(), setup.nv_mpc, nature)?;
    let r = setup.imputation.r;
    if r == 0 {
        return Err(SimError::InvalidScenario("imputation window r must be >= 1".into()));
    }
    let truth = WeightVector::new(nature.q_s, nature.q_v, nature.q_a);
    let adm = setup.nv_mpc.admissibility;
    let reference = |t: f64| NvReference {
        s_ref: setup.v_ref * t,
        v_ref: setup.v_ref,
    };
    let mut x = NvState {
        s: 0.0,
        v: setup.v0,
        a: 0.0,
    };
    let mut states = vec![x];
    let mut alpha = setup.alpha0;
    let mut alphas = Vec::with_capacity(windows);
    let mut errors = Vec::with_capacity(windows);
    let mut k = 0;
    while alphas.len() < windows {
        let plan = ctl.plan(&x, None, &reference(setup.ts * k as f64));
        x = models.step_nv(&x, &NvControl { u: plan.control.u });
        states.push(x);
        k += 1;
        if k < r {
            continue;
        }
        let window = TrajectoryWindow {
            states: states[k - r..=k].to_vec(),
            ts: setup.ts,
            s_ref: (k - r..=k).map(|j| reference(setup.ts * j as f64).s_ref).collect(),
            v_ref: setup.v_ref,
        };
        let v_mean = window.states.iter().map(|s| s.v).sum::<f64>() / window.states.len() as f64;
        let res = impute_weights(&window, &alpha, &models.nv, (adm.u_a_min, adm.max_accel(v_mean)), &setup.imputation)
            .map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        alpha = res.alpha;
        errors.push(alpha.linf_distance(&truth));
        alphas.push(alpha);
    }
    Ok(ImputeBench {
        nature: truth,
        states,
        alphas,
        errors,
    })
}
