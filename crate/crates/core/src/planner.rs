//! Joint ego and neighbor MPC with mixed-integer lane and ordering logic.
//!
//! Decision blocks, each of horizon length `N` and in this order:
//! `u_a, u_l, u_nv, mu, beta, gamma`. The neighbor block is absent when the
//! neighbor's trajectory is frozen (the non-interactive baselines). States
//! are eliminated through the stacked prediction, so every state is an affine
//! function of the decision vector. Logic variables at index `i` act on the
//! predicted state `x(i + 1)`.
//!
//! * `mu` flags that the ego occupies the neighbor's lane; `beta` selects ego
//!   ahead (1) or behind (0) when it does.
//! * `gamma` flags that the ego counts as merged, which is required to pass
//!   the ramp terminus.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{AdmissibilityConfig, EgoControl, EgoState, NvState, Prediction, VehicleModels};
use crate::imputation::WeightVector;
use crate::miqp::{MiqpError, MiqpProblem, MiqpSettings, MiqpSolver, MiqpStatus};
use crate::qp::{QpProblem, RowBuilder};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("initial state violates hard constraints: {0}")]
    InfeasibleGeometry(String),
    #[error("joint problem is infeasible")]
    Infeasible,
    #[error("node limit reached without an integer-feasible plan")]
    NodeLimit,
    #[error("invalid planner configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Solver(#[from] MiqpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoWeights {
    pub q_s: f64,
    pub q_v: f64,
    pub q_a: f64,
    pub q_l: f64,
    pub q_ua: f64,
}

impl Default for EgoWeights {
    fn default() -> Self {
        Self {
            q_s: 0.1,
            q_v: 1.0,
            q_a: 0.5,
            q_l: 2.0,
            q_ua: 0.5,
        }
    }
}

impl EgoWeights {
    pub fn validate(&self) -> Result<(), PlannerError> {
        let w = [self.q_s, self.q_v, self.q_a, self.q_l, self.q_ua];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(PlannerError::InvalidConfig(format!("ego weights must be nonnegative: {w:?}")));
        }
        Ok(())
    }
}

/// References over the horizon; position entries are indexed by step `0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSignal {
    pub v_ref: f64,
    pub s_ref: Vec<f64>,
    pub l_ref: f64,
    pub v_ref_nv: f64,
    pub s_ref_nv: Vec<f64>,
}

impl ReferenceSignal {
    /// Position references advancing at their speeds from the given anchors.
    pub fn anchored(s0: f64, v_ref: f64, l_ref: f64, s0_nv: f64, v_ref_nv: f64, n: usize, ts: f64) -> Self {
        Self {
            v_ref,
            s_ref: (0..=n).map(|i| s0 + v_ref * ts * i as f64).collect(),
            l_ref,
            v_ref_nv,
            s_ref_nv: (0..=n).map(|i| s0_nv + v_ref_nv * ts * i as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyConfig {
    /// Vehicle length [m].
    #[serde(rename = "L")]
    pub vehicle_length: f64,
    /// Desired spacing beyond one vehicle length [m].
    pub gap: f64,
    /// Big-M constant for the longitudinal rows [m].
    #[serde(rename = "M")]
    pub big_m: f64,
    /// Start of the section where the ego may leave the ramp lane [m].
    pub s_ramp_start: f64,
    /// End of the ramp lane [m].
    pub s_ramp_end: f64,
    /// Lateral position above which the ego occupies the neighbor's lane.
    pub l_enc: f64,
    /// Lateral position above which the ego counts as merged.
    pub l_merged: f64,
    /// Big-M constant for lateral rows [lane units].
    pub lane_big_m: f64,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            vehicle_length: 5.0,
            gap: 2.5,
            big_m: 10_000.0,
            s_ramp_start: 40.0,
            s_ramp_end: 120.0,
            l_enc: 0.1,
            l_merged: 0.9,
            lane_big_m: 1.5,
        }
    }
}

impl SafetyConfig {
    pub fn min_spacing(&self) -> f64 {
        self.vehicle_length + self.gap
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        let bad = |m: String| Err(PlannerError::InvalidConfig(m));
        if !(self.vehicle_length > 0.0) || !(self.gap >= 0.0) {
            return bad(format!("L = {}, gap = {}", self.vehicle_length, self.gap));
        }
        if !(0.0 < self.l_enc && self.l_enc <= self.l_merged && self.l_merged <= 1.0) {
            return bad(format!("need 0 < l_enc <= l_merged <= 1, got {} and {}", self.l_enc, self.l_merged));
        }
        if !(self.s_ramp_start <= self.s_ramp_end) {
            return bad("ramp start lies beyond ramp end".into());
        }
        if !(self.big_m > 10.0 * self.min_spacing()) || !(self.lane_big_m >= 1.0) {
            return bad(format!("big-M constants too small: M = {}, lane M = {}", self.big_m, self.lane_big_m));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonConfig {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "Ts")]
    pub ts: f64,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self { n: 15, ts: 0.4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    pub safety: SafetyConfig,
    pub admissibility: AdmissibilityConfig,
    pub horizon: HorizonConfig,
    pub ego_weights: EgoWeights,
    /// Lane command, lane flag and merged flag may only switch on along the
    /// horizon and the ordering flag is one value for the whole horizon.
    pub monotone_logic: bool,
    /// Weight of the spacing slack in recovery problems, applied both
    /// linearly and quadratically.
    pub recovery_weight: f64,
    /// Relative optimality gap accepted for recovery problems.
    pub recovery_gap: f64,
    /// Node budget for recovery problems; the best point found is used.
    pub recovery_node_limit: usize,
    /// Weight of `x²` on every lane command and logic flag. On `{0, 1}` this
    /// equals a linear preference for flags off; it also makes the relaxation
    /// strictly convex.
    pub logic_penalty: f64,
    pub node_limit: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            safety: SafetyConfig::default(),
            admissibility: AdmissibilityConfig::default(),
            horizon: HorizonConfig::default(),
            ego_weights: EgoWeights::default(),
            monotone_logic: false,
            recovery_weight: 1e4,
            recovery_gap: 1e-3,
            recovery_node_limit: 300,
            logic_penalty: 1e-3,
            node_limit: 20_000,
        }
    }
}

/// How the ego predicts the neighbor.
#[derive(Debug, Clone, PartialEq)]
pub enum NvModel {
    /// Neighbor controls are decision variables weighted by the imputed cost.
    Joint(WeightVector),
    /// Fixed neighbor trajectory `x(1..=N)`.
    Frozen(Vec<NvState>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineMode {
    ConstantVelocity,
    ConstantAcceleration,
}

/// Neighbor states `x(1..=n)` assuming constant speed or constant acceleration.
pub fn baseline_predict(x: &NvState, mode: BaselineMode, n: usize, ts: f64) -> Vec<NvState> {
    (1..=n)
        .map(|i| {
            let t = ts * i as f64;
            match mode {
                BaselineMode::ConstantVelocity => NvState {
                    s: x.s + x.v * t,
                    v: x.v,
                    a: 0.0,
                },
                BaselineMode::ConstantAcceleration => NvState {
                    s: x.s + x.v * t + 0.5 * x.a * t * t,
                    v: x.v + x.a * t,
                    a: x.a,
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepBinaries {
    pub mu: u8,
    pub beta: u8,
    pub gamma: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverStats {
    pub status: MiqpStatus,
    pub nodes: usize,
    pub qp_iterations: usize,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub u_ego_first: EgoControl,
    /// Ego commands `u(0..N)`.
    pub ego_controls: Vec<EgoControl>,
    pub ego_trajectory: Vec<EgoState>,
    pub nv_trajectory: Vec<NvState>,
    pub nv_controls: Vec<f64>,
    pub lane_commands: Vec<i32>,
    pub binaries: Vec<StepBinaries>,
    pub objective: f64,
    pub stats: SolverStats,
    /// Raw decision vector, kept for warm starts.
    pub solution: DVector<f64>,
}

/// `coeffs . x + constant`.
#[derive(Debug, Clone, PartialEq)]
struct Affine {
    coeffs: DVector<f64>,
    constant: f64,
}

impl Affine {
    fn eval(&self, x: &DVector<f64>) -> f64 {
        self.coeffs.dot(x) + self.constant
    }
}

/// Index layout of the decision vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Layout {
    pub n: usize,
    pub joint: bool,
    /// Recovery problems carry one spacing slack per step after the logic blocks.
    pub soft: bool,
}

impl Layout {
    pub fn u_a(&self, i: usize) -> usize {
        i
    }
    pub fn u_l(&self, i: usize) -> usize {
        self.n + i
    }
    pub fn u_nv(&self, i: usize) -> Option<usize> {
        self.joint.then_some(2 * self.n + i)
    }
    fn logic_base(&self) -> usize {
        if self.joint {
            3 * self.n
        } else {
            2 * self.n
        }
    }
    pub fn mu(&self, i: usize) -> usize {
        self.logic_base() + i
    }
    pub fn beta(&self, i: usize) -> usize {
        self.logic_base() + self.n + i
    }
    pub fn gamma(&self, i: usize) -> usize {
        self.logic_base() + 2 * self.n + i
    }
    pub fn slack(&self, i: usize) -> Option<usize> {
        self.soft.then_some(self.logic_base() + 3 * self.n + i)
    }
    pub fn len(&self) -> usize {
        self.logic_base() + if self.soft { 4 * self.n } else { 3 * self.n }
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn integer_set(&self) -> Vec<usize> {
        let mut v: Vec<usize> = (0..self.n).map(|i| self.u_l(i)).collect();
        v.extend(self.logic_base()..self.logic_base() + 3 * self.n);
        v
    }
}

struct CostBuilder {
    h: DMatrix<f64>,
    f: DVector<f64>,
    constant: f64,
}

impl CostBuilder {
    fn new(n: usize) -> Self {
        Self {
            h: DMatrix::zeros(n, n),
            f: DVector::zeros(n),
            constant: 0.0,
        }
    }

    /// Adds `w (e - target)^2`.
    fn track(&mut self, e: &Affine, target: f64, w: f64) {
        if w == 0.0 {
            return;
        }
        let off = e.constant - target;
        self.h.ger(2.0 * w, &e.coeffs, &e.coeffs, 1.0);
        self.f.axpy(2.0 * w * off, &e.coeffs, 1.0);
        self.constant += w * off * off;
    }

    fn square_var(&mut self, idx: usize, w: f64) {
        self.h[(idx, idx)] += 2.0 * w;
    }
}

/// Assembled joint problem plus what is needed to read the solution back.
#[derive(Debug, Clone)]
pub struct JointProblem {
    pub miqp: MiqpProblem,
    pub layout: Layout,
    /// Cost constant dropped from the quadratic form.
    pub objective_offset: f64,
    ego_rows: Vec<[Affine; 5]>,
    nv_rows: Vec<[Affine; 3]>,
}

impl JointProblem {
    pub fn ego_state(&self, x: &DVector<f64>, i: usize) -> EgoState {
        let r = &self.ego_rows[i - 1];
        EgoState {
            s: r[0].eval(x),
            v: r[1].eval(x),
            a: r[2].eval(x),
            l: r[3].eval(x),
            r_l: r[4].eval(x),
        }
    }

    pub fn nv_state(&self, x: &DVector<f64>, i: usize) -> NvState {
        let r = &self.nv_rows[i - 1];
        NvState {
            s: r[0].eval(x),
            v: r[1].eval(x),
            a: r[2].eval(x),
        }
    }
}

pub fn check_initial(x_ego: &EgoState, x_nv: &NvState, cfg: &PlannerConfig) -> Result<(), PlannerError> {
    const TOL: f64 = 1e-3;
    let s = &cfg.safety;
    if !x_ego.is_finite() || !x_nv.is_finite() {
        return Err(PlannerError::InfeasibleGeometry("non-finite state".into()));
    }
    if x_ego.l > s.l_enc + TOL && (x_ego.s - x_nv.s).abs() < s.min_spacing() - TOL {
        return Err(PlannerError::InfeasibleGeometry(format!(
            "ego in the neighbor's lane (l = {:.3}) with spacing {:.3} m",
            x_ego.l,
            (x_ego.s - x_nv.s).abs()
        )));
    }
    if x_ego.s > s.s_ramp_end + TOL && x_ego.l < s.l_merged - TOL {
        return Err(PlannerError::InfeasibleGeometry(format!(
            "ego beyond the ramp end at s = {:.3} m while unmerged (l = {:.3})",
            x_ego.s, x_ego.l
        )));
    }
    Ok(())
}

pub fn build_joint_problem(
    models: &VehicleModels,
    x_ego: &EgoState,
    x_nv: &NvState,
    nv_model: &NvModel,
    refs: &ReferenceSignal,
    cfg: &PlannerConfig,
) -> Result<JointProblem, PlannerError> {
    build_problem(models, x_ego, x_nv, nv_model, refs, cfg, false)
}

/// Variant for states the hard problem rejects: spacing, ramp-start and
/// ramp-end rows get a penalized slack, so a plan exists whenever the
/// dynamics and input bounds allow one. Used to steer back to safety.
pub fn build_recovery_problem(
    models: &VehicleModels,
    x_ego: &EgoState,
    x_nv: &NvState,
    nv_model: &NvModel,
    refs: &ReferenceSignal,
    cfg: &PlannerConfig,
) -> Result<JointProblem, PlannerError> {
    build_problem(models, x_ego, x_nv, nv_model, refs, cfg, true)
}

fn build_problem(
    models: &VehicleModels,
    x_ego: &EgoState,
    x_nv: &NvState,
    nv_model: &NvModel,
    refs: &ReferenceSignal,
    cfg: &PlannerConfig,
    soft: bool,
) -> Result<JointProblem, PlannerError> {
    cfg.safety.validate()?;
    cfg.ego_weights.validate()?;
    let n = cfg.horizon.n;
    if n == 0 || (cfg.horizon.ts - models.ts()).abs() > 1e-12 {
        return Err(PlannerError::InvalidConfig("horizon must be >= 1 and share the model's sampling time".into()));
    }
    if refs.s_ref.len() != n + 1 || refs.s_ref_nv.len() != n + 1 {
        return Err(PlannerError::InvalidConfig("reference length must be N + 1".into()));
    }
    if soft {
        if !x_ego.is_finite() || !x_nv.is_finite() {
            return Err(PlannerError::InfeasibleGeometry("non-finite state".into()));
        }
        if !(cfg.recovery_weight > 0.0) {
            return Err(PlannerError::InvalidConfig("recovery weight must be positive".into()));
        }
    } else {
        check_initial(x_ego, x_nv, cfg)?;
    }

    let joint = matches!(nv_model, NvModel::Joint(_));
    let layout = Layout { n, joint, soft };
    let nvar = layout.len();

    let ego_pred = Prediction::new(&models.ego, n);
    let ego_free = ego_pred.free(&x_ego.to_vector());
    let ego_rows: Vec<[Affine; 5]> = (1..=n)
        .map(|i| {
            std::array::from_fn(|c| {
                let r = ego_pred.row(i, c);
                let mut coeffs = DVector::zeros(nvar);
                for j in 0..i {
                    coeffs[layout.u_a(j)] = ego_pred.gamma[(r, 2 * j)];
                    coeffs[layout.u_l(j)] = ego_pred.gamma[(r, 2 * j + 1)];
                }
                Affine {
                    coeffs,
                    constant: ego_free[r],
                }
            })
        })
        .collect();

    let nv_rows: Vec<[Affine; 3]> = match nv_model {
        NvModel::Joint(_) => {
            let pred = Prediction::new(&models.nv, n);
            let free = pred.free(&x_nv.to_vector());
            (1..=n)
                .map(|i| {
                    std::array::from_fn(|c| {
                        let r = pred.row(i, c);
                        let mut coeffs = DVector::zeros(nvar);
                        for j in 0..i {
                            coeffs[layout.u_nv(j).unwrap()] = pred.gamma[(r, j)];
                        }
                        Affine {
                            coeffs,
                            constant: free[r],
                        }
                    })
                })
                .collect()
        }
        NvModel::Frozen(traj) => {
            if traj.len() != n {
                return Err(PlannerError::InvalidConfig(format!(
                    "frozen neighbor trajectory has {} states, need {n}",
                    traj.len()
                )));
            }
            traj.iter()
                .map(|x| {
                    [x.s, x.v, x.a].map(|c| Affine {
                        coeffs: DVector::zeros(nvar),
                        constant: c,
                    })
                })
                .collect()
        }
    };

    // Cost.
    let w = &cfg.ego_weights;
    let mut cost = CostBuilder::new(nvar);
    // State terms over x(1..=N); the x(N) term doubles as the terminal cost.
    for i in 1..=n {
        let e = &ego_rows[i - 1];
        cost.track(&e[0], refs.s_ref[i], w.q_s);
        cost.track(&e[1], refs.v_ref, w.q_v);
        cost.track(&e[2], 0.0, w.q_a);
        cost.track(&e[3], refs.l_ref, w.q_l);
        if let NvModel::Joint(alpha) = nv_model {
            let v = &nv_rows[i - 1];
            cost.track(&v[0], refs.s_ref_nv[i], alpha.alpha_s);
            cost.track(&v[1], refs.v_ref_nv, alpha.alpha_v);
            cost.track(&v[2], 0.0, alpha.alpha_a);
        }
    }
    for i in 0..n {
        cost.square_var(layout.u_a(i), w.q_ua);
        if let Some(k) = layout.u_nv(i) {
            cost.square_var(k, 1e-6);
        }
    }
    for k in layout.integer_set() {
        cost.square_var(k, cfg.logic_penalty);
    }
    for k in (0..n).filter_map(|i| layout.slack(i)) {
        cost.square_var(k, cfg.recovery_weight);
        cost.f[k] += cfg.recovery_weight;
    }

    // Bounds.
    let adm = &cfg.admissibility;
    let mut lb = DVector::from_element(nvar, f64::NEG_INFINITY);
    let mut ub = DVector::from_element(nvar, f64::INFINITY);
    for i in 0..n {
        lb[layout.u_a(i)] = adm.u_a_min;
        for k in [layout.u_l(i), layout.mu(i), layout.beta(i), layout.gamma(i)] {
            lb[k] = 0.0;
            ub[k] = 1.0;
        }
        if let Some(k) = layout.u_nv(i) {
            lb[k] = adm.u_a_min;
        }
        if let Some(k) = layout.slack(i) {
            lb[k] = 0.0;
        }
    }
    ub[layout.u_a(0)] = adm.max_accel(x_ego.v);
    if let Some(k) = layout.u_nv(0) {
        ub[k] = adm.max_accel(x_nv.v);
    }

    let mut rows = RowBuilder::new(nvar);
    // `e <= rhs`
    let mut le = |e: &Affine, rhs: f64| rows.push(e.coeffs.as_slice(), rhs - e.constant);
    let unit = |k: usize, scale: f64| {
        let mut c = DVector::zeros(nvar);
        c[k] = scale;
        Affine { coeffs: c, constant: 0.0 }
    };
    let sum = |a: &Affine, b: &Affine, sb: f64| Affine {
        coeffs: &a.coeffs + &b.coeffs * sb,
        constant: a.constant + sb * b.constant,
    };
    let neg = |a: &Affine| Affine {
        coeffs: -&a.coeffs,
        constant: -a.constant,
    };

    // Range of each expression over the control box, used to shrink every
    // big-M to the smallest value that still relaxes its row. Speeds stay
    // nonnegative, so with falling cap lines no command exceeds the cap at rest.
    let cap_max = if adm.m1 <= 0.0 && adm.m2 <= 0.0 {
        adm.max_accel(0.0)
    } else {
        f64::INFINITY
    };
    let mut reach_ub = ub.clone();
    for i in 1..n {
        reach_ub[layout.u_a(i)] = cap_max;
        if let Some(k) = layout.u_nv(i) {
            reach_ub[k] = cap_max;
        }
    }
    let range = |e: &Affine| {
        let (mut lo, mut hi) = (e.constant, e.constant);
        for (j, &c) in e.coeffs.iter().enumerate() {
            if c != 0.0 {
                let (a, b) = (c * lb[j], c * reach_ub[j]);
                lo += a.min(b);
                hi += a.max(b);
            }
        }
        (lo, hi)
    };
    let s = &cfg.safety;
    let tight = |needed: f64| {
        if needed.is_finite() {
            s.big_m.min(needed.max(0.0) + 1.0)
        } else {
            s.big_m
        }
    };
    let spacing = s.min_spacing();
    for i in 1..=n {
        let e = &ego_rows[i - 1];
        let v = &nv_rows[i - 1];
        let (mu, beta, gamma) = (layout.mu(i - 1), layout.beta(i - 1), layout.gamma(i - 1));
        let ds = sum(&e[0], &v[0], -1.0); // s_ego - s_nv
        let (ds_lo, ds_hi) = range(&ds);
        let (s_lo, s_hi) = range(&e[0]);
        // `expr <= rhs`, relaxed by the step's slack in recovery problems.
        let soft_le = |le: &mut dyn FnMut(&Affine, f64), expr: Affine, rhs: f64| match layout.slack(i - 1) {
            Some(k) => le(&sum(&expr, &unit(k, 1.0), -1.0), rhs),
            None => le(&expr, rhs),
        };

        // Ahead: s_e - s_n - M beta - M mu >= spacing - 2M.
        let m = tight(spacing - ds_lo);
        let ahead = sum(&sum(&ds, &unit(beta, -m), 1.0), &unit(mu, -m), 1.0);
        soft_le(&mut le, neg(&ahead), 2.0 * m - spacing);
        // Behind: s_n - s_e + M beta - M mu >= spacing - M.
        let m = tight(spacing + ds_hi);
        let behind = sum(&sum(&ds, &unit(beta, m), -1.0), &unit(mu, m), 1.0);
        soft_le(&mut le, behind, m - spacing);

        // Encroachment forces the lane flag: l <= l_enc + M_l mu.
        le(&sum(&e[3], &unit(mu, s.lane_big_m), -1.0), s.l_enc);
        // Lane flag only past the ramp start: s >= s_start - M (1 - mu).
        let m = tight(s.s_ramp_start - s_lo);
        soft_le(&mut le, sum(&neg(&e[0]), &unit(mu, m), 1.0), m - s.s_ramp_start);
        // Ramp end unless merged: s <= s_end + M gamma.
        let m = tight(s_hi - s.s_ramp_end);
        soft_le(&mut le, sum(&e[0], &unit(gamma, m), -1.0), s.s_ramp_end);
        // Merged flag needs l >= l_merged: l >= (l_merged + M_l) gamma - M_l.
        le(
            &sum(&unit(gamma, s.l_merged + s.lane_big_m), &e[3], -1.0),
            s.lane_big_m,
        );

        // Nonnegative speeds.
        le(&neg(&e[1]), 0.0);
        if joint {
            le(&neg(&v[1]), 0.0);
        }
    }
    // Speed-dependent acceleration caps for commands applied at x(i), i >= 1.
    for i in 1..n {
        for (m, b) in [(adm.m1, adm.b1), (adm.m2, adm.b2)] {
            le(&sum(&unit(layout.u_a(i), 1.0), &ego_rows[i - 1][1], -m), b);
            if let Some(k) = layout.u_nv(i) {
                le(&sum(&unit(k, 1.0), &nv_rows[i - 1][1], -m), b);
            }
        }
    }
    if cfg.monotone_logic {
        for i in 0..n.saturating_sub(1) {
            for k in [layout.u_l(i), layout.mu(i), layout.gamma(i)] {
                // x_k(i) <= x_k(i+1)
                le(&sum(&unit(k, 1.0), &unit(k + 1, 1.0), -1.0), 0.0);
            }
        }
    }

    let (a_in, b_in) = rows.build();
    let mut base = QpProblem::new(cost.h, cost.f)
        .with_ineq(a_in, b_in)
        .with_bounds(lb, ub);
    if cfg.monotone_logic && n > 1 {
        let mut a_eq = DMatrix::zeros(n - 1, nvar);
        for i in 0..n - 1 {
            a_eq[(i, layout.beta(i))] = 1.0;
            a_eq[(i, layout.beta(i + 1))] = -1.0;
        }
        base = base.with_eq(a_eq, DVector::zeros(n - 1));
    }
    Ok(JointProblem {
        miqp: MiqpProblem {
            base,
            integer_set: layout.integer_set(),
        },
        layout,
        objective_offset: cost.constant,
        ego_rows,
        nv_rows,
    })
}

/// Shifts a previous decision vector one step forward, repeating the last entry.
pub fn shift_solution(x: &DVector<f64>, layout: &Layout) -> DVector<f64> {
    let n = layout.n;
    let mut out = x.clone();
    for block in 0..layout.len() / n {
        for i in 0..n {
            let src = block * n + (i + 1).min(n - 1);
            out[block * n + i] = x[src];
        }
    }
    out
}

/// Receding-horizon planner keeping the previous solution for warm starts.
#[derive(Debug, Clone)]
pub struct JointPlanner {
    models: VehicleModels,
    cfg: PlannerConfig,
    previous: Option<(Layout, DVector<f64>)>,
}

impl JointPlanner {
    pub fn new(models: VehicleModels, cfg: PlannerConfig) -> Result<Self, PlannerError> {
        cfg.safety.validate()?;
        cfg.ego_weights.validate()?;
        Ok(Self {
            models,
            cfg,
            previous: None,
        })
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.cfg
    }

    pub fn reset(&mut self) {
        self.previous = None;
    }

    pub fn plan(
        &mut self,
        x_ego: &EgoState,
        x_nv: &NvState,
        nv_model: &NvModel,
        refs: &ReferenceSignal,
    ) -> Result<PlanResult, PlannerError> {
        self.solve(x_ego, x_nv, nv_model, refs, false)
    }

    /// Solves the recovery problem; see [`build_recovery_problem`].
    pub fn plan_recovery(
        &mut self,
        x_ego: &EgoState,
        x_nv: &NvState,
        nv_model: &NvModel,
        refs: &ReferenceSignal,
    ) -> Result<PlanResult, PlannerError> {
        self.solve(x_ego, x_nv, nv_model, refs, true)
    }

    fn solve(
        &mut self,
        x_ego: &EgoState,
        x_nv: &NvState,
        nv_model: &NvModel,
        refs: &ReferenceSignal,
        soft: bool,
    ) -> Result<PlanResult, PlannerError> {
        let layout = Layout {
            n: self.cfg.horizon.n,
            joint: matches!(nv_model, NvModel::Joint(_)),
            soft,
        };
        // A recovery problem reuses the previous hard plan with zero slack.
        let hint = self.previous.as_ref().and_then(|(l, x)| {
            let same = l.n == layout.n && l.joint == layout.joint;
            match (same, l.soft, soft) {
                (true, a, b) if a == b => Some(shift_solution(x, l)),
                (true, false, true) => {
                    let shifted = shift_solution(x, l);
                    Some(DVector::from_fn(layout.len(), |k, _| shifted.get(k).copied().unwrap_or(0.0)))
                }
                _ => None,
            }
        });
        let jp = build_problem(&self.models, x_ego, x_nv, nv_model, refs, &self.cfg, soft)?;
        let result = solve_joint(&jp, &self.cfg, hint.as_ref());
        if let Ok(r) = &result {
            self.previous = Some((layout, r.solution.clone()));
        }
        result
    }
}

/// Builds and solves one joint problem.
pub fn plan_once(
    models: &VehicleModels,
    x_ego: &EgoState,
    x_nv: &NvState,
    nv_model: &NvModel,
    refs: &ReferenceSignal,
    cfg: &PlannerConfig,
    hint: Option<&DVector<f64>>,
) -> Result<PlanResult, PlannerError> {
    let jp = build_joint_problem(models, x_ego, x_nv, nv_model, refs, cfg)?;
    solve_joint(&jp, cfg, hint)
}

pub fn solve_joint(jp: &JointProblem, cfg: &PlannerConfig, hint: Option<&DVector<f64>>) -> Result<PlanResult, PlannerError> {
    let mut settings = MiqpSettings {
        node_limit: cfg.node_limit,
        ..MiqpSettings::default()
    };
    if jp.layout.soft {
        settings.gap_tol = cfg.recovery_gap;
        settings.node_limit = cfg.recovery_node_limit;
    }
    let sol = MiqpSolver::new(&jp.miqp, settings)?.solve(hint)?;
    match sol.status {
        MiqpStatus::Infeasible => return Err(PlannerError::Infeasible),
        MiqpStatus::NodeLimit if sol.x.is_empty() => return Err(PlannerError::NodeLimit),
        _ => {}
    }
    let layout = jp.layout;
    let n = layout.n;
    let x = &sol.x;
    let bit = |k: usize| u8::from(x[k] > 0.5);
    Ok(PlanResult {
        u_ego_first: EgoControl {
            u_a: x[layout.u_a(0)],
            u_l: x[layout.u_l(0)].round() as i32,
        },
        ego_controls: (0..n)
            .map(|i| EgoControl {
                u_a: x[layout.u_a(i)],
                u_l: x[layout.u_l(i)].round() as i32,
            })
            .collect(),
        ego_trajectory: (1..=n).map(|i| jp.ego_state(x, i)).collect(),
        nv_trajectory: (1..=n).map(|i| jp.nv_state(x, i)).collect(),
        nv_controls: (0..n).filter_map(|i| layout.u_nv(i).map(|k| x[k])).collect(),
        lane_commands: (0..n).map(|i| x[layout.u_l(i)].round() as i32).collect(),
        binaries: (0..n)
            .map(|i| StepBinaries {
                mu: bit(layout.mu(i)),
                beta: bit(layout.beta(i)),
                gamma: bit(layout.gamma(i)),
            })
            .collect(),
        objective: sol.objective + jp.objective_offset,
        stats: SolverStats {
            status: sol.status,
            nodes: sol.nodes_explored,
            qp_iterations: sol.qp_iterations,
            gap: sol.gap,
        },
        solution: sol.x,
    })
}
