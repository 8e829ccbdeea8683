//! The neighbor vehicle's own short-horizon MPC.
//!
//! The neighbor tracks its reference with its true weights and keeps the ego
//! outside an ellipse centred on the ego. The ellipse exterior is non-convex,
//! so each step it is replaced by the tangent half-plane at the boundary
//! point in the direction of the expected relative position.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{AdmissibilityConfig, DiscreteModel, EgoState, NvControl, NvState, Prediction};
use crate::qp::{solve_qp, QpProblem, QpStatus, RowBuilder};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeighborError {
    #[error("relative position is zero; no separating direction")]
    DegenerateDirection,
    #[error("invalid neighbor configuration: {0}")]
    InvalidConfig(String),
}

/// Cost weights the neighbor actually drives with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NvTrueWeights {
    pub q_s: f64,
    pub q_v: f64,
    pub q_a: f64,
}

impl NvTrueWeights {
    pub fn validate(&self) -> Result<(), NeighborError> {
        let w = [self.q_s, self.q_v, self.q_a];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(NeighborError::InvalidConfig(format!(
                "weights must be finite and nonnegative, got {w:?}"
            )));
        }
        Ok(())
    }
}

/// Semi-axes of the exclusion ellipse: `a` in metres, `b` in lane units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipseConfig {
    pub a: f64,
    pub b: f64,
}

impl Default for EllipseConfig {
    fn default() -> Self {
        Self { a: 12.0, b: 0.9 }
    }
}

impl EllipseConfig {
    pub fn validate(&self, vehicle_length: f64) -> Result<(), NeighborError> {
        if !(self.a > vehicle_length / 2.0) || !(self.b > 0.0) {
            return Err(NeighborError::InvalidConfig(format!(
                "ellipse axes a = {}, b = {} (need a > {} and b > 0)",
                self.a,
                self.b,
                vehicle_length / 2.0
            )));
        }
        Ok(())
    }

    /// `ds²/a² + dl²/b²`; at least 1 outside the ellipse.
    pub fn level(&self, ds: f64, dl: f64) -> f64 {
        (ds / self.a).powi(2) + (dl / self.b).powi(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NvMpcConfig {
    /// Horizon length in steps.
    pub horizon: usize,
    pub ellipse: EllipseConfig,
    pub admissibility: AdmissibilityConfig,
    /// Lateral position of the neighbor's lane centre.
    pub lane: f64,
    /// Small control penalty keeping the problem strictly convex.
    pub control_reg: f64,
}

impl Default for NvMpcConfig {
    fn default() -> Self {
        Self {
            horizon: 3,
            ellipse: EllipseConfig::default(),
            admissibility: AdmissibilityConfig::default(),
            lane: 1.0,
            control_reg: 1e-6,
        }
    }
}

/// Neighbor references at the current time; `s_ref` advances at `v_ref`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NvReference {
    pub s_ref: f64,
    pub v_ref: f64,
}

/// `coeff_s * (s_nv - s_ego) + coeff_l * (l_nv - l_ego) >= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfPlane {
    pub coeff_s: f64,
    pub coeff_l: f64,
}

impl HalfPlane {
    pub fn value(&self, ds: f64, dl: f64) -> f64 {
        self.coeff_s * ds + self.coeff_l * dl
    }

    pub fn contains(&self, ds: f64, dl: f64, tol: f64) -> bool {
        self.value(ds, dl) >= 1.0 - tol
    }
}

/// Ego positions over `horizon` steps at constant `v` and `r_l`.
pub fn project_ego(x: &EgoState, horizon: usize, ts: f64) -> Vec<EgoState> {
    (1..=horizon)
        .map(|i| {
            let t = ts * i as f64;
            EgoState {
                s: x.s + t * x.v,
                v: x.v,
                a: 0.0,
                l: x.l + t * x.r_l,
                r_l: x.r_l,
            }
        })
        .collect()
}

/// Tangent half-plane of the ellipse exterior at the boundary point on the
/// ray through `(ds, dl)`.
pub fn ellipse_halfplane(ds: f64, dl: f64, cfg: &EllipseConfig) -> Result<HalfPlane, NeighborError> {
    let level = cfg.level(ds, dl);
    if !(level > 0.0) || !level.is_finite() {
        return Err(NeighborError::DegenerateDirection);
    }
    let scale = level.sqrt().recip();
    let (ps, pl) = (ds * scale, dl * scale);
    // Gradient of the level function at the boundary point, normalized so the
    // plane passes through it: p'G p = 1.
    Ok(HalfPlane {
        coeff_s: ps / (cfg.a * cfg.a),
        coeff_l: pl / (cfg.b * cfg.b),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NvPlan {
    pub control: NvControl,
    /// Predicted states `x(1..=T)`.
    pub predicted: Vec<NvState>,
    /// The optimization failed and the fail-safe brake was applied.
    pub fallback: bool,
}

/// Stateful neighbor MPC; remembers its last prediction to linearize the
/// exclusion constraint at the next step.
#[derive(Debug, Clone)]
pub struct NvController {
    model: DiscreteModel,
    prediction: Prediction,
    cfg: NvMpcConfig,
    weights: NvTrueWeights,
    last_prediction: Option<Vec<NvState>>,
    last_direction: (f64, f64),
}

impl NvController {
    pub fn new(model: DiscreteModel, cfg: NvMpcConfig, weights: NvTrueWeights) -> Result<Self, NeighborError> {
        if cfg.horizon == 0 {
            return Err(NeighborError::InvalidConfig("horizon must be at least 1".into()));
        }
        weights.validate()?;
        Ok(Self {
            prediction: Prediction::new(&model, cfg.horizon),
            model,
            cfg,
            weights,
            last_prediction: None,
            last_direction: (1.0, 0.0),
        })
    }

    pub fn config(&self) -> &NvMpcConfig {
        &self.cfg
    }

    /// One MPC step. `ego = None` removes the exclusion constraint.
    pub fn plan(&mut self, x: &NvState, ego: Option<&EgoState>, reference: &NvReference) -> NvPlan {
        let ts = self.model.ts;
        let t = self.cfg.horizon;
        let mut planes = None;
        if let Some(e) = ego {
            let projected = project_ego(e, t, ts);
            let mut list = Vec::with_capacity(t);
            for (i, pe) in projected.iter().enumerate() {
                let dir = match &self.last_prediction {
                    Some(prev) => {
                        let expected_s = if i + 1 < prev.len() {
                            prev[i + 1].s
                        } else {
                            let last = prev[prev.len() - 1];
                            last.s + last.v * ts * (i + 2 - prev.len()) as f64
                        };
                        (expected_s - pe.s, self.cfg.lane - pe.l)
                    }
                    None => (x.s - e.s, self.cfg.lane - e.l),
                };
                let plane = match ellipse_halfplane(dir.0, dir.1, &self.cfg.ellipse) {
                    Ok(p) => {
                        self.last_direction = dir;
                        p
                    }
                    Err(_) => {
                        let d = self.last_direction;
                        ellipse_halfplane(d.0, d.1, &self.cfg.ellipse)
                            .expect("last direction is never zero")
                    }
                };
                list.push((plane, *pe));
            }
            planes = Some(list);
        }
        let plan = self.solve(x, planes.as_deref(), reference);
        self.last_prediction = Some(plan.predicted.clone());
        plan
    }

    fn solve(&self, x: &NvState, planes: Option<&[(HalfPlane, EgoState)]>, reference: &NvReference) -> NvPlan {
        let ts = self.model.ts;
        let t = self.cfg.horizon;
        let pred = &self.prediction;
        let free = pred.free(&x.to_vector());
        let w = &self.weights;

        let mut h = DMatrix::identity(t, t) * (2.0 * self.cfg.control_reg);
        let mut f = DVector::zeros(t);
        for i in 1..=t {
            let targets = [
                (0, w.q_s, reference.s_ref + reference.v_ref * ts * i as f64),
                (1, w.q_v, reference.v_ref),
                (2, w.q_a, 0.0),
            ];
            for (c, q, target) in targets {
                if q == 0.0 {
                    continue;
                }
                let r = pred.row(i, c);
                let g = pred.gamma.row(r);
                h += g.transpose() * g * (2.0 * q);
                f += g.transpose() * (2.0 * q * (free[r] - target));
            }
        }

        let adm = &self.cfg.admissibility;
        let mut rows = RowBuilder::new(t);
        let mut ub = DVector::from_element(t, f64::INFINITY);
        ub[0] = adm.max_accel(x.v);
        for i in 1..t {
            // u(i) - m v(i) <= b
            let r = pred.row(i, 1);
            for (m, b) in [(adm.m1, adm.b1), (adm.m2, adm.b2)] {
                let mut row = (pred.gamma.row(r) * -m).transpose();
                row[i] += 1.0;
                rows.push(row.as_slice(), b + m * free[r]);
            }
        }
        for i in 1..=t {
            let r = pred.row(i, 1);
            let row = -pred.gamma.row(r).transpose();
            rows.push(row.as_slice(), free[r]);
        }
        if let Some(planes) = planes {
            for (i, (plane, pe)) in planes.iter().enumerate() {
                if plane.coeff_s == 0.0 {
                    continue;
                }
                let r = pred.row(i + 1, 0);
                let row = -pred.gamma.row(r).transpose() * plane.coeff_s;
                let rhs = plane.coeff_s * (free[r] - pe.s) + plane.coeff_l * (self.cfg.lane - pe.l) - 1.0;
                rows.push(row.as_slice(), rhs);
            }
        }
        let (a_in, b_in) = rows.build();
        let lb = DVector::from_element(t, adm.u_a_min);
        let qp = QpProblem::new(h, f).with_ineq(a_in, b_in).with_bounds(lb, ub);

        let lateral_blocked = planes.is_some_and(|ps| {
            ps.iter()
                .any(|(p, pe)| p.coeff_s == 0.0 && !p.contains(0.0, self.cfg.lane - pe.l, 1e-9))
        });
        match solve_qp(&qp, None) {
            Ok(sol) if sol.status == QpStatus::Optimal && !lateral_blocked => {
                let u = DVector::from_column_slice(sol.x.as_slice());
                let states = free + &pred.gamma * u;
                NvPlan {
                    control: NvControl { u: sol.x[0] },
                    predicted: (1..=t)
                        .map(|i| NvState::from_slice(&states.as_slice()[pred.row(i, 0)..pred.row(i, 0) + 3]))
                        .collect(),
                    fallback: false,
                }
            }
            _ => self.brake(x),
        }
    }

    fn brake(&self, x: &NvState) -> NvPlan {
        let u = if x.v > 1.0 { self.cfg.admissibility.u_a_min } else { 0.0 };
        let uvec = DVector::from_element(self.cfg.horizon, u);
        let states = self.prediction.free(&x.to_vector()) + &self.prediction.gamma * uvec;
        NvPlan {
            control: NvControl { u },
            predicted: states
                .as_slice()
                .chunks(3)
                .map(NvState::from_slice)
                .collect(),
            fallback: true,
        }
    }
}

/// Stateless single step, linearizing at the current relative position.
pub fn nv_plan(
    model: &DiscreteModel,
    x_nv: &NvState,
    x_ego_obs: Option<&EgoState>,
    q: &NvTrueWeights,
    cfg: &NvMpcConfig,
    reference: &NvReference,
) -> Result<NvPlan, NeighborError> {
    let mut ctl = NvController::new(model.clone(), *cfg, *q)?;
    Ok(ctl.plan(x_nv, x_ego_obs, reference))
}
