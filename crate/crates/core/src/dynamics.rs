//! Kinematic vehicle models and their zero-order-hold discretization.
//!
//! The ego model decouples a longitudinal chain `[s, v, a]`, where the
//! acceleration follows its command through a first-order lag, from a
//! critically damped lateral response `[l, r_l]` driven by the lane command.
//! The neighbor carries only the longitudinal chain and stays in its lane.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid model parameter: {0}")]
    InvalidParams(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Physical constants of the vehicle models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Longitudinal lag time constant [s].
    pub tau: f64,
    /// Lateral natural frequency [rad/s].
    pub omega_n: f64,
    /// Lateral damping ratio.
    pub zeta: f64,
    /// Lateral steady-state gain.
    #[serde(rename = "K")]
    pub k: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            tau: 0.275,
            omega_n: 1.091,
            zeta: 1.0,
            k: 1.0,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        for (name, value) in [
            ("tau", self.tau),
            ("omega_n", self.omega_n),
            ("zeta", self.zeta),
            ("K", self.k),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(DynamicsError::InvalidParams(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EgoState {
    pub s: f64,
    pub v: f64,
    pub a: f64,
    pub l: f64,
    pub r_l: f64,
}

impl EgoState {
    pub const DIM: usize = 5;

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&[self.s, self.v, self.a, self.l, self.r_l])
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            s: x[0],
            v: x[1],
            a: x[2],
            l: x[3],
            r_l: x[4],
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.s, self.v, self.a, self.l, self.r_l]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Ego command: acceleration and integer lane index (0 = ramp, 1 = highway).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EgoControl {
    pub u_a: f64,
    pub u_l: i32,
}

impl EgoControl {
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&[self.u_a, f64::from(self.u_l)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NvState {
    pub s: f64,
    pub v: f64,
    pub a: f64,
}

impl NvState {
    pub const DIM: usize = 3;

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&[self.s, self.v, self.a])
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            s: x[0],
            v: x[1],
            a: x[2],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.s.is_finite() && self.v.is_finite() && self.a.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NvControl {
    pub u: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub a_d: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub ts: f64,
}

/// Continuous ego model `(A, B)` with state `[s, v, a, l, r_l]` and input `[u_a, u_l]`.
pub fn ego_continuous(params: &ModelParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let ModelParams {
        tau,
        omega_n,
        zeta,
        k,
    } = *params;
    let mut a = DMatrix::zeros(5, 5);
    a[(0, 1)] = 1.0;
    a[(1, 2)] = 1.0;
    a[(2, 2)] = -1.0 / tau;
    a[(3, 4)] = 1.0;
    a[(4, 3)] = -omega_n * omega_n;
    a[(4, 4)] = -2.0 * zeta * omega_n;
    let mut b = DMatrix::zeros(5, 2);
    b[(2, 0)] = 1.0 / tau;
    b[(4, 1)] = k * omega_n * omega_n;
    (a, b)
}

/// Continuous neighbor model with state `[s, v, a]` and scalar acceleration input.
pub fn nv_continuous(tau: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut a = DMatrix::zeros(3, 3);
    a[(0, 1)] = 1.0;
    a[(1, 2)] = 1.0;
    a[(2, 2)] = -1.0 / tau;
    let mut b = DMatrix::zeros(3, 1);
    b[(2, 0)] = 1.0 / tau;
    (a, b)
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m
        .row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0u32;
    let mut scale = 1.0;
    while norm * scale > 0.25 {
        scale *= 0.5;
        squarings += 1;
    }
    let scaled = m * scale;
    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    // ||scaled|| <= 1/4, so 20 terms push the remainder far below machine precision.
    for k in 1..=20 {
        term = &term * &scaled / f64::from(k);
        result += &term;
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Exact zero-order-hold discretization via the exponential of `[[A, B], [0, 0]]·Ts`.
pub fn discretize(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    ts: f64,
) -> Result<DiscreteModel, DynamicsError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(DynamicsError::Dimension {
            what: "A must be square",
            expected: n,
            got: a.ncols(),
        });
    }
    if b.nrows() != n {
        return Err(DynamicsError::Dimension {
            what: "B rows",
            expected: n,
            got: b.nrows(),
        });
    }
    if !ts.is_finite() || ts < 0.0 {
        return Err(DynamicsError::InvalidParams(format!(
            "sampling time must be finite and non-negative, got {ts}"
        )));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(DynamicsError::NonFinite("A"));
    }
    if b.iter().any(|x| !x.is_finite()) {
        return Err(DynamicsError::NonFinite("B"));
    }
    let m = b.ncols();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.view_mut((0, n), (n, m)).copy_from(b);
    let e = expm(&(aug * ts));
    Ok(DiscreteModel {
        a_d: e.view((0, 0), (n, n)).into_owned(),
        b_d: e.view((0, n), (n, m)).into_owned(),
        ts,
    })
}

/// One step `A_d·x + B_d·u`.
pub fn step(
    model: &DiscreteModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>, DynamicsError> {
    if x.len() != model.a_d.ncols() {
        return Err(DynamicsError::Dimension {
            what: "state",
            expected: model.a_d.ncols(),
            got: x.len(),
        });
    }
    if u.len() != model.b_d.ncols() {
        return Err(DynamicsError::Dimension {
            what: "control",
            expected: model.b_d.ncols(),
            got: u.len(),
        });
    }
    Ok(&model.a_d * x + &model.b_d * u)
}

/// Discretized ego and neighbor models sharing one sampling time.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleModels {
    pub params: ModelParams,
    pub ego: DiscreteModel,
    pub nv: DiscreteModel,
}

impl VehicleModels {
    pub fn new(params: ModelParams, ts: f64) -> Result<Self, DynamicsError> {
        params.validate()?;
        if !(ts > 0.0) {
            return Err(DynamicsError::InvalidParams(format!(
                "sampling time must be positive, got {ts}"
            )));
        }
        let (a, b) = ego_continuous(&params);
        let ego = discretize(&a, &b, ts)?;
        let (a, b) = nv_continuous(params.tau);
        let nv = discretize(&a, &b, ts)?;
        Ok(Self { params, ego, nv })
    }

    pub fn ts(&self) -> f64 {
        self.ego.ts
    }

    pub fn step_ego(&self, x: &EgoState, u: &EgoControl) -> EgoState {
        let next = &self.ego.a_d * x.to_vector() + &self.ego.b_d * u.to_vector();
        EgoState::from_slice(next.as_slice())
    }

    pub fn step_nv(&self, x: &NvState, u: &NvControl) -> NvState {
        let next = &self.nv.a_d * x.to_vector() + self.nv.b_d.column(0) * u.u;
        NvState::from_slice(next.as_slice())
    }
}

/// Stacked prediction `X = phi * x0 + gamma * U` over a horizon, where `X`
/// holds `x(1..=n)` and `U` holds `u(0..n)`, both stacked step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub phi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub nx: usize,
    pub nu: usize,
    pub horizon: usize,
}

impl Prediction {
    pub fn new(model: &DiscreteModel, horizon: usize) -> Self {
        let nx = model.a_d.nrows();
        let nu = model.b_d.ncols();
        let mut phi = DMatrix::zeros(horizon * nx, nx);
        let mut gamma = DMatrix::zeros(horizon * nx, horizon * nu);
        let mut power = DMatrix::identity(nx, nx);
        // powers[j] = A^j B
        let mut ab = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            ab.push(&power * &model.b_d);
            power = &model.a_d * power;
        }
        let mut power = model.a_d.clone();
        for i in 0..horizon {
            phi.view_mut((i * nx, 0), (nx, nx)).copy_from(&power);
            power = &model.a_d * power;
            for j in 0..=i {
                gamma
                    .view_mut((i * nx, j * nu), (nx, nu))
                    .copy_from(&ab[i - j]);
            }
        }
        Self {
            phi,
            gamma,
            nx,
            nu,
            horizon,
        }
    }

    /// Row of `phi` / `gamma` for state component `c` at step `i` (1-based).
    pub fn row(&self, i: usize, c: usize) -> usize {
        (i - 1) * self.nx + c
    }

    /// Free response `phi * x0`.
    pub fn free(&self, x0: &DVector<f64>) -> DVector<f64> {
        &self.phi * x0
    }
}

/// Velocity-dependent acceleration limits: `u >= u_a_min` and
/// `u <= m1 v + b1`, `u <= m2 v + b2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmissibilityConfig {
    pub u_a_min: f64,
    pub m1: f64,
    pub b1: f64,
    pub m2: f64,
    pub b2: f64,
}

impl Default for AdmissibilityConfig {
    fn default() -> Self {
        Self {
            u_a_min: -4.0,
            m1: -0.1,
            b1: 4.0,
            m2: -0.4,
            b2: 8.0,
        }
    }
}

impl AdmissibilityConfig {
    pub fn max_accel(&self, v: f64) -> f64 {
        (self.m1 * v + self.b1).min(self.m2 * v + self.b2)
    }

    /// The caps are lines, so checking the ends of `[0, v_max]` suffices.
    pub fn validate(&self, v_max: f64) -> Result<(), DynamicsError> {
        let vals = [self.u_a_min, self.m1, self.b1, self.m2, self.b2];
        if vals.iter().any(|x| !x.is_finite()) {
            return Err(DynamicsError::NonFinite("admissibility"));
        }
        if self.u_a_min >= 0.0 {
            return Err(DynamicsError::InvalidParams(format!(
                "u_a_min must be negative, got {}",
                self.u_a_min
            )));
        }
        if self.max_accel(0.0) <= 0.0 || self.max_accel(v_max) <= 0.0 {
            return Err(DynamicsError::InvalidParams(format!(
                "acceleration cap is not positive on [0, {v_max}] m/s"
            )));
        }
        Ok(())
    }

    pub fn clamp(&self, u: f64, v: f64) -> f64 {
        u.min(self.max_accel(v)).max(self.u_a_min)
    }
}
