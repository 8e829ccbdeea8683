//! Online estimation of the neighbor's cost weights from its recent states.
//!
//! A control-free forward problem is fitted to the last `r` observed steps:
//! the decision variables are the states after the first sample, the
//! equalities are reduced dynamics rows that do not involve the (unobserved)
//! command, and the inequalities are an acceleration box. The weights, box
//! multipliers and dynamics multipliers are then chosen to minimize the
//! stationarity and complementarity residuals of that problem.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DiscreteModel, NvState};
use crate::qp::{solve_qp, QpProblem, QpStatus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImputationError {
    #[error("window needs at least 2 samples, got {0}")]
    WindowTooShort(usize),
    #[error("invalid window: {0}")]
    InvalidWindow(String),
}

/// Convex combination of the position, speed and acceleration cost terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightVector {
    pub alpha_s: f64,
    pub alpha_v: f64,
    pub alpha_a: f64,
}

impl Default for WeightVector {
    fn default() -> Self {
        Self::uniform()
    }
}

impl WeightVector {
    pub fn uniform() -> Self {
        Self {
            alpha_s: 1.0 / 3.0,
            alpha_v: 1.0 / 3.0,
            alpha_a: 1.0 / 3.0,
        }
    }

    pub fn new(alpha_s: f64, alpha_v: f64, alpha_a: f64) -> Self {
        Self {
            alpha_s,
            alpha_v,
            alpha_a,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.alpha_s, self.alpha_v, self.alpha_a]
    }

    pub fn is_on_simplex(&self, tol: f64) -> bool {
        let a = self.as_array();
        a.iter().all(|x| *x >= -tol && x.is_finite()) && (a.iter().sum::<f64>() - 1.0).abs() <= tol
    }

    /// Clips tiny negatives from floating-point round-off and renormalizes.
    pub fn project_simplex_roundoff(&self) -> Self {
        let a = self.as_array().map(|x| x.max(0.0));
        let sum: f64 = a.iter().sum();
        Self::new(a[0] / sum, a[1] / sum, a[2] / sum)
    }

    pub fn linf_distance(&self, other: &Self) -> f64 {
        self.as_array()
            .iter()
            .zip(other.as_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// How the command is removed from the neighbor's dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitDynamics {
    /// Forward-Euler position and speed rows; the acceleration row is dropped.
    Euler,
    /// Exact discrete rows with the command eliminated: two combinations of
    /// the sampled model's rows that are orthogonal to its input column.
    ExactLag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryWindow {
    /// `r + 1` consecutive samples, oldest first.
    pub states: Vec<NvState>,
    pub ts: f64,
    /// Position reference at each sample.
    pub s_ref: Vec<f64>,
    pub v_ref: f64,
}

impl TrajectoryWindow {
    pub fn steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<(), ImputationError> {
        if self.states.len() < 2 {
            return Err(ImputationError::WindowTooShort(self.states.len()));
        }
        if self.s_ref.len() != self.states.len() {
            return Err(ImputationError::InvalidWindow(format!(
                "{} reference positions for {} samples",
                self.s_ref.len(),
                self.states.len()
            )));
        }
        if !(self.ts > 0.0) {
            return Err(ImputationError::InvalidWindow(format!("sampling time {}", self.ts)));
        }
        if !self.states.iter().all(NvState::is_finite)
            || !self.s_ref.iter().all(|x| x.is_finite())
            || !self.v_ref.is_finite()
        {
            return Err(ImputationError::InvalidWindow("non-finite sample".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputationConfig {
    /// Window length `r` in steps.
    pub r: usize,
    /// Pull toward the previous estimate.
    pub regularization: f64,
    pub dynamics: FitDynamics,
    /// Box constraints with more slack than this get their multiplier fixed at zero.
    pub inactive_slack: f64,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        Self {
            r: 3,
            regularization: 1e-3,
            dynamics: FitDynamics::Euler,
            inactive_slack: 1e-3,
        }
    }
}

/// Linear data of the fitted problem. Decision variables are the `r` states
/// after the first sample, stacked `[s, v, a]` per step.
#[derive(Debug, Clone, PartialEq)]
pub struct FitProblem {
    /// Columns are the gradients of the position, speed and acceleration terms.
    pub basis_gradients: DMatrix<f64>,
    /// Rows are gradients of the reduced dynamics rows.
    pub eq_gradients: DMatrix<f64>,
    /// Reduced dynamics rows evaluated on the data.
    pub eq_values: DVector<f64>,
    /// Rows are gradients of the box constraints `g <= 0`.
    pub ineq_gradients: DMatrix<f64>,
    /// Box constraint values on the data (nonpositive when satisfied).
    pub ineq_values: DVector<f64>,
}

impl FitProblem {
    pub fn num_alpha(&self) -> usize {
        3
    }
    pub fn num_lambda(&self) -> usize {
        self.ineq_values.len()
    }
    pub fn num_nu(&self) -> usize {
        self.eq_values.len()
    }

    /// Map from `(alpha, lambda, nu)` to the stacked stationarity residual.
    pub fn stationarity_matrix(&self) -> DMatrix<f64> {
        let rows = self.basis_gradients.nrows();
        let (nl, nn) = (self.num_lambda(), self.num_nu());
        let mut m = DMatrix::zeros(rows, 3 + nl + nn);
        m.view_mut((0, 0), (rows, 3)).copy_from(&self.basis_gradients);
        m.view_mut((0, 3), (rows, nl)).copy_from(&self.ineq_gradients.transpose());
        m.view_mut((0, 3 + nl), (rows, nn)).copy_from(&self.eq_gradients.transpose());
        m
    }
}

/// Builds the fitted problem for a window. `a_bounds` is the acceleration box.
pub fn build_fit_problem(
    window: &TrajectoryWindow,
    dynamics: FitDynamics,
    nv_model: &DiscreteModel,
    a_bounds: (f64, f64),
) -> Result<FitProblem, ImputationError> {
    window.validate()?;
    let r = window.steps();
    let n = 3 * r;
    let ts = window.ts;

    let mut basis = DMatrix::zeros(n, 3);
    for j in 0..r {
        let x = window.states[j + 1];
        basis[(3 * j, 0)] = 2.0 * (x.s - window.s_ref[j + 1]);
        basis[(3 * j + 1, 1)] = 2.0 * (x.v - window.v_ref);
        basis[(3 * j + 2, 2)] = 2.0 * x.a;
    }

    // Each step contributes rows P (x(i+1) - A x(i)) with P B = 0.
    let (a_mat, p) = match dynamics {
        FitDynamics::Euler => (
            DMatrix::from_row_slice(3, 3, &[1.0, ts, 0.0, 0.0, 1.0, ts, 0.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
        ),
        FitDynamics::ExactLag => {
            let b = nv_model.b_d.column(0);
            let (bs, bv, ba) = (b[0], b[1], b[2]);
            (
                nv_model.a_d.clone(),
                DMatrix::from_row_slice(2, 3, &[1.0, 0.0, -bs / ba, 0.0, 1.0, -bv / ba]),
            )
        }
    };
    let pa = &p * &a_mat;
    let mut eq_grad = DMatrix::zeros(2 * r, n);
    let mut eq_val = DVector::zeros(2 * r);
    for i in 0..r {
        let x0 = window.states[i].to_vector();
        let x1 = window.states[i + 1].to_vector();
        let val = &p * &x1 - &pa * &x0;
        eq_val.rows_mut(2 * i, 2).copy_from(&val);
        // x(i+1) is decision variable i; x(i) is decision variable i-1 when i > 0.
        eq_grad.view_mut((2 * i, 3 * i), (2, 3)).copy_from(&p);
        if i > 0 {
            eq_grad
                .view_mut((2 * i, 3 * (i - 1)), (2, 3))
                .copy_from(&(-&pa));
        }
    }

    let (a_min, a_max) = a_bounds;
    let mut ineq_grad = DMatrix::zeros(2 * r, n);
    let mut ineq_val = DVector::zeros(2 * r);
    for j in 0..r {
        let a = window.states[j + 1].a;
        ineq_grad[(2 * j, 3 * j + 2)] = -1.0;
        ineq_val[2 * j] = a_min - a;
        ineq_grad[(2 * j + 1, 3 * j + 2)] = 1.0;
        ineq_val[2 * j + 1] = a - a_max;
    }

    Ok(FitProblem {
        basis_gradients: basis,
        eq_gradients: eq_grad,
        eq_values: eq_val,
        ineq_gradients: ineq_grad,
        ineq_values: ineq_val,
    })
}

/// Stacked gradient of the Lagrangian with respect to every decision state.
pub fn stationarity_residual(
    alpha: &WeightVector,
    lambda: &DVector<f64>,
    nu: &DVector<f64>,
    fit: &FitProblem,
) -> DVector<f64> {
    &fit.basis_gradients * DVector::from_column_slice(&alpha.as_array())
        + fit.ineq_gradients.transpose() * lambda
        + fit.eq_gradients.transpose() * nu
}

pub fn complementarity_residual(lambda: &DVector<f64>, fit: &FitProblem) -> DVector<f64> {
    lambda.component_mul(&fit.ineq_values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationResult {
    pub alpha: WeightVector,
    /// `sqrt(|r_stat|² + |r_comp|²)` at the returned point.
    pub residual_norm: f64,
    pub lambda: DVector<f64>,
    pub nu: DVector<f64>,
    /// The fit failed and `alpha` is the previous estimate.
    pub fallback: bool,
}

/// Residual objective `|r_stat|² + |r_comp|² + eps |alpha - alpha_prev|²`.
pub fn fit_objective(
    fit: &FitProblem,
    alpha: &WeightVector,
    lambda: &DVector<f64>,
    nu: &DVector<f64>,
    alpha_prev: &WeightVector,
    regularization: f64,
) -> f64 {
    let st = stationarity_residual(alpha, lambda, nu, fit);
    let cp = complementarity_residual(lambda, fit);
    let pull: f64 = alpha
        .as_array()
        .iter()
        .zip(alpha_prev.as_array())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    st.norm_squared() + cp.norm_squared() + regularization * pull
}

/// Solves the residual-minimization QP over `(alpha, lambda, nu)`.
pub fn impute_from_fit(fit: &FitProblem, alpha_prev: &WeightVector, cfg: &ImputationConfig) -> ImputationResult {
    let nl = fit.num_lambda();
    let nn = fit.num_nu();
    let nz = 3 + nl + nn;
    let m = fit.stationarity_matrix();
    let mut h = m.transpose() * &m * 2.0;
    let mut f = DVector::zeros(nz);
    for i in 0..3 {
        h[(i, i)] += 2.0 * cfg.regularization;
        f[i] = -2.0 * cfg.regularization * alpha_prev.as_array()[i];
    }
    for j in 0..nl {
        h[(3 + j, 3 + j)] += 2.0 * fit.ineq_values[j].powi(2);
    }
    let mut lb = DVector::from_element(nz, f64::NEG_INFINITY);
    let mut ub = DVector::from_element(nz, f64::INFINITY);
    for i in 0..3 {
        lb[i] = 0.0;
        ub[i] = 1.0;
    }
    for j in 0..nl {
        lb[3 + j] = 0.0;
        if fit.ineq_values[j] < -cfg.inactive_slack {
            ub[3 + j] = 0.0;
        }
    }
    let mut a_eq = DMatrix::zeros(1, nz);
    for i in 0..3 {
        a_eq[(0, i)] = 1.0;
    }
    let qp = QpProblem::new(h, f)
        .with_eq(a_eq, DVector::from_element(1, 1.0))
        .with_bounds(lb, ub);

    let fallback = || ImputationResult {
        alpha: *alpha_prev,
        residual_norm: f64::NAN,
        lambda: DVector::zeros(nl),
        nu: DVector::zeros(nn),
        fallback: true,
    };
    let sol = match solve_qp(&qp, None) {
        Ok(s) if s.status == QpStatus::Optimal => s,
        _ => return fallback(),
    };
    let alpha = WeightVector::new(sol.x[0], sol.x[1], sol.x[2]).project_simplex_roundoff();
    let lambda = DVector::from_iterator(nl, (0..nl).map(|j| sol.x[3 + j].max(0.0)));
    let nu = sol.x.rows(3 + nl, nn).into_owned();
    let residual_norm = (stationarity_residual(&alpha, &lambda, &nu, fit).norm_squared()
        + complementarity_residual(&lambda, fit).norm_squared())
    .sqrt();
    ImputationResult {
        alpha,
        residual_norm,
        lambda,
        nu,
        fallback: false,
    }
}

pub fn impute_weights(
    window: &TrajectoryWindow,
    alpha_prev: &WeightVector,
    nv_model: &DiscreteModel,
    a_bounds: (f64, f64),
    cfg: &ImputationConfig,
) -> Result<ImputationResult, ImputationError> {
    let fit = build_fit_problem(window, cfg.dynamics, nv_model, a_bounds)?;
    Ok(impute_from_fit(&fit, alpha_prev, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ModelParams, NvControl, VehicleModels};
    use crate::qp::RowBuilder;

    fn models() -> VehicleModels {
        VehicleModels::new(ModelParams::default(), 0.4).unwrap()
    }

    fn window_from(states: Vec<NvState>, v_ref: f64, s0_ref: f64) -> TrajectoryWindow {
        let s_ref = (0..states.len()).map(|j| s0_ref + v_ref * 0.4 * j as f64).collect();
        TrajectoryWindow {
            states,
            ts: 0.4,
            s_ref,
            v_ref,
        }
    }

    #[test]
    fn on_reference_window_has_zero_gradients() {
        let states = (0..4)
            .map(|j| NvState { s: 12.0 * 0.4 * j as f64, v: 12.0, a: 0.0 })
            .collect();
        let w = window_from(states, 12.0, 0.0);
        let fit = build_fit_problem(&w, FitDynamics::Euler, &models().nv, (-4.0, 3.0)).unwrap();
        assert!(fit.basis_gradients.amax() == 0.0);
        assert!(fit.eq_values.amax() < 1e-12);
    }

    #[test]
    fn constant_speed_below_reference() {
        let states = (0..4)
            .map(|j| NvState { s: 10.0 * 0.4 * j as f64, v: 10.0, a: 0.0 })
            .collect();
        let w = window_from(states, 12.0, 0.0);
        let fit = build_fit_problem(&w, FitDynamics::Euler, &models().nv, (-4.0, 3.0)).unwrap();
        for j in 0..3 {
            assert_eq!(fit.basis_gradients[(3 * j + 1, 1)], -4.0);
            assert_eq!(fit.basis_gradients[(3 * j + 2, 2)], 0.0);
        }
        assert!(fit.basis_gradients.column(1).iter().all(|g| *g <= 0.0));
    }

    #[test]
    fn plant_data_nearly_satisfies_reduced_rows() {
        let m = models();
        let mut x = NvState { s: 0.0, v: 10.0, a: 0.5 };
        let mut states = vec![x];
        for u in [2.0, -1.0, 1.5] {
            x = m.step_nv(&x, &NvControl { u });
            states.push(x);
        }
        let w = window_from(states, 12.0, 0.0);
        let euler = build_fit_problem(&w, FitDynamics::Euler, &m.nv, (-4.0, 3.0)).unwrap();
        // Euler against the sampled lag model: error of order Ts² times the jerk scale.
        assert!(euler.eq_values.amax() < 0.4 * 0.4 * 4.0);
        let exact = build_fit_problem(&w, FitDynamics::ExactLag, &m.nv, (-4.0, 3.0)).unwrap();
        assert!(exact.eq_values.amax() < 1e-10);
    }

    #[test]
    fn short_window_is_rejected() {
        let w = window_from(vec![NvState::default()], 12.0, 0.0);
        assert_eq!(
            build_fit_problem(&w, FitDynamics::Euler, &models().nv, (-4.0, 3.0)),
            Err(ImputationError::WindowTooShort(1))
        );
    }

    fn sample_fit() -> FitProblem {
        let states = vec![
            NvState { s: 0.0, v: 10.0, a: 0.0 },
            NvState { s: 4.1, v: 10.4, a: 1.1 },
            NvState { s: 8.4, v: 10.9, a: 1.3 },
            NvState { s: 12.9, v: 11.3, a: 0.9 },
        ];
        build_fit_problem(&window_from(states, 12.0, 0.0), FitDynamics::Euler, &models().nv, (-4.0, 3.0)).unwrap()
    }

    #[test]
    fn residual_is_linear() {
        let fit = sample_fit();
        let zero = stationarity_residual(
            &WeightVector::new(0.0, 0.0, 0.0),
            &DVector::zeros(fit.num_lambda()),
            &DVector::zeros(fit.num_nu()),
            &fit,
        );
        assert_eq!(zero.amax(), 0.0);
        let alpha = WeightVector::new(0.2, 0.5, 0.3);
        let lambda = DVector::from_fn(fit.num_lambda(), |i, _| 0.1 * i as f64);
        let nu = DVector::from_fn(fit.num_nu(), |i, _| 1.0 - 0.3 * i as f64);
        let one = stationarity_residual(&alpha, &lambda, &nu, &fit);
        let alpha2 = WeightVector::new(0.4, 1.0, 0.6);
        let two = stationarity_residual(&alpha2, &(&lambda * 2.0), &(&nu * 2.0), &fit);
        assert!((two - one * 2.0).amax() < 1e-12);
    }

    #[test]
    fn degenerate_window_keeps_previous_estimate() {
        let states = (0..4)
            .map(|j| NvState { s: 12.0 * 0.4 * j as f64, v: 12.0, a: 0.0 })
            .collect();
        let w = window_from(states, 12.0, 0.0);
        let prev = WeightVector::new(0.1, 0.7, 0.2);
        let res = impute_weights(&w, &prev, &models().nv, (-4.0, 3.0), &ImputationConfig::default()).unwrap();
        assert!(res.alpha.linf_distance(&prev) < 1e-9);
    }

    #[test]
    fn never_worse_than_previous_estimate() {
        let fit = sample_fit();
        let cfg = ImputationConfig::default();
        let prev = WeightVector::uniform();
        let res = impute_from_fit(&fit, &prev, &cfg);
        assert!(res.alpha.is_on_simplex(1e-12));
        let got = fit_objective(&fit, &res.alpha, &res.lambda, &res.nu, &prev, cfg.regularization);
        let trivial = fit_objective(
            &fit,
            &prev,
            &DVector::zeros(fit.num_lambda()),
            &DVector::zeros(fit.num_nu()),
            &prev,
            cfg.regularization,
        );
        assert!(got <= trivial + 1e-12);
    }

    /// Solves the fitted forward problem for known weights and checks that
    /// the solver's own multipliers zero the residual.
    #[test]
    fn exact_forward_optimum_has_zero_residual() {
        let alpha = WeightVector::new(0.2, 0.5, 0.3);
        let x0 = NvState { s: 0.0, v: 10.0, a: 0.8 };
        let r = 3;
        let ts = 0.4;
        let v_ref = 12.0;
        let s_ref: Vec<f64> = (0..=r).map(|j| 1.0 + v_ref * ts * j as f64).collect();
        for dynamics in [FitDynamics::Euler, FitDynamics::ExactLag] {
            // Placeholder window only used to read off the constraint structure.
            let mut w = window_from(vec![x0; r + 1], v_ref, 1.0);
            w.s_ref = s_ref.clone();
            let (a_lo, a_hi) = (-4.0, 0.5);
            let shape = build_fit_problem(&w, dynamics, &models().nv, (a_lo, a_hi)).unwrap();

            let n = 3 * r;
            let mut h = DMatrix::zeros(n, n);
            let mut f = DVector::zeros(n);
            for j in 0..r {
                h[(3 * j, 3 * j)] = 2.0 * alpha.alpha_s;
                f[3 * j] = -2.0 * alpha.alpha_s * s_ref[j + 1];
                h[(3 * j + 1, 3 * j + 1)] = 2.0 * alpha.alpha_v;
                f[3 * j + 1] = -2.0 * alpha.alpha_v * v_ref;
                h[(3 * j + 2, 3 * j + 2)] = 2.0 * alpha.alpha_a;
            }
            // Equality rows G x = c, where c collects the known first sample.
            let g = shape.eq_gradients.clone();
            let c = &g * stacked(&w) - &shape.eq_values;
            let mut rows = RowBuilder::new(n);
            for j in 0..r {
                let mut lo = vec![0.0; n];
                lo[3 * j + 2] = -1.0;
                rows.push(&lo, -a_lo);
                let mut hi = vec![0.0; n];
                hi[3 * j + 2] = 1.0;
                rows.push(&hi, a_hi);
            }
            let (a_in, b_in) = rows.build();
            let qp = QpProblem::new(h, f).with_eq(g, c).with_ineq(a_in, b_in);
            let sol = solve_qp(&qp, None).unwrap();
            assert!(sol.is_optimal());

            let mut states = vec![x0];
            for j in 0..r {
                states.push(NvState::from_slice(&sol.x.as_slice()[3 * j..3 * j + 3]));
            }
            let mut win = window_from(states, v_ref, 1.0);
            win.s_ref = s_ref.clone();
            let fit = build_fit_problem(&win, dynamics, &models().nv, (a_lo, a_hi)).unwrap();
            assert!(fit.eq_values.amax() < 1e-9);
            // The upper acceleration bound is active somewhere for this start.
            assert!(sol.lambda.amax() > 0.0);
            let st = stationarity_residual(&alpha, &sol.lambda, &sol.nu, &fit);
            assert!(st.norm() <= 1e-6, "{dynamics:?}: {}", st.norm());

            let res = impute_from_fit(&fit, &WeightVector::uniform(), &ImputationConfig { dynamics, ..Default::default() });
            assert!(res.residual_norm <= 1e-3, "{dynamics:?}: {}", res.residual_norm);
        }
    }

    fn stacked(w: &TrajectoryWindow) -> DVector<f64> {
        DVector::from_iterator(3 * w.steps(), w.states[1..].iter().flat_map(|x| [x.s, x.v, x.a]))
    }
}
