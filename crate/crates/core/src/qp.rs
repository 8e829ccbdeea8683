//! Dense convex quadratic programming.
//!
//! Solves
//!
//! ```text
//!     minimize    1/2 x' H x + f' x
//!     subject to  A_eq x  = b_eq
//!                 A_in x <= b_in
//!                 lb <= x <= ub
//! ```
//!
//! with the dual active-set method of Goldfarb and Idnani. The method starts
//! from the unconstrained minimizer and adds violated constraints one at a
//! time while keeping the multipliers dual feasible, so no phase-one problem
//! is needed and infeasibility shows up as a dual ray. Factors of the working
//! set are kept in the `J = L^-T Q`, `R` form and updated with Givens
//! rotations.
//!
//! A positive semidefinite `H` is handled by a proximal-point outer loop: each
//! pass solves the strictly convex problem with `H + rho I` centred at the
//! previous iterate. The stationarity residual of the original problem is
//! exactly `rho * |x_k+1 - x_k|`, which is the stopping test.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("Hessian is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NonConvex { min_eigenvalue: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite problem data in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    /// Lower bounds; `-inf` marks a free side.
    pub lb: DVector<f64>,
    /// Upper bounds; `+inf` marks a free side.
    pub ub: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem; add constraints with the `with_*` builders.
    pub fn new(h: DMatrix<f64>, f: DVector<f64>) -> Self {
        let n = f.len();
        Self {
            h,
            f,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
            lb: DVector::from_element(n, f64::NEG_INFINITY),
            ub: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn with_eq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_ineq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    pub fn with_bounds(mut self, lb: DVector<f64>, ub: DVector<f64>) -> Self {
        self.lb = lb;
        self.ub = ub;
        self
    }

    pub fn num_vars(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.f.len();
        let dim = |ok: bool, msg: String| if ok { Ok(()) } else { Err(QpError::Dimension(msg)) };
        dim(
            self.h.nrows() == n && self.h.ncols() == n,
            format!("H is {}x{}, expected {n}x{n}", self.h.nrows(), self.h.ncols()),
        )?;
        dim(
            self.a_eq.ncols() == n && self.a_eq.nrows() == self.b_eq.len(),
            format!(
                "A_eq is {}x{} with {} right-hand sides",
                self.a_eq.nrows(),
                self.a_eq.ncols(),
                self.b_eq.len()
            ),
        )?;
        dim(
            self.a_in.ncols() == n && self.a_in.nrows() == self.b_in.len(),
            format!(
                "A_in is {}x{} with {} right-hand sides",
                self.a_in.nrows(),
                self.a_in.ncols(),
                self.b_in.len()
            ),
        )?;
        dim(
            self.lb.len() == n && self.ub.len() == n,
            format!("bounds have lengths {}/{}, expected {n}", self.lb.len(), self.ub.len()),
        )?;
        fn finite<'a>(mut it: impl Iterator<Item = &'a f64>) -> bool {
            it.all(|x| x.is_finite())
        }
        if !finite(self.h.iter()) {
            return Err(QpError::NonFinite("H"));
        }
        if !finite(self.f.iter()) {
            return Err(QpError::NonFinite("f"));
        }
        if !finite(self.a_eq.iter().chain(self.b_eq.iter())) {
            return Err(QpError::NonFinite("equality constraints"));
        }
        if !finite(self.a_in.iter().chain(self.b_in.iter())) {
            return Err(QpError::NonFinite("inequality constraints"));
        }
        if self.lb.iter().any(|x| x.is_nan() || *x == f64::INFINITY)
            || self.ub.iter().any(|x| x.is_nan() || *x == f64::NEG_INFINITY)
        {
            return Err(QpError::NonFinite("bounds"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConstraintId {
    Eq(usize),
    Ineq(usize),
    Lower(usize),
    Upper(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterLimit,
}

/// Farkas-type proof of infeasibility.
///
/// Writing every inequality as `g' x <= h` (bounds included) and every
/// equality as `a' x = b`, the multipliers satisfy `sum m_c g_c = 0` and
/// `sum m_c h_c < 0`, with `m_c >= 0` on inequalities.
#[derive(Debug, Clone, PartialEq)]
pub struct InfeasibilityCertificate {
    pub multipliers: Vec<(ConstraintId, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Duals of `A_in x <= b_in`.
    pub lambda: DVector<f64>,
    /// Duals of `A_eq x = b_eq`.
    pub nu: DVector<f64>,
    pub lambda_lb: DVector<f64>,
    pub lambda_ub: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub active_set: Vec<ConstraintId>,
    pub certificate: Option<InfeasibilityCertificate>,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WarmStart {
    /// Primal guess; used as the first proximal centre for semidefinite problems.
    pub x: Option<DVector<f64>>,
    /// Constraints expected to be active; they are tried first when violated.
    pub active: Vec<ConstraintId>,
}

impl WarmStart {
    pub fn from_solution(sol: &QpSolution) -> Self {
        Self {
            x: Some(sol.x.clone()),
            active: sol.active_set.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub feas_tol: f64,
    pub opt_tol: f64,
    /// Iteration cap is `max_iter_factor * (n + m)`.
    pub max_iter_factor: usize,
    pub max_prox_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            feas_tol: 1e-7,
            opt_tol: 1e-6,
            max_iter_factor: 50,
            max_prox_iter: 2000,
        }
    }
}

/// Accumulates constraint rows before they are packed into a matrix.
#[derive(Debug, Clone, Default)]
pub struct RowBuilder {
    n: usize,
    data: Vec<f64>,
    rhs: Vec<f64>,
}

impl RowBuilder {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            data: Vec::new(),
            rhs: Vec::new(),
        }
    }

    /// Appends `row * x (op) rhs`; `row` must have `n` entries.
    pub fn push(&mut self, row: &[f64], rhs: f64) {
        assert_eq!(row.len(), self.n, "row length");
        self.data.extend_from_slice(row);
        self.rhs.push(rhs);
    }

    pub fn len(&self) -> usize {
        self.rhs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rhs.is_empty()
    }

    pub fn build(self) -> (DMatrix<f64>, DVector<f64>) {
        let m = self.rhs.len();
        (
            DMatrix::from_row_slice(m, self.n, &self.data),
            DVector::from_vec(self.rhs),
        )
    }
}

pub fn solve_qp(p: &QpProblem, warm: Option<&WarmStart>) -> Result<QpSolution, QpError> {
    Ok(QpSolver::new(p, QpSettings::default())?.solve(warm))
}

/// Norms of the four KKT residual groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

/// Euclidean norms of the stationarity, primal feasibility, dual feasibility
/// and complementarity residuals of `sol` for `p`.
pub fn kkt_residuals(p: &QpProblem, sol: &QpSolution) -> KktResiduals {
    let x = &sol.x;
    let mut grad = &p.h * x + &p.f;
    if p.a_eq.nrows() > 0 {
        grad += p.a_eq.transpose() * &sol.nu;
    }
    if p.a_in.nrows() > 0 {
        grad += p.a_in.transpose() * &sol.lambda;
    }
    grad -= &sol.lambda_lb;
    grad += &sol.lambda_ub;

    let mut primal = 0.0;
    let mut comp = 0.0;
    let mut dual = 0.0;
    if p.a_eq.nrows() > 0 {
        primal += (&p.a_eq * x - &p.b_eq).norm_squared();
    }
    if p.a_in.nrows() > 0 {
        let g = &p.a_in * x - &p.b_in;
        for (gi, li) in g.iter().zip(sol.lambda.iter()) {
            primal += gi.max(0.0).powi(2);
            dual += li.min(0.0).powi(2);
            comp += (gi * li).powi(2);
        }
    }
    for i in 0..x.len() {
        for (g, l) in [
            (p.lb[i] - x[i], sol.lambda_lb[i]),
            (x[i] - p.ub[i], sol.lambda_ub[i]),
        ] {
            if g.is_finite() {
                primal += g.max(0.0).powi(2);
                comp += (g * l).powi(2);
            } else if l != 0.0 {
                comp += f64::INFINITY;
            }
            dual += l.min(0.0).powi(2);
        }
    }
    KktResiduals {
        stationarity: grad.norm(),
        primal: primal.sqrt(),
        dual: dual.sqrt(),
        complementarity: comp.sqrt(),
    }
}

/// Reusable solver workspace for one problem.
///
/// The Hessian factorization and the constraint rows are prepared once;
/// [`QpSolver::solve_with_bounds`] lets branch-and-bound tighten variable
/// bounds per node without refactoring.
#[derive(Debug, Clone)]
pub struct QpSolver {
    n: usize,
    m_eq: usize,
    m_in: usize,
    h: DMatrix<f64>,
    f: Vec<f64>,
    /// Row-major equality rows.
    eq_rows: Vec<f64>,
    b_eq: Vec<f64>,
    /// Row-major inequality rows.
    in_rows: Vec<f64>,
    in_norms: Vec<f64>,
    b_in: Vec<f64>,
    lb: Vec<f64>,
    ub: Vec<f64>,
    /// Proximal weight; zero when `H` is positive definite.
    rho: f64,
    /// Column-major `L^-T` for `H + rho I = L L'`.
    j0: Vec<f64>,
    settings: QpSettings,
}

#[derive(Debug, Clone, Copy)]
struct Active {
    id: usize,
    sign: f64,
    is_eq: bool,
}

struct DualResult {
    x: Vec<f64>,
    active: Vec<Active>,
    u: Vec<f64>,
    status: QpStatus,
    iterations: usize,
    certificate: Option<Vec<(usize, f64)>>,
}

impl QpSolver {
    pub fn new(p: &QpProblem, settings: QpSettings) -> Result<Self, QpError> {
        p.validate()?;
        let n = p.num_vars();
        let h = (&p.h + p.h.transpose()) * 0.5;
        let scale = h.diagonal().iter().fold(1.0_f64, |m, d| m.max(d.abs()));

        let mut rho = 0.0;
        let chol = h.clone().cholesky().filter(|c| {
            let l = c.l_dirty();
            let min_pivot = (0..n).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
            n == 0 || min_pivot >= 1e-10 * scale
        });
        let chol = match chol {
            Some(c) => c,
            None => {
                let min_eig = SymmetricEigen::new(h.clone())
                    .eigenvalues
                    .iter()
                    .fold(f64::INFINITY, |m, e| m.min(*e));
                if min_eig < -1e-6 {
                    return Err(QpError::NonConvex {
                        min_eigenvalue: min_eig,
                    });
                }
                // Round-off negative curvature is absorbed into the proximal shift.
                rho = 1e-6 * scale + (-min_eig).max(0.0);
                (&h + DMatrix::identity(n, n) * rho)
                    .cholesky()
                    .ok_or(QpError::NonConvex {
                        min_eigenvalue: min_eig,
                    })?
            }
        };
        let l = chol.l();
        let l_inv = l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| QpError::Dimension("singular Cholesky factor".into()))?;
        let j = l_inv.transpose();

        let m_eq = p.a_eq.nrows();
        let m_in = p.a_in.nrows();
        let mut eq_rows = Vec::with_capacity(m_eq * n);
        for r in 0..m_eq {
            eq_rows.extend(p.a_eq.row(r).iter());
        }
        let mut in_rows = Vec::with_capacity(m_in * n);
        let mut in_norms = Vec::with_capacity(m_in);
        for r in 0..m_in {
            let row = p.a_in.row(r);
            in_norms.push(row.norm().max(1e-300));
            in_rows.extend(row.iter());
        }
        Ok(Self {
            n,
            m_eq,
            m_in,
            h,
            f: p.f.iter().copied().collect(),
            eq_rows,
            b_eq: p.b_eq.iter().copied().collect(),
            in_rows,
            in_norms,
            b_in: p.b_in.iter().copied().collect(),
            lb: p.lb.iter().copied().collect(),
            ub: p.ub.iter().copied().collect(),
            rho,
            j0: j.as_slice().to_vec(),
            settings,
        })
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    pub fn is_strictly_convex(&self) -> bool {
        self.rho == 0.0
    }

    pub fn lower_bounds(&self) -> &[f64] {
        &self.lb
    }

    pub fn upper_bounds(&self) -> &[f64] {
        &self.ub
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        0.5 * xv.dot(&(&self.h * &xv)) + self.f.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn solve(&self, warm: Option<&WarmStart>) -> QpSolution {
        self.solve_with_bounds(&self.lb, &self.ub, warm)
    }

    /// Solves with the given bounds in place of the problem's own.
    pub fn solve_with_bounds(&self, lb: &[f64], ub: &[f64], warm: Option<&WarmStart>) -> QpSolution {
        let n = self.n;
        let hint: Vec<usize> = warm
            .map(|w| w.active.iter().filter_map(|c| self.global_index(*c)).collect())
            .unwrap_or_default();

        for i in 0..n {
            if lb[i] > ub[i] {
                // Crossed bounds are their own certificate.
                let cert = vec![(self.m_eq + self.m_in + i, 1.0), (self.m_eq + self.m_in + n + i, 1.0)];
                return self.package(
                    lb,
                    ub,
                    DualResult {
                        x: vec![0.0; n],
                        active: Vec::new(),
                        u: Vec::new(),
                        status: QpStatus::Infeasible,
                        iterations: 0,
                        certificate: Some(cert),
                    },
                );
            }
        }

        if self.rho == 0.0 {
            let res = self.dual_active_set(&self.f, lb, ub, &hint);
            return self.package(lb, ub, res);
        }

        let mut center: Vec<f64> = match warm.and_then(|w| w.x.as_ref()) {
            Some(x) if x.len() == n => x.iter().copied().collect(),
            _ => vec![0.0; n],
        };
        let mut hint = hint;
        let mut total_iter = 0;
        let mut last: Option<DualResult> = None;
        let mut prev_step: Option<f64> = None;
        for _ in 0..self.settings.max_prox_iter {
            let lin: Vec<f64> = self
                .f
                .iter()
                .zip(&center)
                .map(|(f, c)| f - self.rho * c)
                .collect();
            let mut res = self.dual_active_set(&lin, lb, ub, &hint);
            total_iter += res.iterations;
            res.iterations = total_iter;
            if res.status != QpStatus::Optimal {
                return self.package(lb, ub, res);
            }
            let step = res
                .x
                .iter()
                .zip(&center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let direction: Vec<f64> = res.x.iter().zip(&center).map(|(a, b)| a - b).collect();
            if let Some(prev) = prev_step {
                if step >= prev * (1.0 - 1e-9) && step > 0.0 && self.is_recession_direction(&direction) {
                    center.clone_from(&res.x);
                    res.status = QpStatus::Unbounded;
                    return self.package(lb, ub, res);
                }
            }
            prev_step = Some(step);
            let xnorm = res.x.iter().map(|v| v * v).sum::<f64>().sqrt();
            center.clone_from(&res.x);
            hint = res.active.iter().map(|a| a.id).collect();
            if self.rho * step <= 1e-3 * self.settings.opt_tol {
                return self.package(lb, ub, res);
            }
            if xnorm > 1e12 {
                res.status = QpStatus::Unbounded;
                return self.package(lb, ub, res);
            }
            last = Some(res);
        }
        let mut res = last.expect("at least one proximal pass");
        res.status = QpStatus::IterLimit;
        self.package(lb, ub, res)
    }

    /// Zero-curvature descent direction of the objective.
    fn is_recession_direction(&self, d: &[f64]) -> bool {
        let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dn == 0.0 {
            return false;
        }
        let dv = DVector::from_column_slice(d);
        let hd = (&self.h * &dv).norm();
        let fd: f64 = self.f.iter().zip(d).map(|(a, b)| a * b).sum();
        hd <= 1e-9 * dn && fd < 0.0
    }

    fn global_index(&self, c: ConstraintId) -> Option<usize> {
        let base_in = self.m_eq;
        let base_lb = self.m_eq + self.m_in;
        let base_ub = base_lb + self.n;
        match c {
            ConstraintId::Eq(i) if i < self.m_eq => Some(i),
            ConstraintId::Ineq(i) if i < self.m_in => Some(base_in + i),
            ConstraintId::Lower(i) if i < self.n => Some(base_lb + i),
            ConstraintId::Upper(i) if i < self.n => Some(base_ub + i),
            _ => None,
        }
    }

    fn constraint_id(&self, g: usize) -> ConstraintId {
        let base_lb = self.m_eq + self.m_in;
        if g < self.m_eq {
            ConstraintId::Eq(g)
        } else if g < base_lb {
            ConstraintId::Ineq(g - self.m_eq)
        } else if g < base_lb + self.n {
            ConstraintId::Lower(g - base_lb)
        } else {
            ConstraintId::Upper(g - base_lb - self.n)
        }
    }

    /// `(row, sign)` view of constraint `g` in the `n' x >= b` convention.
    fn row(&self, g: usize) -> Row<'_> {
        let n = self.n;
        let base_lb = self.m_eq + self.m_in;
        if g < self.m_eq {
            Row::Dense(&self.eq_rows[g * n..(g + 1) * n], 1.0)
        } else if g < base_lb {
            let r = g - self.m_eq;
            Row::Dense(&self.in_rows[r * n..(r + 1) * n], -1.0)
        } else if g < base_lb + n {
            Row::Unit(g - base_lb, 1.0)
        } else {
            Row::Unit(g - base_lb - n, -1.0)
        }
    }

    /// Right-hand side in the `n' x >= b` convention (before equality sign flips).
    fn rhs(&self, g: usize, lb: &[f64], ub: &[f64]) -> f64 {
        let n = self.n;
        let base_lb = self.m_eq + self.m_in;
        if g < self.m_eq {
            self.b_eq[g]
        } else if g < base_lb {
            -self.b_in[g - self.m_eq]
        } else if g < base_lb + n {
            lb[g - base_lb]
        } else {
            -ub[g - base_lb - n]
        }
    }

    fn row_dot(&self, g: usize, v: &[f64]) -> f64 {
        match self.row(g) {
            Row::Dense(r, s) => s * dot(r, v),
            Row::Unit(i, s) => s * v[i],
        }
    }

    fn dual_active_set(&self, lin: &[f64], lb: &[f64], ub: &[f64], hint: &[usize]) -> DualResult {
        let n = self.n;
        let m_total = self.m_eq + self.m_in + 2 * n;
        let max_iter = self.settings.max_iter_factor * (n + self.m_eq + self.m_in).max(1);
        let feas_tol = self.settings.feas_tol;

        let mut j = self.j0.clone();
        let mut r = vec![0.0; n * n];
        let mut active: Vec<Active> = Vec::with_capacity(n);
        let mut u: Vec<f64> = Vec::with_capacity(n);
        let mut in_active = vec![false; m_total];
        let mut eq_done = vec![false; self.m_eq];
        let mut hinted = vec![false; m_total];
        for &h in hint {
            hinted[h] = true;
        }
        let finite_bound: Vec<bool> = (0..2 * n)
            .map(|k| if k < n { lb[k].is_finite() } else { ub[k - n].is_finite() })
            .collect();

        // Unconstrained minimizer x = -J J' lin.
        let mut x = vec![0.0; n];
        {
            let jt_lin: Vec<f64> = (0..n).map(|c| dot(&j[c * n..(c + 1) * n], lin)).collect();
            for c in 0..n {
                let col = &j[c * n..(c + 1) * n];
                for i in 0..n {
                    x[i] -= col[i] * jt_lin[c];
                }
            }
        }

        let mut d = vec![0.0; n];
        let mut z = vec![0.0; n];
        let mut rvec = vec![0.0; n];
        let mut iterations = 0;

        loop {
            // Pick the next constraint to add.
            let mut pick: Option<(usize, f64)> = eq_done.iter().position(|d| !d).map(|e| {
                let s = dot(&self.eq_rows[e * n..(e + 1) * n], &x) - self.b_eq[e];
                (e, if s <= 0.0 { 1.0 } else { -1.0 })
            });
            if pick.is_none() {
                let mut best: Option<(usize, f64, bool)> = None;
                for g in self.m_eq..m_total {
                    if in_active[g] {
                        continue;
                    }
                    let (viol, norm) = if g < self.m_eq + self.m_in {
                        let k = g - self.m_eq;
                        let s = self.b_in[k] - dot(&self.in_rows[k * n..(k + 1) * n], &x);
                        (s, self.in_norms[k])
                    } else {
                        let k = g - self.m_eq - self.m_in;
                        if !finite_bound[k] {
                            continue;
                        }
                        let s = if k < n { x[k] - lb[k] } else { ub[k - n] - x[k - n] };
                        (s, 1.0)
                    };
                    if viol >= -feas_tol * norm.max(1.0) {
                        continue;
                    }
                    let score = viol / norm;
                    let better = match best {
                        None => true,
                        Some((_, bs, bh)) => {
                            (hinted[g] && !bh) || (hinted[g] == bh && score < bs)
                        }
                    };
                    if better {
                        best = Some((g, score, hinted[g]));
                    }
                }
                match best {
                    Some((g, _, _)) => pick = Some((g, 1.0)),
                    None => {
                        return DualResult {
                            x,
                            active,
                            u,
                            status: QpStatus::Optimal,
                            iterations,
                            certificate: None,
                        }
                    }
                }
            }
            let (p, psign) = pick.unwrap();
            let p_is_eq = p < self.m_eq;
            let b_p = psign * self.rhs(p, lb, ub);
            let mut u_p = 0.0;

            loop {
                iterations += 1;
                if iterations > max_iter {
                    return DualResult {
                        x,
                        active,
                        u,
                        status: QpStatus::IterLimit,
                        iterations,
                        certificate: None,
                    };
                }
                let q = active.len();
                // d = J' n_p
                match self.row(p) {
                    Row::Dense(row, s) => {
                        let s = s * psign;
                        for c in 0..n {
                            d[c] = s * dot(&j[c * n..(c + 1) * n], row);
                        }
                    }
                    Row::Unit(i, s) => {
                        for c in 0..n {
                            d[c] = s * j[c * n + i];
                        }
                    }
                }
                // z = J2 d2
                z.iter_mut().for_each(|v| *v = 0.0);
                for c in q..n {
                    if d[c] != 0.0 {
                        let col = &j[c * n..(c + 1) * n];
                        for i in 0..n {
                            z[i] += d[c] * col[i];
                        }
                    }
                }
                // r = R^-1 d1
                for i in (0..q).rev() {
                    let mut acc = d[i];
                    for k in i + 1..q {
                        acc -= r[k * n + i] * rvec[k];
                    }
                    rvec[i] = acc / r[i * n + i];
                }

                // Partial step: largest dual step keeping inequality multipliers >= 0.
                let mut t1 = f64::INFINITY;
                let mut drop_k = usize::MAX;
                for k in 0..q {
                    if !active[k].is_eq && rvec[k] > 0.0 {
                        let ratio = u[k] / rvec[k];
                        if ratio < t1 {
                            t1 = ratio;
                            drop_k = k;
                        }
                    }
                }
                let d2_sq: f64 = d[q..n].iter().map(|v| v * v).sum();
                let d_sq: f64 = d.iter().map(|v| v * v).sum();
                let s_p = psign * self.row_dot(p, &x) - b_p;
                let dependent = d2_sq <= 1e-14 * d_sq.max(1e-300);
                let t2 = if dependent {
                    f64::INFINITY
                } else {
                    let zn = psign * self.row_dot(p, &z);
                    (-s_p / zn).max(0.0)
                };

                if dependent && p_is_eq && s_p.abs() <= feas_tol * (1.0 + b_p.abs()) {
                    // Redundant equality.
                    eq_done[p] = true;
                    break;
                }

                let t = t1.min(t2);
                if t == f64::INFINITY {
                    // Infeasible: n_p is a nonpositive combination of the active inequality normals.
                    let mut cert = vec![(p, psign)];
                    for k in 0..q {
                        cert.push((active[k].id, -rvec[k] * active[k].sign));
                    }
                    return DualResult {
                        x,
                        active,
                        u,
                        status: QpStatus::Infeasible,
                        iterations,
                        certificate: Some(cert),
                    };
                }

                if t2 == f64::INFINITY {
                    for k in 0..q {
                        u[k] -= t * rvec[k];
                    }
                    u_p += t;
                    self.drop_constraint(drop_k, &mut active, &mut u, &mut r, &mut j, &mut in_active);
                    continue;
                }

                for i in 0..n {
                    x[i] += t * z[i];
                }
                for k in 0..q {
                    u[k] -= t * rvec[k];
                }
                u_p += t;

                if t2 <= t1 {
                    self.add_constraint(&mut d, q, &mut r, &mut j);
                    active.push(Active {
                        id: p,
                        sign: psign,
                        is_eq: p_is_eq,
                    });
                    u.push(u_p);
                    in_active[p] = true;
                    if p_is_eq {
                        eq_done[p] = true;
                    }
                    break;
                }
                self.drop_constraint(drop_k, &mut active, &mut u, &mut r, &mut j, &mut in_active);
            }
        }
    }

    /// Appends `d = J' n_p` to the factorization, rotating `d[q..]` onto `d[q]`.
    fn add_constraint(&self, d: &mut [f64], q: usize, r: &mut [f64], j: &mut [f64]) {
        let n = self.n;
        for c in (q + 1..n).rev() {
            if d[c] == 0.0 {
                continue;
            }
            let (cs, sn, h) = givens(d[c - 1], d[c]);
            d[c - 1] = h;
            d[c] = 0.0;
            let (left, right) = j.split_at_mut(c * n);
            let col_a = &mut left[(c - 1) * n..c * n];
            let col_b = &mut right[..n];
            for i in 0..n {
                let a = col_a[i];
                let b = col_b[i];
                col_a[i] = cs * a + sn * b;
                col_b[i] = -sn * a + cs * b;
            }
        }
        for i in 0..=q {
            r[q * n + i] = d[i];
        }
    }

    fn drop_constraint(
        &self,
        k: usize,
        active: &mut Vec<Active>,
        u: &mut Vec<f64>,
        r: &mut [f64],
        j: &mut [f64],
        in_active: &mut [bool],
    ) {
        let n = self.n;
        let q = active.len();
        in_active[active[k].id] = false;
        active.remove(k);
        u.remove(k);
        // Shift R columns left.
        for c in k..q - 1 {
            for i in 0..=c + 1 {
                r[c * n + i] = r[(c + 1) * n + i];
            }
        }
        for i in 0..n {
            r[(q - 1) * n + i] = 0.0;
        }
        // Restore triangularity with row rotations, mirrored on the columns of J.
        for c in k..q - 1 {
            let a = r[c * n + c];
            let b = r[c * n + c + 1];
            if b == 0.0 {
                continue;
            }
            let (cs, sn, h) = givens(a, b);
            r[c * n + c] = h;
            r[c * n + c + 1] = 0.0;
            for col in c + 1..q - 1 {
                let ra = r[col * n + c];
                let rb = r[col * n + c + 1];
                r[col * n + c] = cs * ra + sn * rb;
                r[col * n + c + 1] = -sn * ra + cs * rb;
            }
            let (left, right) = j.split_at_mut((c + 1) * n);
            let col_a = &mut left[c * n..(c + 1) * n];
            let col_b = &mut right[..n];
            for i in 0..n {
                let a = col_a[i];
                let b = col_b[i];
                col_a[i] = cs * a + sn * b;
                col_b[i] = -sn * a + cs * b;
            }
        }
    }

    fn package(&self, lb: &[f64], ub: &[f64], res: DualResult) -> QpSolution {
        let n = self.n;
        let mut lambda = DVector::zeros(self.m_in);
        let mut nu = DVector::zeros(self.m_eq);
        let mut lambda_lb = DVector::zeros(n);
        let mut lambda_ub = DVector::zeros(n);
        let mut active_set = Vec::with_capacity(res.active.len());
        for (a, &ui) in res.active.iter().zip(&res.u) {
            let id = self.constraint_id(a.id);
            active_set.push(id);
            match id {
                ConstraintId::Eq(e) => nu[e] = -ui * a.sign,
                ConstraintId::Ineq(k) => lambda[k] = ui,
                ConstraintId::Lower(i) => lambda_lb[i] = ui,
                ConstraintId::Upper(i) => lambda_ub[i] = ui,
            }
        }
        let certificate = res.certificate.map(|c| InfeasibilityCertificate {
            multipliers: c
                .into_iter()
                .map(|(g, m)| {
                    let id = self.constraint_id(g);
                    let m = match id {
                        ConstraintId::Eq(_) => -m,
                        _ => m,
                    };
                    (id, m)
                })
                .collect(),
        });
        let _ = (lb, ub);
        let x = DVector::from_vec(res.x);
        let objective = if res.status == QpStatus::Infeasible {
            f64::INFINITY
        } else if res.status == QpStatus::Unbounded {
            f64::NEG_INFINITY
        } else {
            self.objective(x.as_slice())
        };
        QpSolution {
            x,
            lambda,
            nu,
            lambda_lb,
            lambda_ub,
            objective,
            status: res.status,
            iterations: res.iterations,
            active_set,
            certificate,
        }
    }
}

enum Row<'a> {
    Dense(&'a [f64], f64),
    Unit(usize, f64),
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}
