//! Brute-force oracles and random instance generators shared by the solver tests.
#![allow(dead_code)]

use aimpc_core::miqp::MiqpProblem;
use aimpc_core::qp::{solve_qp, QpProblem, QpStatus};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Best objective over all feasible KKT points of every equality-constrained
/// subproblem `{E x = e, G_S x = h_S}`. `None` when nothing is feasible.
pub fn qp_enumeration(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    e_rows: &DMatrix<f64>,
    e_rhs: &DVector<f64>,
    g_rows: &DMatrix<f64>,
    g_rhs: &DVector<f64>,
) -> Option<f64> {
    let n = f.len();
    let m = g_rows.nrows();
    assert!(m <= 12, "enumeration would explode");
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << m) {
        let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = e_rows.nrows() + rows.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        rhs.rows_mut(0, n).copy_from(&(-f));
        for r in 0..e_rows.nrows() {
            for c in 0..n {
                kkt[(n + r, c)] = e_rows[(r, c)];
                kkt[(c, n + r)] = e_rows[(r, c)];
            }
            rhs[n + r] = e_rhs[r];
        }
        for (i, &g) in rows.iter().enumerate() {
            let r = e_rows.nrows() + i;
            for c in 0..n {
                kkt[(n + r, c)] = g_rows[(g, c)];
                kkt[(c, n + r)] = g_rows[(g, c)];
            }
            rhs[n + r] = g_rhs[g];
        }
        let svd = kkt.clone().svd(true, true);
        let Ok(sol) = svd.solve(&rhs, 1e-10) else { continue };
        if (&kkt * &sol - &rhs).norm() > 1e-7 * (1.0 + rhs.norm()) {
            continue;
        }
        let x = sol.rows(0, n).into_owned();
        let feasible = (e_rows * &x - e_rhs).amax() <= 1e-7
            && (0..m).all(|i| (g_rows.row(i) * &x)[0] <= g_rhs[i] + 1e-7);
        if !feasible {
            continue;
        }
        let obj = 0.5 * x.dot(&(h * &x)) + f.dot(&x);
        best = Some(best.map_or(obj, |b: f64| b.min(obj)));
    }
    best
}

pub struct Instance {
    pub problem: QpProblem,
    pub g_rows: DMatrix<f64>,
    pub g_rhs: DVector<f64>,
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Positive definite instances use general inequalities; rank-deficient ones
/// get a full box so the optimal face is bounded.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let rank_deficient = rng.random_bool(0.3);
    let n = if rank_deficient {
        rng.random_range(1..=5)
    } else {
        rng.random_range(1..=12)
    };
    let (h, f) = if rank_deficient {
        let k = rng.random_range(0..n);
        let m = random_matrix(rng, k.max(1), n) * if k == 0 { 0.0 } else { 1.0 };
        (m.transpose() * &m, DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0)))
    } else {
        let m = random_matrix(rng, n, n);
        (
            m.transpose() * &m + DMatrix::identity(n, n) * 0.05,
            DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0)),
        )
    };
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let n_eq = if n >= 3 { rng.random_range(0..=1) } else { 0 };
    let a_eq = random_matrix(rng, n_eq, n);
    let b_eq = &a_eq * &x0;

    let box_rows = if rank_deficient { 2 * n } else { 0 };
    let n_in = rng.random_range(0..=(10 - box_rows).min(10));
    let a_in = random_matrix(rng, n_in, n);
    let infeasible_try = !rank_deficient && rng.random_bool(0.1);
    let b_in = if infeasible_try {
        DVector::from_fn(n_in, |_, _| rng.random_range(-1.5..0.5))
    } else {
        &a_in * &x0 + DVector::from_fn(n_in, |_, _| rng.random_range(0.0..1.0))
    };

    let mut problem = QpProblem::new(h, f)
        .with_eq(a_eq, b_eq)
        .with_ineq(a_in.clone(), b_in.clone());
    let mut g_rows = a_in;
    let mut g_rhs = b_in;
    if rank_deficient {
        let lb = DVector::from_element(n, -2.0);
        let ub = DVector::from_element(n, 2.0);
        problem = problem.with_bounds(lb, ub);
        let mut rows = DMatrix::zeros(g_rows.nrows() + 2 * n, n);
        let mut rhs = DVector::zeros(g_rhs.len() + 2 * n);
        rows.view_mut((0, 0), (g_rows.nrows(), n)).copy_from(&g_rows);
        rhs.rows_mut(0, g_rhs.len()).copy_from(&g_rhs);
        let base = g_rows.nrows();
        for i in 0..n {
            rows[(base + 2 * i, i)] = -1.0;
            rhs[base + 2 * i] = 2.0;
            rows[(base + 2 * i + 1, i)] = 1.0;
            rhs[base + 2 * i + 1] = 2.0;
        }
        g_rows = rows;
        g_rhs = rhs;
    }
    Instance {
        problem,
        g_rows,
        g_rhs,
    }
}

/// Minimum over every integer assignment inside `box_` of the continuous QP
/// with those variables fixed. `None` when every assignment is infeasible.
pub fn miqp_enumeration(p: &MiqpProblem, box_: &[(f64, f64)]) -> Option<f64> {
    let k = p.integer_set.len();
    let ranges: Vec<Vec<f64>> = box_
        .iter()
        .map(|&(lo, hi)| {
            let (lo, hi) = (lo.ceil() as i64, hi.floor() as i64);
            (lo..=hi).map(|v| v as f64).collect()
        })
        .collect();
    if ranges.iter().any(|r| r.is_empty()) {
        return None;
    }
    let mut idx = vec![0usize; k];
    let mut best: Option<f64> = None;
    loop {
        let mut lb = p.base.lb.clone();
        let mut ub = p.base.ub.clone();
        for (j, &var) in p.integer_set.iter().enumerate() {
            lb[var] = ranges[j][idx[j]];
            ub[var] = ranges[j][idx[j]];
        }
        let q = p.base.clone().with_bounds(lb, ub);
        let sol = solve_qp(&q, None).unwrap();
        if sol.status == QpStatus::Optimal {
            best = Some(best.map_or(sol.objective, |b: f64| b.min(sol.objective)));
        }
        let mut j = 0;
        loop {
            if j == k {
                return best;
            }
            idx[j] += 1;
            if idx[j] < ranges[j].len() {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

pub fn random_miqp(rng: &mut ChaCha8Rng) -> MiqpProblem {
    let n_int = rng.random_range(1..=8);
    let n_cont = rng.random_range(0..=4);
    let n = n_int + n_cont;
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let psd_only = rng.random_bool(0.3);
    let h = if psd_only {
        // Singular Hessian: integer variables may enter only linearly.
        let r = rng.random_range(1..=n);
        let g = DMatrix::from_fn(r, n, |_, _| rng.random_range(-1.0..1.0));
        g.transpose() * g
    } else {
        m.transpose() * &m + DMatrix::identity(n, n) * 0.1
    };
    let f = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let mut lb = DVector::from_element(n, -3.0);
    let mut ub = DVector::from_element(n, 3.0);
    let mut integer_set = Vec::new();
    for i in 0..n_int {
        // Mostly binaries, occasionally a small general range.
        if rng.random_bool(0.8) {
            lb[i] = 0.0;
            ub[i] = 1.0;
        } else {
            lb[i] = -1.0;
            ub[i] = 2.0;
        }
        integer_set.push(i);
    }
    let n_in = rng.random_range(0..=4);
    let a_in = DMatrix::from_fn(n_in, n, |_, _| rng.random_range(-1.0..1.0));
    let b_in = DVector::from_fn(n_in, |_, _| rng.random_range(-0.5..1.5));
    let n_eq = if n_cont > 0 && rng.random_bool(0.3) { 1 } else { 0 };
    let a_eq = DMatrix::from_fn(n_eq, n, |_, _| rng.random_range(-1.0..1.0));
    let b_eq = DVector::from_fn(n_eq, |_, _| rng.random_range(-0.5..0.5));
    MiqpProblem {
        base: QpProblem::new(h, f)
            .with_ineq(a_in, b_in)
            .with_eq(a_eq, b_eq)
            .with_bounds(lb, ub),
        integer_set,
    }
}

pub fn integer_box(p: &MiqpProblem) -> Vec<(f64, f64)> {
    p.integer_set.iter().map(|&i| (p.base.lb[i], p.base.ub[i])).collect()
}
