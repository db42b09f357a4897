//! Independent reference computations shared by the integration tests and
//! the acceptance suite.
#![allow(dead_code)]

use goal_attain::model::BoxSet;
use goal_attain::qp::QpProblem;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub struct OracleSolution {
    pub d: DVector<f64>,
    /// Multipliers of the general rows, then finite lower bounds, then finite
    /// upper bounds.
    pub multipliers: Vec<f64>,
    pub objective: f64,
}

/// Solves a strictly convex QP by trying every active set of at most `m`
/// rows and keeping the feasible point with nonnegative multipliers and the
/// lowest objective.
pub fn qp_by_enumeration(qp: &QpProblem) -> Option<OracleSolution> {
    let m = qp.g.len();
    let mut rows: Vec<(DVector<f64>, f64)> = (0..qp.b.len()).map(|i| (qp.a.row(i).transpose(), qp.b[i])).collect();
    for j in 0..m {
        if qp.bounds.lower[j].is_finite() {
            let mut r = DVector::zeros(m);
            r[j] = -1.0;
            rows.push((r, -qp.bounds.lower[j]));
        }
    }
    for j in 0..m {
        if qp.bounds.upper[j].is_finite() {
            let mut r = DVector::zeros(m);
            r[j] = 1.0;
            rows.push((r, qp.bounds.upper[j]));
        }
    }
    let nr = rows.len();
    let mut best: Option<OracleSolution> = None;
    for mask in 0u32..(1 << nr) {
        let set: Vec<usize> = (0..nr).filter(|r| mask & (1 << r) != 0).collect();
        if set.len() > m {
            continue;
        }
        let w = set.len();
        let mut kkt = DMatrix::zeros(m + w, m + w);
        kkt.view_mut((0, 0), (m, m)).copy_from(&qp.h);
        let mut rhs = DVector::zeros(m + w);
        rhs.rows_mut(0, m).copy_from(&(-&qp.g));
        for (k, &r) in set.iter().enumerate() {
            for j in 0..m {
                kkt[(m + k, j)] = rows[r].0[j];
                kkt[(j, m + k)] = rows[r].0[j];
            }
            rhs[m + k] = rows[r].1;
        }
        if kkt.determinant().abs() < 1e-12 {
            continue;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let d = sol.rows(0, m).into_owned();
        let feasible = rows.iter().all(|(c, e)| c.dot(&d) <= e + 1e-9 * (1.0 + e.abs()));
        let dual_ok = (0..w).all(|k| sol[m + k] >= -1e-9);
        if !(feasible && dual_ok) {
            continue;
        }
        let mut multipliers = vec![0.0; nr];
        for (k, &r) in set.iter().enumerate() {
            multipliers[r] = sol[m + k];
        }
        let objective = qp.objective(&d);
        if best.as_ref().is_none_or(|b| objective < b.objective) {
            best = Some(OracleSolution {
                d,
                multipliers,
                objective,
            });
        }
    }
    best
}

/// Random strictly convex QP with `m` variables and `k` general rows, made
/// feasible by construction. Bounds on the first `bounded` coordinates.
pub fn random_qp(rng: &mut impl Rng, m: usize, k: usize, bounded: usize) -> QpProblem {
    let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
    let factor = DMatrix::from_fn(m, m, |_, _| u(-1.0, 1.0));
    let h = &factor * factor.transpose() + DMatrix::identity(m, m) * 0.1;
    let h = (&h + h.transpose()) * 0.5;
    let g = DVector::from_fn(m, |_, _| u(-2.0, 2.0));
    let a = DMatrix::from_fn(k, m, |_, _| u(-1.0, 1.0));
    let x_feasible = DVector::from_fn(m, |_, _| u(-1.0, 1.0));
    let slack = DVector::from_fn(k, |_, _| u(0.0, 1.0));
    let b = &a * &x_feasible + slack;
    let mut bounds = BoxSet::unbounded(m);
    for j in 0..bounded.min(m) {
        bounds.lower[j] = x_feasible[j] - u(0.0, 1.0);
        bounds.upper[j] = x_feasible[j] + u(0.0, 1.0);
    }
    QpProblem { h, g, a, b, bounds }
}

/// Grid minimizer of `f` over `[lo, hi]` with the given step; ties go to the
/// smaller argument.
pub fn grid_argmin(f: impl Fn(f64) -> f64, lo: f64, hi: f64, step: f64) -> (f64, f64) {
    let count = ((hi - lo) / step).round() as usize;
    let mut best = (lo, f(lo));
    for k in 1..=count {
        let t = (lo + k as f64 * step).min(hi);
        let v = f(t);
        if v < best.1 {
            best = (t, v);
        }
    }
    best
}

/// Closed-form cost of `x' = -theta x`, `x(0) = 1`, running cost
/// `x^2 + 0.1 theta^2` over `[0, 2]`.
pub fn first_order_cost(theta: f64) -> f64 {
    (1.0 - (-4.0 * theta).exp()) / (2.0 * theta) + 0.2 * theta * theta
}
