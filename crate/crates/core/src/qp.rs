//! Dense convex QP solver for the SQP subproblems.
//!
//! ```text
//! minimize    1/2 d' H d + g' d
//! subject to  A d <= b
//!             lower <= d <= upper
//! ```
//!
//! Primal active-set method. When the projection of `d = 0` onto the bounds
//! violates `A d <= b`, a phase-1 problem with elastic slacks finds a feasible
//! start or certifies infeasibility. Constraint selection uses the
//! smallest-index rule to rule out cycling.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::BoxSet;

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub bounds: BoxSet,
}

impl QpProblem {
    /// Problem without general inequalities.
    pub fn unconstrained(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let m = g.len();
        QpProblem {
            h,
            g,
            a: DMatrix::zeros(0, m),
            b: DVector::zeros(0),
            bounds: BoxSet::unbounded(m),
        }
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, d: &DVector<f64>) -> f64 {
        0.5 * d.dot(&(&self.h * d)) + self.g.dot(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum QpConstraint {
    General(usize),
    Lower(usize),
    Upper(usize),
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub d: DVector<f64>,
    /// Multipliers of `A d <= b`, all non-negative.
    pub multipliers: DVector<f64>,
    pub lower_multipliers: DVector<f64>,
    pub upper_multipliers: DVector<f64>,
    pub active_set: Vec<QpConstraint>,
    pub iterations: usize,
    /// Multiple of the identity added to `H` to make it factorizable.
    pub regularization: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("QP infeasible: minimal total constraint violation {residual:.3e}")]
    Infeasible { residual: f64 },
    #[error("QP iteration limit {0} exceeded")]
    IterationLimit(usize),
    #[error("QP dimension mismatch: {0}")]
    Dimension(String),
    #[error("QP Hessian not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("QP Hessian could not be regularized")]
    Regularization,
    #[error("singular working-set system")]
    Singular,
}

/// KKT residual of a candidate solution: the largest of stationarity,
/// primal infeasibility, dual infeasibility, and complementarity.
pub fn kkt_residual(qp: &QpProblem, sol: &QpSolution) -> f64 {
    let d = &sol.d;
    let stat = &qp.h * d + sol.regularization * d + &qp.g + qp.a.transpose() * &sol.multipliers
        - &sol.lower_multipliers
        + &sol.upper_multipliers;
    let mut worst = stat.amax();
    let slack = &qp.a * d - &qp.b;
    for i in 0..slack.len() {
        worst = worst.max(slack[i].max(0.0));
        worst = worst.max((sol.multipliers[i] * slack[i]).abs());
        worst = worst.max((-sol.multipliers[i]).max(0.0));
    }
    for j in 0..d.len() {
        let (lo, hi) = (qp.bounds.lower[j], qp.bounds.upper[j]);
        worst = worst.max((lo - d[j]).max(0.0)).max((d[j] - hi).max(0.0));
        if lo.is_finite() {
            worst = worst.max((sol.lower_multipliers[j] * (d[j] - lo)).abs());
        }
        if hi.is_finite() {
            worst = worst.max((sol.upper_multipliers[j] * (hi - d[j])).abs());
        }
        worst = worst
            .max((-sol.lower_multipliers[j]).max(0.0))
            .max((-sol.upper_multipliers[j]).max(0.0));
    }
    worst
}

pub fn solve_qp(qp: &QpProblem, tol: f64) -> Result<QpSolution, QpError> {
    let m = qp.dim();
    let k = qp.b.len();
    if qp.h.nrows() != m || qp.h.ncols() != m {
        return Err(QpError::Dimension(format!(
            "H is {}x{}, g has {m}",
            qp.h.nrows(),
            qp.h.ncols()
        )));
    }
    if qp.a.nrows() != k || qp.a.ncols() != m {
        return Err(QpError::Dimension(format!(
            "A is {}x{}, expected {k}x{m}",
            qp.a.nrows(),
            qp.a.ncols()
        )));
    }
    if qp.bounds.dim() != m || qp.bounds.upper.len() != m {
        return Err(QpError::Dimension(format!("bounds have {} entries", qp.bounds.dim())));
    }

    let asym = (&qp.h - qp.h.transpose()).amax();
    if asym > 1e-10 * (1.0 + qp.h.amax()) {
        return Err(QpError::NotSymmetric(asym));
    }
    let h_sym = (&qp.h + qp.h.transpose()) * 0.5;
    let (h, tau) = regularize(h_sym)?;

    let rows = Rows::new(&qp.a, &qp.b, &qp.bounds);
    let mut start = DVector::from_vec(qp.bounds.project(&vec![0.0; m]));

    let infeasible = (0..k).any(|i| qp.a.row(i).transpose().dot(&start) - qp.b[i] > 0.0);
    if infeasible {
        start = phase_one(qp, &start, tol)?;
    }

    let out = active_set(&h, &qp.g, &rows, start, tol)?;

    let mut multipliers = DVector::zeros(k);
    let mut lower_multipliers = DVector::zeros(m);
    let mut upper_multipliers = DVector::zeros(m);
    let mut active = Vec::with_capacity(out.working.len());
    for (&r, &mu) in out.working.iter().zip(&out.multipliers) {
        let mu = mu.max(0.0);
        let c = rows.kinds[r];
        match c {
            QpConstraint::General(i) => multipliers[i] = mu,
            QpConstraint::Lower(j) => lower_multipliers[j] = mu,
            QpConstraint::Upper(j) => upper_multipliers[j] = mu,
        }
        active.push(c);
    }
    active.sort();

    let sol = QpSolution {
        d: out.x,
        multipliers,
        lower_multipliers,
        upper_multipliers,
        active_set: active,
        iterations: out.iterations,
        regularization: tau,
    };
    debug_assert!(
        {
            let scale = 1.0 + qp.g.amax() + (&h * &sol.d).amax() + qp.b.amax();
            kkt_residual(qp, &sol) <= tol * scale
        },
        "QP solution violates KKT conditions: residual {}",
        kkt_residual(qp, &sol)
    );
    Ok(sol)
}

/// Adds `tau * I` with `tau = 1e-8, 1e-7, ...` until Cholesky succeeds.
fn regularize(h: DMatrix<f64>) -> Result<(DMatrix<f64>, f64), QpError> {
    if h.clone().cholesky().is_some() {
        return Ok((h, 0.0));
    }
    let scale = h.amax().max(1.0);
    let mut tau = 1e-8;
    while tau <= 1e8 * scale {
        let shifted = &h + DMatrix::identity(h.nrows(), h.ncols()) * tau;
        if shifted.clone().cholesky().is_some() {
            return Ok((shifted, tau));
        }
        tau *= 10.0;
    }
    Err(QpError::Regularization)
}

/// All constraints as dense rows `c_r' x <= e_r`; general rows first, then
/// finite lower bounds, then finite upper bounds.
struct Rows {
    c: DMatrix<f64>,
    e: DVector<f64>,
    kinds: Vec<QpConstraint>,
}

impl Rows {
    fn new(a: &DMatrix<f64>, b: &DVector<f64>, bounds: &BoxSet) -> Self {
        let m = a.ncols();
        let mut rows: Vec<(DVector<f64>, f64, QpConstraint)> = Vec::new();
        for i in 0..a.nrows() {
            rows.push((a.row(i).transpose(), b[i], QpConstraint::General(i)));
        }
        for j in 0..m {
            if bounds.lower[j].is_finite() {
                let mut r = DVector::zeros(m);
                r[j] = -1.0;
                rows.push((r, -bounds.lower[j], QpConstraint::Lower(j)));
            }
        }
        for j in 0..m {
            if bounds.upper[j].is_finite() {
                let mut r = DVector::zeros(m);
                r[j] = 1.0;
                rows.push((r, bounds.upper[j], QpConstraint::Upper(j)));
            }
        }
        let mut c = DMatrix::zeros(rows.len(), m);
        let mut e = DVector::zeros(rows.len());
        let mut kinds = Vec::with_capacity(rows.len());
        for (r, (row, rhs, kind)) in rows.into_iter().enumerate() {
            c.set_row(r, &row.transpose());
            e[r] = rhs;
            kinds.push(kind);
        }
        Rows { c, e, kinds }
    }

    fn len(&self) -> usize {
        self.e.len()
    }
}

struct ActiveSetResult {
    x: DVector<f64>,
    working: Vec<usize>,
    multipliers: Vec<f64>,
    iterations: usize,
}

/// Primal active-set iterations from a feasible `x`. `h` must be positive definite.
fn active_set(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    rows: &Rows,
    mut x: DVector<f64>,
    tol: f64,
) -> Result<ActiveSetResult, QpError> {
    let m = x.len();
    let nc = rows.len();
    let max_iter = 100 + 20 * (m + nc);
    let mut working: Vec<usize> = Vec::new();

    for iteration in 0..max_iter {
        let grad = h * &x + g;
        let (p, mu) = solve_eqp(h, &grad, rows, &working)?;
        let step_scale = 1.0 + x.amax();

        // H p = -(grad + C_W' mu) is the stationarity residual on the working set;
        // in flat directions p itself can be pure roundoff
        let stationary = p.amax() <= 1e-13 * step_scale || (h * &p).amax() <= tol * (1.0 + grad.amax());
        if stationary {
            // smallest-index rule among negative multipliers
            let drop = working
                .iter()
                .zip(&mu)
                .filter(|(_, &v)| v < -tol)
                .map(|(&r, _)| r)
                .min();
            match drop {
                None => {
                    return Ok(ActiveSetResult {
                        x,
                        working,
                        multipliers: mu,
                        iterations: iteration,
                    })
                }
                Some(r) => working.retain(|&w| w != r),
            }
            continue;
        }

        let mut alpha = 1.0;
        let mut blocking = None;
        for r in 0..nc {
            if working.contains(&r) {
                continue;
            }
            let row = rows.c.row(r);
            let cp = row.transpose().dot(&p);
            if cp <= 1e-14 * (1.0 + row.amax() * p.amax()) {
                continue;
            }
            let ratio = ((rows.e[r] - row.transpose().dot(&x)) / cp).max(0.0);
            if ratio < alpha {
                alpha = ratio;
                blocking = Some(r);
            }
        }
        x += &p * alpha;
        if let Some(r) = blocking {
            working.push(r);
        }
    }
    Err(QpError::IterationLimit(max_iter))
}

/// Solves `min 1/2 p'Hp + grad'p s.t. C_W p = 0` through its KKT system.
/// Returns the step and the working-set multipliers (`H(x+p) + g + C_W' mu = 0`).
fn solve_eqp(
    h: &DMatrix<f64>,
    grad: &DVector<f64>,
    rows: &Rows,
    working: &[usize],
) -> Result<(DVector<f64>, Vec<f64>), QpError> {
    let m = grad.len();
    let w = working.len();
    if w == 0 {
        let chol = h.clone().cholesky().ok_or(QpError::Singular)?;
        return Ok((chol.solve(&(-grad)), Vec::new()));
    }
    let mut kkt = DMatrix::zeros(m + w, m + w);
    kkt.view_mut((0, 0), (m, m)).copy_from(h);
    for (k, &r) in working.iter().enumerate() {
        let row = rows.c.row(r);
        kkt.view_mut((m + k, 0), (1, m)).copy_from(&row);
        kkt.view_mut((0, m + k), (m, 1)).copy_from(&row.transpose());
    }
    let mut rhs = DVector::zeros(m + w);
    rhs.rows_mut(0, m).copy_from(&(-grad));
    let sol = kkt.lu().solve(&rhs).ok_or(QpError::Singular)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(QpError::Singular);
    }
    let p = sol.rows(0, m).into_owned();
    let mu = sol.rows(m, w).iter().copied().collect();
    Ok((p, mu))
}

/// Finds a feasible point by minimizing the total violation `sum s` of
/// `A d - s <= b`, `s >= 0`, bounds on `d`. A small proximal term keeps the
/// phase-1 Hessian positive definite without affecting exactness of the
/// linear penalty.
fn phase_one(qp: &QpProblem, start: &DVector<f64>, tol: f64) -> Result<DVector<f64>, QpError> {
    const PROX: f64 = 1e-8;
    let m = qp.dim();
    let k = qp.b.len();
    let n = m + k;

    let h = DMatrix::identity(n, n) * PROX;
    let mut g = DVector::zeros(n);
    g.rows_mut(m, k).fill(1.0);

    let mut a = DMatrix::zeros(k, n);
    a.view_mut((0, 0), (k, m)).copy_from(&qp.a);
    a.view_mut((0, m), (k, k)).copy_from(&(-DMatrix::identity(k, k)));

    let mut lower = qp.bounds.lower.clone();
    let mut upper = qp.bounds.upper.clone();
    lower.extend(std::iter::repeat_n(0.0, k));
    upper.extend(std::iter::repeat_n(f64::INFINITY, k));
    let rows = Rows::new(&a, &qp.b, &BoxSet::new(lower, upper));

    let mut x0 = DVector::zeros(n);
    x0.rows_mut(0, m).copy_from(start);
    for i in 0..k {
        x0[m + i] = (qp.a.row(i).transpose().dot(start) - qp.b[i]).max(0.0);
    }

    let out = active_set(&h, &g, &rows, x0, tol)?;
    let residual: f64 = out.x.rows(m, k).sum();
    if residual > tol * (1.0 + qp.b.amax()) {
        return Err(QpError::Infeasible { residual });
    }
    Ok(out.x.rows(0, m).into_owned())
}
