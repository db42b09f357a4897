//! Line-search SQP for smooth problems with inequality constraints and bounds.
//!
//! ```text
//! minimize    f(z)
//! subject to  c(z) <= 0
//!             lower <= z <= upper
//! ```
//!
//! Each iteration solves a QP built from a damped-BFGS Lagrangian Hessian
//! estimate and linearized constraints, then backtracks on the l1 merit
//! function `f + rho * sum(max(c, 0))`. Bounds go to the QP as bounds and
//! every iterate stays inside the box.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{gradient, jacobian, BoxError, ProbeError};
use crate::model::{BoxSet, SolverOptions};
use crate::qp::{solve_qp, QpError, QpProblem};

const ARMIJO: f64 = 1e-4;
const QP_TOL: f64 = 1e-10;

/// A smooth program. Gradients default to central differences with the
/// step policy of [`crate::cost::gradient`]; callbacks must be pure.
pub trait NlpProblem: Sync {
    fn bounds(&self) -> &BoxSet;

    fn dim(&self) -> usize {
        self.bounds().dim()
    }

    fn num_constraints(&self) -> usize {
        0
    }

    fn objective(&self, z: &[f64]) -> Result<f64, BoxError>;

    /// Constraint values with the convention `c(z) <= 0`.
    fn constraints(&self, _z: &[f64]) -> Result<Vec<f64>, BoxError> {
        Ok(Vec::new())
    }

    fn objective_gradient(&self, z: &[f64], fd_step_scale: f64) -> Result<Vec<f64>, ProbeError> {
        gradient(|v: &[f64]| self.objective(v), z, fd_step_scale)
    }

    /// Row `i` holds the gradient of `c_i`.
    fn constraint_jacobian(&self, z: &[f64], fd_step_scale: f64) -> Result<Vec<Vec<f64>>, ProbeError> {
        if self.num_constraints() == 0 {
            return Ok(Vec::new());
        }
        jacobian(|v: &[f64]| self.constraints(v), z, fd_step_scale)
    }
}

type ObjectiveFn<'a> = Box<dyn Fn(&[f64]) -> f64 + Sync + 'a>;
type ConstraintFn<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + Sync + 'a>;

/// An [`NlpProblem`] assembled from closures.
pub struct ClosureProblem<'a> {
    bounds: BoxSet,
    objective: ObjectiveFn<'a>,
    constraints: Option<(usize, ConstraintFn<'a>)>,
}

impl<'a> ClosureProblem<'a> {
    pub fn new(bounds: BoxSet, objective: impl Fn(&[f64]) -> f64 + Sync + 'a) -> Self {
        ClosureProblem {
            bounds,
            objective: Box::new(objective),
            constraints: None,
        }
    }

    pub fn with_constraints(mut self, count: usize, c: impl Fn(&[f64]) -> Vec<f64> + Sync + 'a) -> Self {
        self.constraints = Some((count, Box::new(c)));
        self
    }
}

impl NlpProblem for ClosureProblem<'_> {
    fn bounds(&self) -> &BoxSet {
        &self.bounds
    }

    fn num_constraints(&self) -> usize {
        self.constraints.as_ref().map_or(0, |(k, _)| *k)
    }

    fn objective(&self, z: &[f64]) -> Result<f64, BoxError> {
        let v = (self.objective)(z);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("objective not finite at {z:?}").into())
        }
    }

    fn constraints(&self, z: &[f64]) -> Result<Vec<f64>, BoxError> {
        Ok(self.constraints.as_ref().map_or_else(Vec::new, |(_, c)| c(z)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NlpStatus {
    Converged,
    MaxIter,
    LineSearchFailure,
    QpInfeasible,
}

impl fmt::Display for NlpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NlpStatus::Converged => "converged",
            NlpStatus::MaxIter => "max_iter",
            NlpStatus::LineSearchFailure => "line_search_failure",
            NlpStatus::QpInfeasible => "qp_infeasible",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub f: f64,
    pub merit: f64,
    /// Step length accepted from this iterate; 0 on the final record.
    pub step_length: f64,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlpSolution {
    pub z_star: Vec<f64>,
    pub f_star: f64,
    /// Multipliers of `c(z) <= 0`.
    pub multipliers: Vec<f64>,
    /// Signed bound multipliers: positive at an active upper bound,
    /// negative at an active lower bound.
    pub bound_multipliers: Vec<f64>,
    pub kkt_residual: f64,
    pub feasibility_residual: f64,
    pub iterations: usize,
    pub status: NlpStatus,
    pub trace: Vec<IterationRecord>,
}

#[derive(Debug, Error)]
pub enum NlpError {
    #[error("evaluation failed at iterate {iteration}: {source}")]
    Evaluation { iteration: usize, source: BoxError },
    #[error("gradient evaluation failed at iterate {iteration}: {source}")]
    Gradient { iteration: usize, source: ProbeError },
    #[error("QP subproblem failed: {0}")]
    Qp(QpError),
    #[error("problem dimension mismatch: {0}")]
    Dimension(String),
}

/// Residuals at `z` for given multipliers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    /// Max of stationarity, complementarity and dual infeasibility.
    pub kkt: f64,
    /// Largest constraint or bound violation.
    pub feasibility: f64,
}

struct Point {
    z: Vec<f64>,
    f: f64,
    c: Vec<f64>,
    grad: Vec<f64>,
    jac: Vec<Vec<f64>>,
}

fn residuals_from(point: &Point, bounds: &BoxSet, multipliers: &[f64], bound_multipliers: &[f64]) -> Residuals {
    let mut stat = point.grad.clone();
    for (row, lam) in point.jac.iter().zip(multipliers) {
        for (s, a) in stat.iter_mut().zip(row) {
            *s += lam * a;
        }
    }
    for (s, nu) in stat.iter_mut().zip(bound_multipliers) {
        *s += nu;
    }
    let mut kkt = stat.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (ci, lam) in point.c.iter().zip(multipliers) {
        kkt = kkt.max((lam * ci).abs()).max((-lam).max(0.0));
    }
    for (j, nu) in bound_multipliers.iter().enumerate() {
        let z = point.z[j];
        let gap = if *nu > 0.0 {
            bounds.upper[j] - z
        } else if *nu < 0.0 {
            z - bounds.lower[j]
        } else {
            0.0
        };
        kkt = kkt.max((nu * gap).abs());
    }
    let mut feas = point.c.iter().fold(0.0f64, |m, v| m.max(*v));
    for (j, z) in point.z.iter().enumerate() {
        feas = feas.max(bounds.lower[j] - z).max(z - bounds.upper[j]);
    }
    Residuals { kkt, feasibility: feas }
}

/// Recomputes the residuals from scratch at `z`.
pub fn kkt_residuals<P: NlpProblem + ?Sized>(
    problem: &P,
    z: &[f64],
    multipliers: &[f64],
    bound_multipliers: &[f64],
    fd_step_scale: f64,
) -> Result<Residuals, NlpError> {
    let point = evaluate_point(problem, z.to_vec(), fd_step_scale, 0)?;
    Ok(residuals_from(&point, problem.bounds(), multipliers, bound_multipliers))
}

fn evaluate_point<P: NlpProblem + ?Sized>(
    problem: &P,
    z: Vec<f64>,
    fd_step_scale: f64,
    iteration: usize,
) -> Result<Point, NlpError> {
    let eval = |source| NlpError::Evaluation { iteration, source };
    let grad_err = |source| NlpError::Gradient { iteration, source };
    let f = problem.objective(&z).map_err(eval)?;
    let c = problem.constraints(&z).map_err(eval)?;
    let grad = problem.objective_gradient(&z, fd_step_scale).map_err(grad_err)?;
    let jac = problem.constraint_jacobian(&z, fd_step_scale).map_err(grad_err)?;
    Ok(Point { z, f, c, grad, jac })
}

fn merit_value(f: f64, c: &[f64], rho: f64) -> f64 {
    f + rho * c.iter().map(|v| v.max(0.0)).sum::<f64>()
}

/// Powell-damped BFGS update of a symmetric positive definite `b`.
pub fn damped_bfgs_update(b: &DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
    if s.norm() < 1e-14 {
        return b.clone();
    }
    let bs = b * s;
    let sbs = s.dot(&bs);
    if sbs <= 0.0 || !sbs.is_finite() {
        return b.clone();
    }
    let sy = s.dot(y);
    let r = if sy >= 0.2 * sbs {
        y.clone()
    } else {
        let theta = 0.8 * sbs / (sbs - sy);
        y * theta + &bs * (1.0 - theta)
    };
    let sr = s.dot(&r);
    let updated = b - &bs * bs.transpose() / sbs + &r * r.transpose() / sr;
    (&updated + updated.transpose()) * 0.5
}

pub fn solve_nlp<P: NlpProblem + ?Sized>(
    problem: &P,
    z0: &[f64],
    opts: &SolverOptions,
) -> Result<NlpSolution, NlpError> {
    let bounds = problem.bounds().clone();
    let m = bounds.dim();
    let k = problem.num_constraints();
    if z0.len() != m {
        return Err(NlpError::Dimension(format!(
            "start has {} entries, problem has {m}",
            z0.len()
        )));
    }
    let start = bounds.project(z0);
    if start != z0 {
        log::warn!("starting point projected onto the bound box");
    }

    let mut point = evaluate_point(problem, start, opts.fd_step_scale, 0)?;
    if point.c.len() != k || point.jac.len() != k {
        return Err(NlpError::Dimension(format!(
            "{} constraint values for {k} declared constraints",
            point.c.len()
        )));
    }

    let mut hessian = DMatrix::<f64>::identity(m, m);
    let mut rho = 0.0f64;
    let mut multipliers = vec![0.0; k];
    let mut bound_multipliers = vec![0.0; m];
    let mut trace = Vec::new();
    let mut iteration = 0;

    let status = loop {
        let qp = QpProblem {
            h: hessian.clone(),
            g: DVector::from_column_slice(&point.grad),
            a: DMatrix::from_fn(k, m, |i, j| point.jac[i][j]),
            b: DVector::from_iterator(k, point.c.iter().map(|v| -v)),
            bounds: BoxSet::new(
                bounds.lower.iter().zip(&point.z).map(|(l, z)| l - z).collect(),
                bounds.upper.iter().zip(&point.z).map(|(u, z)| u - z).collect(),
            ),
        };
        let sub = match solve_qp(&qp, QP_TOL) {
            Ok(sol) => sol,
            Err(QpError::Infeasible { .. }) => break NlpStatus::QpInfeasible,
            Err(e) => return Err(NlpError::Qp(e)),
        };
        multipliers = sub.multipliers.iter().copied().collect();
        bound_multipliers = (0..m)
            .map(|j| sub.upper_multipliers[j] - sub.lower_multipliers[j])
            .collect();
        let res = residuals_from(&point, &bounds, &multipliers, &bound_multipliers);

        let lam_max = multipliers.iter().fold(0.0f64, |a, v| a.max(*v));
        if lam_max >= rho {
            rho = 2.0 * (lam_max + 1.0);
        }
        let merit = merit_value(point.f, &point.c, rho);
        let mut record = IterationRecord {
            iteration,
            f: point.f,
            merit,
            step_length: 0.0,
            kkt_residual: res.kkt,
        };

        if res.kkt <= opts.kkt_tol && res.feasibility <= opts.feas_tol {
            trace.push(record);
            break NlpStatus::Converged;
        }
        if iteration >= opts.max_iter {
            trace.push(record);
            break NlpStatus::MaxIter;
        }

        let d = &sub.d;
        let violation: f64 = point.c.iter().map(|v| v.max(0.0)).sum();
        let slope = (DVector::from_column_slice(&point.grad).dot(d) - rho * violation).min(0.0);

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let trial: Vec<f64> = bounds.project(
                &point
                    .z
                    .iter()
                    .zip(d.iter())
                    .map(|(z, dj)| z + alpha * dj)
                    .collect::<Vec<_>>(),
            );
            let value = problem
                .objective(&trial)
                .and_then(|f| problem.constraints(&trial).map(|c| (f, c)));
            if let Ok((f, c)) = value {
                let trial_merit = merit_value(f, &c, rho);
                if trial_merit.is_finite() && trial_merit <= merit + ARMIJO * alpha * slope {
                    accepted = Some(trial);
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some(trial) = accepted else {
            trace.push(record);
            break NlpStatus::LineSearchFailure;
        };
        record.step_length = alpha;
        trace.push(record);

        let next = evaluate_point(problem, trial, opts.fd_step_scale, iteration + 1)?;
        debug_assert!(
            merit_value(next.f, &next.c, rho) <= merit,
            "merit increased on an accepted step"
        );

        let s = DVector::from_iterator(m, next.z.iter().zip(&point.z).map(|(a, b)| a - b));
        let lagrangian_grad = |p: &Point| {
            let mut g = DVector::from_column_slice(&p.grad);
            for (row, lam) in p.jac.iter().zip(&multipliers) {
                for (gj, a) in g.iter_mut().zip(row) {
                    *gj += lam * a;
                }
            }
            g
        };
        let y = lagrangian_grad(&next) - lagrangian_grad(&point);
        hessian = damped_bfgs_update(&hessian, &s, &y);
        debug_assert!(hessian.clone().cholesky().is_some(), "BFGS estimate lost definiteness");

        point = next;
        iteration += 1;
    };

    let res = residuals_from(&point, &bounds, &multipliers, &bound_multipliers);
    Ok(NlpSolution {
        z_star: point.z,
        f_star: point.f,
        multipliers,
        bound_multipliers,
        kkt_residual: res.kkt,
        feasibility_residual: res.feasibility,
        iterations: iteration,
        status,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn opts() -> SolverOptions {
        SolverOptions::default()
    }

    #[test]
    fn unconstrained_quadratic() {
        let p = ClosureProblem::new(BoxSet::unbounded(1), |z| (z[0] - 2.0).powi(2));
        let sol = solve_nlp(&p, &[0.0], &opts()).unwrap();
        assert_eq!(sol.status, NlpStatus::Converged);
        assert!((sol.z_star[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn constrained_quadratic() {
        let p = ClosureProblem::new(BoxSet::unbounded(2), |z| z[0] * z[0] + z[1] * z[1])
            .with_constraints(1, |z| vec![1.0 - z[0] - z[1]]);
        let sol = solve_nlp(&p, &[0.0, 0.0], &opts()).unwrap();
        assert_eq!(sol.status, NlpStatus::Converged);
        assert!((sol.z_star[0] - 0.5).abs() < 1e-6 && (sol.z_star[1] - 0.5).abs() < 1e-6);
        assert!((sol.multipliers[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn rosenbrock_in_box() {
        let bounds = BoxSet::new(vec![-2.0, -2.0], vec![2.0, 2.0]);
        let p = ClosureProblem::new(bounds, |z| 100.0 * (z[1] - z[0] * z[0]).powi(2) + (1.0 - z[0]).powi(2));
        let sol = solve_nlp(&p, &[-1.2, 1.0], &opts()).unwrap();
        assert_eq!(sol.status, NlpStatus::Converged, "{sol:?}");
        assert!((sol.z_star[0] - 1.0).abs() < 1e-4 && (sol.z_star[1] - 1.0).abs() < 1e-4);
        assert!(sol.iterations <= 200);
    }

    #[test]
    fn active_bound() {
        // minimum of (z-3)^2 on [0, 1] is at the upper bound with multiplier 4
        let p = ClosureProblem::new(BoxSet::new(vec![0.0], vec![1.0]), |z| (z[0] - 3.0).powi(2));
        let sol = solve_nlp(&p, &[0.2], &opts()).unwrap();
        assert_eq!(sol.status, NlpStatus::Converged);
        assert_eq!(sol.z_star[0], 1.0);
        assert!((sol.bound_multipliers[0] - 4.0).abs() < 1e-5);
    }

    #[test]
    fn start_outside_box_is_projected() {
        let p = ClosureProblem::new(BoxSet::new(vec![-1.0], vec![1.0]), |z| z[0] * z[0]);
        let sol = solve_nlp(&p, &[5.0], &opts()).unwrap();
        assert!(sol.z_star[0].abs() < 1e-6);
    }

    #[test]
    fn inconsistent_linearization() {
        let p =
            ClosureProblem::new(BoxSet::unbounded(1), |z| z[0]).with_constraints(2, |z| vec![1.0 - z[0], z[0] + 1.0]);
        let sol = solve_nlp(&p, &[0.0], &opts()).unwrap();
        assert_eq!(sol.status, NlpStatus::QpInfeasible);
    }

    #[test]
    fn max_iter_status() {
        let bounds = BoxSet::new(vec![-2.0, -2.0], vec![2.0, 2.0]);
        let p = ClosureProblem::new(bounds, |z| 100.0 * (z[1] - z[0] * z[0]).powi(2) + (1.0 - z[0]).powi(2));
        let o = SolverOptions { max_iter: 3, ..opts() };
        let sol = solve_nlp(&p, &[-1.2, 1.0], &o).unwrap();
        assert_eq!(sol.status, NlpStatus::MaxIter);
        assert_eq!(sol.iterations, 3);
        assert_eq!(sol.trace.len(), 4);
    }

    #[test]
    fn merit_never_increases() {
        let p = ClosureProblem::new(BoxSet::unbounded(2), |z| {
            (z[0] - 1.0).powi(4) + z[1] * z[1] + z[0] * z[1]
        })
        .with_constraints(1, |z| vec![z[0] * z[0] + z[1] * z[1] - 0.5]);
        let sol = solve_nlp(&p, &[2.0, 2.0], &opts()).unwrap();
        assert_eq!(sol.status, NlpStatus::Converged);
        // per-step merit decrease is asserted inside solve_nlp in debug builds
        assert!(sol.feasibility_residual <= 1e-7);
    }

    #[test]
    fn residuals_recompute_exactly() {
        let p = ClosureProblem::new(BoxSet::new(vec![-3.0, 0.6], vec![3.0, 3.0]), |z| {
            z[0] * z[0] + z[1] * z[1]
        })
        .with_constraints(1, |z| vec![1.0 - z[0] - z[1]]);
        let o = opts();
        let sol = solve_nlp(&p, &[2.0, 2.0], &o).unwrap();
        assert_eq!(sol.status, NlpStatus::Converged);
        let r = kkt_residuals(
            &p,
            &sol.z_star,
            &sol.multipliers,
            &sol.bound_multipliers,
            o.fd_step_scale,
        )
        .unwrap();
        assert!((r.kkt - sol.kkt_residual).abs() <= 1e-10);
        assert!((r.feasibility - sol.feasibility_residual).abs() <= 1e-10);
    }

    #[test]
    fn bfgs_damping_branches() {
        let b = DMatrix::identity(2, 2);
        let s = dvector![1.0, 0.0];
        // s'y = 2 > 0.2: plain BFGS, secant condition B s = y holds
        let y = dvector![2.0, 0.5];
        let up = damped_bfgs_update(&b, &s, &y);
        assert!((&up * &s - &y).amax() < 1e-12);
        // negative curvature: still positive definite
        let y = dvector![-3.0, 1.0];
        let up = damped_bfgs_update(&b, &s, &y);
        assert!(up.clone().cholesky().is_some());
        assert_eq!(up, up.transpose());
        // degenerate step leaves B alone
        assert_eq!(damped_bfgs_update(&b, &dvector![0.0, 0.0], &y), b);
    }

    #[test]
    fn bfgs_recovers_quadratic_curvature() {
        // exact line searches on f = 1/2 z'Qz, Q = diag(1, 4)
        let q = DMatrix::from_diagonal(&dvector![1.0, 4.0]);
        let mut b = DMatrix::identity(2, 2);
        let mut z = dvector![1.0, 1.0];
        let mut probed = Vec::new();
        for _ in 0..2 {
            let g = &q * &z;
            let dir = -b.clone().cholesky().unwrap().solve(&g);
            let step = -g.dot(&dir) / dir.dot(&(&q * &dir));
            let s = &dir * step;
            let y = &q * &s;
            b = damped_bfgs_update(&b, &s, &y);
            z += &s;
            probed.push(s);
        }
        for s in &probed {
            assert!((&b * s - &q * s).amax() < 1e-6, "{b}");
        }
    }
}
