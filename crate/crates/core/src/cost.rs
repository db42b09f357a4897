//! Simulation-embedded Bolza costs and their finite-difference derivatives.

use std::error::Error as StdError;
use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{check_state_bounds, integrate, DynamicsError};
use crate::expr::{EvalContext, EvalError};
use crate::model::{ProblemSpec, Scenario, SolverOptions, StateBoundMode};

/// `total = terminal_part + running_part + bound_penalty`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostValue {
    pub total: f64,
    pub terminal_part: f64,
    pub running_part: f64,
    pub bound_penalty: f64,
}

impl CostValue {
    fn new(terminal_part: f64, running_part: f64, bound_penalty: f64) -> Self {
        CostValue {
            total: terminal_part + running_part + bound_penalty,
            terminal_part,
            running_part,
            bound_penalty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("terminal_cost: {0}")]
    Terminal(EvalError),
    #[error("state bounds violated at {count} grid point(s), first at time index {first_index}")]
    StateBoundsViolated { count: usize, first_index: usize },
}

/// One failing scenario inside `evaluate_all`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFailure {
    pub scenario_id: String,
    pub error: CostError,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub struct EvaluationError {
    pub failures: Vec<ScenarioFailure>,
}

impl fmt::Display for EvaluationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, fail) in self.failures.iter().enumerate() {
            if k > 0 {
                write!(f, "; ")?;
            }
            write!(f, "scenario {}: {}", fail.scenario_id, fail.error)?;
        }
        Ok(())
    }
}

/// Simulates one scenario at `theta` and assembles its cost.
pub fn evaluate_cost(scenario: &Scenario, theta: &[f64], opts: &SolverOptions) -> Result<CostValue, CostError> {
    let traj = integrate(scenario, theta, opts.integrator_steps)?;
    let ctx = EvalContext {
        t: scenario.tf,
        tf: scenario.tf,
        x: traj.final_state(),
        theta,
    };
    let terminal = scenario.terminal_cost.evaluate(&ctx).map_err(CostError::Terminal)?;
    let running = traj.final_quadrature();

    let penalty = match opts.state_bound_mode {
        StateBoundMode::Monitor => 0.0,
        StateBoundMode::Penalize => {
            opts.penalty_coefficient * check_state_bounds(&traj, &scenario.state_bounds).sum_squared_excess()
        }
        StateBoundMode::Reject => {
            let report = check_state_bounds(&traj, &scenario.state_bounds);
            if let Some(first) = report.violations.first() {
                return Err(CostError::StateBoundsViolated {
                    count: report.violations.len(),
                    first_index: first.time_index,
                });
            }
            0.0
        }
    };
    Ok(CostValue::new(terminal, running, penalty))
}

/// Costs of every scenario at one shared `theta`, in scenario order.
pub fn evaluate_all(spec: &ProblemSpec, theta: &[f64]) -> Result<Vec<CostValue>, EvaluationError> {
    evaluate_all_with(spec, theta, &spec.options)
}

pub fn evaluate_all_with(
    spec: &ProblemSpec,
    theta: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<CostValue>, EvaluationError> {
    let results: Vec<_> = spec
        .scenarios
        .par_iter()
        .map(|sc| evaluate_cost(sc, theta, opts))
        .collect();
    let mut costs = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (sc, r) in spec.scenarios.iter().zip(results) {
        match r {
            Ok(c) => costs.push(c),
            Err(error) => failures.push(ScenarioFailure {
                scenario_id: sc.id.clone(),
                error,
            }),
        }
    }
    if failures.is_empty() {
        Ok(costs)
    } else {
        Err(EvaluationError { failures })
    }
}

// ---------------------------------------------------------------------------
// finite differences

pub type BoxError = Box<dyn StdError + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Forward => "+h",
            Direction::Backward => "-h",
        })
    }
}

#[derive(Debug, Error)]
#[error("finite-difference probe failed for component {component} ({direction}): {source}")]
pub struct ProbeError {
    pub component: usize,
    pub direction: Direction,
    pub source: BoxError,
}

/// Step used for component `j`: `scale * (1 + |theta_j|)`.
pub fn fd_step(value: f64, fd_step_scale: f64) -> f64 {
    fd_step_scale * (1.0 + value.abs())
}

fn probes<T, E, F>(f: &F, theta: &[f64], fd_step_scale: f64) -> Result<Vec<(T, T, f64)>, ProbeError>
where
    T: Send,
    E: Into<BoxError>,
    F: Fn(&[f64]) -> Result<T, E> + Sync,
{
    (0..theta.len())
        .into_par_iter()
        .map(|j| {
            let h = fd_step(theta[j], fd_step_scale);
            let mut z = theta.to_vec();
            z[j] = theta[j] + h;
            let up = f(&z).map_err(|e| ProbeError {
                component: j,
                direction: Direction::Forward,
                source: e.into(),
            })?;
            let hi = z[j];
            z[j] = theta[j] - h;
            let down = f(&z).map_err(|e| ProbeError {
                component: j,
                direction: Direction::Backward,
                source: e.into(),
            })?;
            // divide by the representable step, not the nominal one
            Ok((up, down, hi - z[j]))
        })
        .collect()
}

/// Central-difference gradient of a scalar function.
pub fn gradient<E, F>(f: F, theta: &[f64], fd_step_scale: f64) -> Result<Vec<f64>, ProbeError>
where
    E: Into<BoxError>,
    F: Fn(&[f64]) -> Result<f64, E> + Sync,
{
    Ok(probes(&f, theta, fd_step_scale)?
        .into_iter()
        .map(|(up, down, width)| (up - down) / width)
        .collect())
}

/// Central-difference Jacobian of a vector function; `result[i][j] = d f_i / d theta_j`.
pub fn jacobian<E, F>(f: F, theta: &[f64], fd_step_scale: f64) -> Result<Vec<Vec<f64>>, ProbeError>
where
    E: Into<BoxError>,
    F: Fn(&[f64]) -> Result<Vec<f64>, E> + Sync,
{
    let columns = probes(&f, theta, fd_step_scale)?;
    let rows = columns.first().map_or(0, |(up, _, _)| up.len());
    let mut jac = vec![vec![0.0; theta.len()]; rows];
    for (j, (up, down, width)) in columns.into_iter().enumerate() {
        for i in 0..rows {
            jac[i][j] = (up[i] - down[i]) / width;
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::{scenario, spec};
    use crate::model::{default_fd_step_scale, BoxSet};
    use std::convert::Infallible;

    fn opts(steps: usize) -> SolverOptions {
        SolverOptions {
            integrator_steps: steps,
            ..SolverOptions::default()
        }
    }

    fn assert_decomposes(c: &CostValue) {
        assert!((c.total - (c.terminal_part + c.running_part + c.bound_penalty)).abs() <= 1e-12);
    }

    #[test]
    fn constant_integrand() {
        let s = scenario("a", &["0"], &[0.0], 2.0, "0", "1");
        let c = evaluate_cost(&s, &[], &opts(200)).unwrap();
        assert!((c.total - 2.0).abs() < 1e-9);
        assert_decomposes(&c);
    }

    #[test]
    fn analytic_running_cost() {
        let s = scenario("a", &["-x0"], &[1.0], 1.0, "0", "x0^2");
        let c = evaluate_cost(&s, &[], &opts(200)).unwrap();
        let exact = (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((c.total - exact).abs() < 1e-6, "{}", c.total);
        assert_decomposes(&c);
    }

    #[test]
    fn terminal_only() {
        let s = scenario("a", &["0"], &[3.0], 1.0, "x0^2", "0");
        let c = evaluate_cost(&s, &[], &opts(10)).unwrap();
        assert_eq!(c.total, 9.0);
        assert_eq!(c.terminal_part, 9.0);
    }

    #[test]
    fn state_bound_modes() {
        let mut s = scenario("a", &["1"], &[0.0], 2.0, "0", "0");
        s.state_bounds = BoxSet::new(vec![-1.0], vec![1.0]);
        let mut o = opts(4);
        let monitor = evaluate_cost(&s, &[], &o).unwrap();
        assert_eq!(monitor.bound_penalty, 0.0);

        o.state_bound_mode = StateBoundMode::Penalize;
        o.penalty_coefficient = 10.0;
        let pen = evaluate_cost(&s, &[], &o).unwrap();
        // excess 0.5 and 1.0 at t = 1.5, 2.0
        assert!((pen.bound_penalty - 10.0 * (0.25 + 1.0)).abs() < 1e-12);
        assert_decomposes(&pen);

        o.state_bound_mode = StateBoundMode::Reject;
        assert!(matches!(
            evaluate_cost(&s, &[], &o),
            Err(CostError::StateBoundsViolated {
                count: 2,
                first_index: 3
            })
        ));
    }

    #[test]
    fn evaluate_all_order_and_errors() {
        let mut sp = spec(
            vec![
                scenario("one", &["0"], &[0.0], 1.0, "0", "1"),
                scenario("two", &["0"], &[0.0], 2.0, "0", "1"),
            ],
            &[0.0],
            &[1.0],
            &[0.5],
        );
        let costs = evaluate_all(&sp, &[0.5]).unwrap();
        assert!((costs[0].total - 1.0).abs() < 1e-12 && (costs[1].total - 2.0).abs() < 1e-12);

        sp.scenarios[1] = sp.scenarios[0].clone();
        let dup = evaluate_all(&sp, &[0.5]).unwrap();
        assert_eq!(dup[0], dup[1]);

        sp.scenarios[1].id = "bad".into();
        sp.scenarios[1].running_cost = crate::model::fixtures::formula("log(x0)");
        let err = evaluate_all(&sp, &[0.5]).unwrap_err();
        assert_eq!(err.failures.len(), 1);
        assert_eq!(err.failures[0].scenario_id, "bad");
        assert!(err.to_string().contains("scenario bad"));
    }

    #[test]
    fn gradient_examples() {
        let h = default_fd_step_scale();
        let g = gradient(
            |z: &[f64]| Ok::<_, Infallible>(z.iter().map(|v| v * v).sum()),
            &[1.0, 2.0],
            h,
        )
        .unwrap();
        assert!((g[0] - 2.0).abs() < 1e-7 && (g[1] - 4.0).abs() < 1e-7);
        let g = gradient(|_: &[f64]| Ok::<_, Infallible>(3.0), &[1.0, -2.0, 5.0], h).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-9));
        let g = gradient(|z: &[f64]| Ok::<_, Infallible>(z[0].sin()), &[0.0], h).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_probe_failure_names_component() {
        let err = gradient(
            |z: &[f64]| if z[1] < 1.0 { Err("boom") } else { Ok(z[1]) },
            &[0.0, 1.0],
            1e-3,
        )
        .unwrap_err();
        assert_eq!(err.component, 1);
        assert_eq!(err.direction, Direction::Backward);
    }

    #[test]
    fn jacobian_of_linear_map() {
        let jac = jacobian(
            |z: &[f64]| Ok::<_, Infallible>(vec![z[0] + 2.0 * z[1], 3.0 * z[0]]),
            &[0.3, -0.7],
            default_fd_step_scale(),
        )
        .unwrap();
        let want = [[1.0, 2.0], [3.0, 0.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((jac[i][j] - want[i][j]).abs() < 1e-9);
            }
        }
    }

    // Two independent difference schemes agree on a simulated cost.
    #[test]
    fn central_and_forward_schemes_agree() {
        let s = scenario("a", &["-theta0*x0"], &[1.0], 2.0, "0", "x0^2 + 0.1*theta0^2");
        let o = opts(200);
        let f = |z: &[f64]| evaluate_cost(&s, z, &o).map(|c| c.total);
        let theta = [0.8];
        let central = gradient(f, &theta, o.fd_step_scale).unwrap()[0];
        let h = fd_step(theta[0], o.fd_step_scale) / 10.0;
        let forward = (f(&[theta[0] + h]).unwrap() - f(&theta).unwrap()) / h;
        assert!(((central - forward) / central).abs() < 1e-4, "{central} vs {forward}");
    }
}
