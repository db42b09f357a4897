//! Fixed-step RK4 simulation of scenario dynamics.
//!
//! The running cost is carried as one extra state `q` with `q' = psi`, so the
//! integral is produced by the same RK4 pass and at the same order as `x`.

use std::fmt;

use thiserror::Error;

use crate::expr::{EvalContext, EvalError};
use crate::model::{BoxSet, Scenario, StateVector};

/// States with any component above this magnitude count as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    State(usize),
    /// The running-cost accumulator.
    Quadrature,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::State(j) => write!(f, "x{j}"),
            Component::Quadrature => write!(f, "q"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("dynamics[{index}]: {source}")]
    Rhs { index: usize, source: EvalError },
    #[error("running_cost: {source}")]
    RunningCost { source: EvalError },
    #[error("integration diverged at step {step}: {component} = {value}")]
    Diverged {
        step: usize,
        component: Component,
        value: f64,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("integrator needs at least one step")]
    NoSteps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    pub running_cost_accumulator: Vec<f64>,
}

impl Trajectory {
    pub fn final_state(&self) -> &StateVector {
        self.states.last().expect("trajectory has at least two samples")
    }

    pub fn final_quadrature(&self) -> f64 {
        *self.running_cost_accumulator.last().expect("non-empty")
    }
}

/// Right-hand side of the scenario dynamics at `(t, x, theta)`.
pub fn derivative(scenario: &Scenario, t: f64, x: &[f64], theta: &[f64]) -> Result<StateVector, DynamicsError> {
    let mut out = vec![0.0; scenario.dynamics.len()];
    rhs_into(scenario, t, x, theta, &mut out)?;
    Ok(StateVector(out))
}

fn rhs_into(scenario: &Scenario, t: f64, x: &[f64], theta: &[f64], out: &mut [f64]) -> Result<(), DynamicsError> {
    let ctx = EvalContext {
        t,
        tf: scenario.tf,
        x,
        theta,
    };
    for (index, (f, slot)) in scenario.dynamics.iter().zip(out.iter_mut()).enumerate() {
        *slot = f
            .evaluate(&ctx)
            .map_err(|source| DynamicsError::Rhs { index, source })?;
    }
    Ok(())
}

/// Augmented right-hand side over `y = [x, q]`.
fn augmented_rhs(scenario: &Scenario, t: f64, y: &[f64], theta: &[f64], out: &mut [f64]) -> Result<(), DynamicsError> {
    let n = y.len() - 1;
    rhs_into(scenario, t, &y[..n], theta, &mut out[..n])?;
    let ctx = EvalContext {
        t,
        tf: scenario.tf,
        x: &y[..n],
        theta,
    };
    out[n] = scenario
        .running_cost
        .evaluate(&ctx)
        .map_err(|source| DynamicsError::RunningCost { source })?;
    Ok(())
}

/// Integrates with classical RK4 on the uniform grid `h = (tf - t0) / steps`.
///
/// `theta` is not required to lie in the parameter box; line searches and
/// finite-difference probes step slightly outside it.
pub fn integrate(scenario: &Scenario, theta: &[f64], steps: usize) -> Result<Trajectory, DynamicsError> {
    if steps == 0 {
        return Err(DynamicsError::NoSteps);
    }
    let n = scenario.state_dim();
    if scenario.dynamics.len() != n {
        return Err(DynamicsError::Dimension(format!(
            "{} dynamics expressions for a state of dimension {n}",
            scenario.dynamics.len()
        )));
    }

    let (t0, tf) = (scenario.t0, scenario.tf);
    let h = (tf - t0) / steps as f64;

    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut quad = Vec::with_capacity(steps + 1);
    times.push(t0);
    states.push(scenario.x0.clone());
    quad.push(0.0);

    let mut y: Vec<f64> = scenario.x0.iter().copied().chain([0.0]).collect();
    let dim = n + 1;
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];

    for step in 1..=steps {
        let t = t0 + (step - 1) as f64 * h;

        augmented_rhs(scenario, t, &y, theta, &mut k1)?;
        for j in 0..dim {
            tmp[j] = y[j] + 0.5 * h * k1[j];
        }
        augmented_rhs(scenario, t + 0.5 * h, &tmp, theta, &mut k2)?;
        for j in 0..dim {
            tmp[j] = y[j] + 0.5 * h * k2[j];
        }
        augmented_rhs(scenario, t + 0.5 * h, &tmp, theta, &mut k3)?;
        for j in 0..dim {
            tmp[j] = y[j] + h * k3[j];
        }
        augmented_rhs(scenario, t + h, &tmp, theta, &mut k4)?;
        for j in 0..dim {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }

        if let Some(j) = y.iter().position(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            let component = if j == n {
                Component::Quadrature
            } else {
                Component::State(j)
            };
            return Err(DynamicsError::Diverged {
                step,
                component,
                value: y[j],
            });
        }

        times.push(if step == steps { tf } else { t0 + step as f64 * h });
        states.push(StateVector(y[..n].to_vec()));
        quad.push(y[n]);
    }

    Ok(Trajectory {
        times,
        states,
        running_cost_accumulator: quad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundViolation {
    pub time_index: usize,
    pub component: usize,
    /// Distance outside the box, always positive.
    pub excess: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ViolationReport {
    pub violations: Vec<BoundViolation>,
}

impl ViolationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn sum_squared_excess(&self) -> f64 {
        self.violations.iter().map(|v| v.excess * v.excess).sum()
    }
}

/// Grid-point check of the trajectory against the state box.
pub fn check_state_bounds(traj: &Trajectory, bounds: &BoxSet) -> ViolationReport {
    let mut violations = Vec::new();
    for (time_index, x) in traj.states.iter().enumerate() {
        for (component, ((v, lo), hi)) in x.iter().zip(&bounds.lower).zip(&bounds.upper).enumerate() {
            let excess = if v > hi {
                v - hi
            } else if v < lo {
                lo - v
            } else {
                continue;
            };
            violations.push(BoundViolation {
                time_index,
                component,
                excess,
            });
        }
    }
    ViolationReport { violations }
}
