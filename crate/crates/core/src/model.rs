//! Problem description types and structural validation.

use std::collections::HashSet;
use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::expr::{Formula, Var};

/// Axis-aligned box `lower <= v <= upper`. Infinite entries leave a side open.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        BoxSet { lower, upper }
    }

    pub fn unbounded(dim: usize) -> Self {
        BoxSet {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Extends the box with `extra` unbounded coordinates.
    pub fn extended(&self, extra: usize) -> Self {
        let mut out = self.clone();
        out.lower.extend(std::iter::repeat_n(f64::NEG_INFINITY, extra));
        out.upper.extend(std::iter::repeat_n(f64::INFINITY, extra));
        out
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.dim()
            && v.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (lo, hi))| *lo <= *x && *x <= *hi)
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(x, (lo, hi))| x.max(*lo).min(*hi))
            .collect()
    }

    fn is_well_ordered(&self) -> bool {
        self.lower.len() == self.upper.len()
            && self
                .lower
                .iter()
                .zip(&self.upper)
                .all(|(lo, hi)| !lo.is_nan() && !hi.is_nan() && lo <= hi)
    }
}

macro_rules! real_vector {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub Vec<f64>);

        impl Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                $name(v)
            }
        }
    };
}

real_vector!(
    /// Design parameters shared by every scenario.
    ParameterVector
);
real_vector!(StateVector);
real_vector!(
    /// Positive per-scenario weights, in scenario order.
    WeightVector
);

/// One operating condition: its dynamics, horizon, and Bolza cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub dynamics: Vec<Formula>,
    pub x0: StateVector,
    pub t0: f64,
    pub tf: f64,
    pub terminal_cost: Formula,
    pub running_cost: Formula,
    pub state_bounds: BoxSet,
}

impl Scenario {
    pub fn state_dim(&self) -> usize {
        self.x0.len()
    }
}

/// A user-supplied goal that replaces the Stage-1 value for one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalOverride {
    pub id: String,
    pub j_star: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub scenarios: Vec<Scenario>,
    pub p: usize,
    pub theta_bounds: BoxSet,
    pub theta_init: ParameterVector,
    pub weights: WeightVector,
    pub goals: Vec<GoalOverride>,
    pub options: SolverOptions,
}

impl ProblemSpec {
    pub fn scenario(&self, id: &str) -> Option<&Scenario> {
        self.scenarios.iter().find(|s| s.id == id)
    }

    pub fn scenario_ids(&self) -> Vec<String> {
        self.scenarios.iter().map(|s| s.id.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// One shared attainment level bounded below by every weighted deviation.
    #[default]
    Minimax,
    /// One attainment level per scenario; their sum is minimized.
    WeightedSum,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Minimax => "minimax",
            Aggregation::WeightedSum => "weighted_sum",
        })
    }
}

/// How the state box of a scenario participates in cost evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateBoundMode {
    #[default]
    Monitor,
    Penalize,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStart {
    #[default]
    ThetaInit,
    BestStage1,
}

/// Numerical settings shared by simulation, differentiation and the solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub integrator_steps: usize,
    pub fd_step_scale: f64,
    pub kkt_tol: f64,
    pub feas_tol: f64,
    pub max_iter: usize,
    pub max_backtracks: usize,
    pub aggregation: Aggregation,
    pub state_bound_mode: StateBoundMode,
    pub penalty_coefficient: f64,
    /// Restarts in addition to the solve from `theta_init`.
    pub multistart_count: usize,
    pub seed: u64,
    pub warm_start: WarmStart,
    pub normalize_weights: bool,
}

/// Cube root of machine epsilon, about 6.06e-6.
pub fn default_fd_step_scale() -> f64 {
    f64::EPSILON.cbrt()
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            integrator_steps: 200,
            fd_step_scale: default_fd_step_scale(),
            kkt_tol: 1e-7,
            feas_tol: 1e-7,
            max_iter: 200,
            max_backtracks: 40,
            aggregation: Aggregation::Minimax,
            state_bound_mode: StateBoundMode::Monitor,
            penalty_coefficient: 1e3,
            multistart_count: 2,
            seed: 0,
            warm_start: WarmStart::ThetaInit,
            normalize_weights: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    NoScenarios,
    ParameterDimension,
    BoundsOrder,
    NonFinite,
    ThetaInitOutsideBounds,
    WeightCount,
    WeightNotPositive,
    StateDimensionMismatch,
    DynamicsLength,
    Horizon,
    InitialStateOutsideBounds,
    UndeclaredVariable,
    ScenarioId,
    DuplicateScenarioId,
    UnknownGoal,
    OptionRange,
}

impl Rule {
    pub fn message(self) -> &'static str {
        match self {
            Rule::NoScenarios => "at least one scenario required",
            Rule::ParameterDimension => "parameter dimension mismatch",
            Rule::BoundsOrder => "lower bound exceeds upper bound",
            Rule::NonFinite => "value not finite",
            Rule::ThetaInitOutsideBounds => "initial parameters outside bounds",
            Rule::WeightCount => "weight count differs from scenario count",
            Rule::WeightNotPositive => "weight not positive",
            Rule::StateDimensionMismatch => "state dimension mismatch",
            Rule::DynamicsLength => "dynamics length differs from state dimension",
            Rule::Horizon => "final time must exceed initial time",
            Rule::InitialStateOutsideBounds => "initial state outside state bounds",
            Rule::UndeclaredVariable => "expression references an undeclared variable",
            Rule::ScenarioId => "scenario id must be non-empty [A-Za-z0-9_.-]",
            Rule::DuplicateScenarioId => "duplicate scenario id",
            Rule::UnknownGoal => "goal refers to an unknown scenario",
            Rule::OptionRange => "option out of range",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.message())
    }
}

/// One violated invariant. `field` is a document path such as `weights[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub scenario: Option<String>,
    pub field: String,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "`{}`: {}", self.field, self.rule)?;
        if let Some(id) = &self.scenario {
            write!(f, " (scenario {id})")?;
        }
        if !self.detail.is_empty() {
            write!(f, ": {}", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn has(&self, rule: Rule) -> bool {
        self.findings.iter().any(|f| f.rule == rule)
    }

    fn push(&mut self, scenario: Option<&str>, field: impl Into<String>, rule: Rule, detail: impl Into<String>) {
        self.findings.push(Finding {
            scenario: scenario.map(str::to_string),
            field: field.into(),
            rule,
            detail: detail.into(),
        });
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

/// Checks every structural invariant of a problem. Scenarios are compatible
/// when they share one state dimension and one parameter vector.
pub fn validate_problem(spec: &ProblemSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    let p = spec.p;

    if spec.scenarios.is_empty() {
        report.push(None, "scenarios", Rule::NoScenarios, "");
    }

    if spec.theta_bounds.lower.len() != p || spec.theta_bounds.upper.len() != p {
        report.push(
            None,
            "parameters.lower",
            Rule::ParameterDimension,
            format!(
                "bounds have {}/{} entries, dim is {p}",
                spec.theta_bounds.lower.len(),
                spec.theta_bounds.upper.len()
            ),
        );
    } else if !spec.theta_bounds.is_well_ordered() {
        report.push(None, "parameters.upper", Rule::BoundsOrder, "");
    }
    if spec.theta_init.len() != p {
        report.push(
            None,
            "parameters.init",
            Rule::ParameterDimension,
            format!("{} entries, dim is {p}", spec.theta_init.len()),
        );
    } else if let Some(j) = spec.theta_init.iter().position(|v| !v.is_finite()) {
        report.push(None, format!("parameters.init[{j}]"), Rule::NonFinite, "");
    } else if spec.theta_bounds.dim() == p && !spec.theta_bounds.contains(&spec.theta_init) {
        report.push(None, "parameters.init", Rule::ThetaInitOutsideBounds, "");
    }

    if spec.weights.len() != spec.scenarios.len() {
        report.push(
            None,
            "weights",
            Rule::WeightCount,
            format!("{} weights for {} scenarios", spec.weights.len(), spec.scenarios.len()),
        );
    }
    for (i, w) in spec.weights.iter().enumerate() {
        if !(w.is_finite() && *w > 0.0) {
            let id = spec.scenarios.get(i).map(|s| s.id.as_str());
            report.push(id, format!("weights[{i}]"), Rule::WeightNotPositive, format!("w = {w}"));
        }
    }

    let reference_dim = spec.scenarios.first().map(Scenario::state_dim);
    let mut seen = HashSet::new();
    for (i, sc) in spec.scenarios.iter().enumerate() {
        let id = Some(sc.id.as_str());
        let path = |field: &str| format!("scenarios[{i}].{field}");
        let n = sc.state_dim();

        if !valid_id(&sc.id) {
            report.push(id, path("id"), Rule::ScenarioId, format!("{:?}", sc.id));
        }
        if !seen.insert(sc.id.as_str()) {
            report.push(id, path("id"), Rule::DuplicateScenarioId, "");
        }
        if let Some(n_ref) = reference_dim {
            if n != n_ref {
                report.push(
                    id,
                    path("x0"),
                    Rule::StateDimensionMismatch,
                    format!("n = {n}, first scenario has n = {n_ref}"),
                );
            }
        }
        if sc.dynamics.len() != n {
            report.push(
                id,
                path("dynamics"),
                Rule::DynamicsLength,
                format!("{} expressions for n = {n}", sc.dynamics.len()),
            );
        }
        if let Some(j) = sc.x0.iter().position(|v| !v.is_finite()) {
            report.push(id, format!("scenarios[{i}].x0[{j}]"), Rule::NonFinite, "");
        }
        if !(sc.t0.is_finite() && sc.tf.is_finite()) {
            report.push(id, path("tf"), Rule::NonFinite, "");
        } else if sc.tf <= sc.t0 {
            report.push(id, path("tf"), Rule::Horizon, format!("t0 = {}, tf = {}", sc.t0, sc.tf));
        }
        let sb = &sc.state_bounds;
        if sb.lower.len() != n || sb.upper.len() != n {
            report.push(
                id,
                path("state_lower"),
                Rule::StateDimensionMismatch,
                format!(
                    "state bounds have {}/{} entries, n = {n}",
                    sb.lower.len(),
                    sb.upper.len()
                ),
            );
        } else if !sb.is_well_ordered() {
            report.push(id, path("state_upper"), Rule::BoundsOrder, "");
        } else if !sb.contains(&sc.x0) {
            report.push(id, path("x0"), Rule::InitialStateOutsideBounds, "");
        }

        let exprs = sc
            .dynamics
            .iter()
            .enumerate()
            .map(|(k, f)| (format!("dynamics[{k}]"), f))
            .chain([
                ("terminal_cost".to_string(), &sc.terminal_cost),
                ("running_cost".to_string(), &sc.running_cost),
            ]);
        for (field, formula) in exprs {
            for var in formula.free_variables() {
                let declared = match var {
                    Var::Time | Var::FinalTime => true,
                    Var::State(j) => j < n,
                    Var::Param(j) => j < p,
                };
                if !declared {
                    report.push(id, path(&field), Rule::UndeclaredVariable, format!("`{var}`"));
                }
            }
        }
    }

    for (k, goal) in spec.goals.iter().enumerate() {
        if spec.scenario(&goal.id).is_none() {
            report.push(
                None,
                format!("goals[{k}].id"),
                Rule::UnknownGoal,
                format!("{:?}", goal.id),
            );
        }
        if !goal.j_star.is_finite() {
            report.push(Some(&goal.id), format!("goals[{k}].J_star"), Rule::NonFinite, "");
        }
    }

    let o = &spec.options;
    let positive = [
        ("fd_step_scale", o.fd_step_scale),
        ("kkt_tol", o.kkt_tol),
        ("feas_tol", o.feas_tol),
    ];
    for (name, v) in positive {
        if !(v.is_finite() && v > 0.0) {
            report.push(
                None,
                format!("options.{name}"),
                Rule::OptionRange,
                format!("{v} must be > 0"),
            );
        }
    }
    if !(o.penalty_coefficient.is_finite() && o.penalty_coefficient >= 0.0) {
        report.push(None, "options.penalty_coefficient", Rule::OptionRange, "must be >= 0");
    }
    if o.integrator_steps == 0 {
        report.push(None, "options.integrator_steps", Rule::OptionRange, "must be >= 1");
    }
    if o.max_iter == 0 {
        report.push(None, "options.max_iter", Rule::OptionRange, "must be >= 1");
    }

    report
}
