//! The two-stage procedure.
//!
//! Stage 1 minimizes each scenario cost on its own and records the result as
//! that scenario's goal `J_i*`. Stage 2 searches for one parameter vector for
//! all scenarios through the goal-attainment program
//!
//! ```text
//! minimize    gamma                      (minimax)
//!   or        sum_i gamma_i              (weighted_sum)
//! subject to  J_i(theta) - gamma_i * w_i <= J_i*    for every scenario i
//!             theta in the parameter box
//! ```
//!
//! where the `gamma_i` are free in sign (in minimax mode all share one value).
//! Negative attainment means the goal was beaten.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::cost::{evaluate_all_with, evaluate_cost, jacobian, BoxError, CostValue, EvaluationError, ProbeError};
use crate::model::{
    Aggregation, BoxSet, ParameterVector, ProblemSpec, Scenario, SolverOptions, WarmStart, WeightVector,
};
use crate::sqp::{solve_nlp, NlpError, NlpProblem, NlpSolution, NlpStatus};

#[derive(Debug, Clone, PartialEq)]
pub enum GoalStatus {
    Solver(NlpStatus),
    /// Goal taken from the problem file rather than computed.
    UserGoal,
    Failed(String),
}

impl GoalStatus {
    pub fn is_converged(&self) -> bool {
        matches!(self, GoalStatus::Solver(NlpStatus::Converged) | GoalStatus::UserGoal)
    }
}

impl fmt::Display for GoalStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GoalStatus::Solver(s) => write!(f, "{s}"),
            GoalStatus::UserGoal => write!(f, "user_goal"),
            GoalStatus::Failed(msg) => write!(f, "failed: {msg}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalEntry {
    pub scenario_id: String,
    pub theta_star: ParameterVector,
    /// `None` when every Stage-1 start failed.
    pub j_star: Option<f64>,
    pub status: GoalStatus,
}

/// Per-scenario goals in scenario order.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalSet {
    pub entries: Vec<GoalEntry>,
}

impl GoalSet {
    /// Replaces computed goals by the ones fixed in the problem file.
    pub fn with_overrides(mut self, spec: &ProblemSpec) -> Self {
        for goal in &spec.goals {
            if let Some(entry) = self.entries.iter_mut().find(|e| e.scenario_id == goal.id) {
                entry.j_star = Some(goal.j_star);
                entry.status = GoalStatus::UserGoal;
            }
        }
        self
    }

    /// Goals fully specified by the problem file, if it names every scenario.
    pub fn from_problem(spec: &ProblemSpec) -> Option<Self> {
        let entries = spec
            .scenarios
            .iter()
            .map(|sc| {
                spec.goals.iter().find(|g| g.id == sc.id).map(|g| GoalEntry {
                    scenario_id: sc.id.clone(),
                    theta_star: spec.theta_init.clone(),
                    j_star: Some(g.j_star),
                    status: GoalStatus::UserGoal,
                })
            })
            .collect::<Option<Vec<_>>>()?;
        Some(GoalSet { entries })
    }

    pub fn all_converged(&self) -> bool {
        self.entries.iter().all(|e| e.status.is_converged())
    }
}

#[derive(Debug, Error)]
pub enum AttainError {
    #[error("goal set does not match the problem scenarios: {0}")]
    Misaligned(String),
    #[error("no goal available for scenario {0}")]
    MissingGoal(String),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error("cost evaluation failed at the starting point: {0}")]
    Start(EvaluationError),
    #[error("cost evaluation failed at the solution: {0}")]
    Final(EvaluationError),
    #[error(transparent)]
    Solver(#[from] NlpError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WeightError {
    #[error("weight not positive: weights[{index}] = {value}")]
    NotPositive { index: usize, value: f64 },
    #[error("{got} weights for {want} scenarios")]
    Count { got: usize, want: usize },
}

/// Emitted when normalization changed the weights noticeably.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightNotice {
    pub original_sum: f64,
}

impl fmt::Display for WeightNotice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "weights summed to {} and were rescaled to sum to 1",
            self.original_sum
        )
    }
}

/// Rescales positive weights to sum to one.
pub fn normalize_weights(w: &WeightVector) -> Result<(WeightVector, Option<WeightNotice>), WeightError> {
    check_weights(w)?;
    let sum: f64 = w.iter().sum();
    let notice = ((sum - 1.0).abs() > 1e-9).then_some(WeightNotice { original_sum: sum });
    if let Some(n) = notice {
        log::info!("{n}");
    }
    Ok((WeightVector(w.iter().map(|v| v / sum).collect()), notice))
}

fn check_weights(w: &WeightVector) -> Result<(), WeightError> {
    if let Some((index, &value)) = w.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
        return Err(WeightError::NotPositive { index, value });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage 1

struct ScenarioProblem<'a> {
    scenario: &'a Scenario,
    opts: &'a SolverOptions,
    bounds: &'a BoxSet,
}

impl NlpProblem for ScenarioProblem<'_> {
    fn bounds(&self) -> &BoxSet {
        self.bounds
    }

    fn objective(&self, z: &[f64]) -> Result<f64, BoxError> {
        Ok(evaluate_cost(self.scenario, z, self.opts)?.total)
    }
}

/// `theta_init` followed by `multistart_count` seeded uniform samples of the
/// parameter box. Open sides are sampled within `1 + |theta_init|` of the
/// initial value.
pub fn start_points(spec: &ProblemSpec, opts: &SolverOptions) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![spec.theta_init.0.clone()];
    for _ in 0..opts.multistart_count {
        let point = spec
            .theta_init
            .iter()
            .zip(spec.theta_bounds.lower.iter().zip(&spec.theta_bounds.upper))
            .map(|(&init, (&lo, &hi))| {
                let radius = 1.0 + init.abs();
                let lo = if lo.is_finite() { lo } else { init - radius };
                let hi = if hi.is_finite() { hi } else { init + radius };
                if hi > lo {
                    rng.gen_range(lo..=hi)
                } else {
                    lo
                }
            })
            .collect();
        starts.push(point);
    }
    starts
}

/// Tunes the parameters separately for every scenario.
pub fn run_stage1(spec: &ProblemSpec, opts: &SolverOptions) -> GoalSet {
    let starts = start_points(spec, opts);
    let entries = spec
        .scenarios
        .par_iter()
        .map(|scenario| stage1_scenario(spec, scenario, &starts, opts))
        .collect();
    GoalSet { entries }
}

fn stage1_scenario(spec: &ProblemSpec, scenario: &Scenario, starts: &[Vec<f64>], opts: &SolverOptions) -> GoalEntry {
    let problem = ScenarioProblem {
        scenario,
        opts,
        bounds: &spec.theta_bounds,
    };
    let runs: Vec<Result<NlpSolution, NlpError>> = starts.par_iter().map(|z0| solve_nlp(&problem, z0, opts)).collect();

    // lowest J wins, then lowest restart index
    let mut best: Option<&NlpSolution> = None;
    let mut first_error = None;
    for run in &runs {
        match run {
            Ok(sol) => {
                if best.is_none_or(|b| sol.f_star < b.f_star) {
                    best = Some(sol);
                }
            }
            Err(e) => {
                first_error.get_or_insert_with(|| e.to_string());
            }
        }
    }
    match best {
        Some(sol) => GoalEntry {
            scenario_id: scenario.id.clone(),
            theta_star: ParameterVector(sol.z_star.clone()),
            j_star: Some(sol.f_star),
            status: GoalStatus::Solver(sol.status),
        },
        None => GoalEntry {
            scenario_id: scenario.id.clone(),
            theta_star: spec.theta_init.clone(),
            j_star: None,
            status: GoalStatus::Failed(first_error.unwrap_or_default()),
        },
    }
}

// ---------------------------------------------------------------------------
// Stage 2

#[derive(Debug, Clone, PartialEq)]
pub struct GoalSolution {
    pub scenario_ids: Vec<String>,
    pub theta_star: ParameterVector,
    /// `(J_i(theta*) - J_i*) / w_i`, recomputed from the final costs.
    pub gamma: Vec<f64>,
    /// `max_i gamma_i` under minimax, `sum_i gamma_i` under weighted_sum.
    pub objective: f64,
    pub costs: Vec<CostValue>,
    pub goals: Vec<f64>,
    pub weights: Vec<f64>,
    pub aggregation_used: Aggregation,
    pub weight_notice: Option<WeightNotice>,
    pub solver: NlpSolution,
}

impl GoalSolution {
    pub fn converged(&self) -> bool {
        self.solver.status == NlpStatus::Converged
    }
}

/// Stage-2 program over `z = (theta, gamma)`.
struct AttainmentProblem<'a> {
    spec: &'a ProblemSpec,
    opts: &'a SolverOptions,
    goals: &'a [f64],
    weights: &'a [f64],
    aggregation: Aggregation,
    bounds: BoxSet,
}

impl AttainmentProblem<'_> {
    fn p(&self) -> usize {
        self.spec.p
    }

    fn costs(&self, theta: &[f64]) -> Result<Vec<f64>, EvaluationError> {
        Ok(evaluate_all_with(self.spec, theta, self.opts)?
            .into_iter()
            .map(|c| c.total)
            .collect())
    }

    fn gamma_of(&self, z: &[f64], i: usize) -> f64 {
        match self.aggregation {
            Aggregation::Minimax => z[self.p()],
            Aggregation::WeightedSum => z[self.p() + i],
        }
    }
}

impl NlpProblem for AttainmentProblem<'_> {
    fn bounds(&self) -> &BoxSet {
        &self.bounds
    }

    fn num_constraints(&self) -> usize {
        self.goals.len()
    }

    fn objective(&self, z: &[f64]) -> Result<f64, BoxError> {
        Ok(z[self.p()..].iter().sum())
    }

    fn constraints(&self, z: &[f64]) -> Result<Vec<f64>, BoxError> {
        let costs = self.costs(&z[..self.p()])?;
        Ok(costs
            .iter()
            .enumerate()
            .map(|(i, j)| j - self.gamma_of(z, i) * self.weights[i] - self.goals[i])
            .collect())
    }

    fn objective_gradient(&self, z: &[f64], _fd_step_scale: f64) -> Result<Vec<f64>, ProbeError> {
        let mut g = vec![0.0; z.len()];
        g[self.p()..].fill(1.0);
        Ok(g)
    }

    fn constraint_jacobian(&self, z: &[f64], fd_step_scale: f64) -> Result<Vec<Vec<f64>>, ProbeError> {
        let p = self.p();
        let d_costs = jacobian(|theta: &[f64]| self.costs(theta), &z[..p], fd_step_scale)?;
        Ok((0..self.goals.len())
            .map(|i| {
                let mut row = vec![0.0; z.len()];
                if p > 0 {
                    row[..p].copy_from_slice(&d_costs[i]);
                }
                let col = match self.aggregation {
                    Aggregation::Minimax => p,
                    Aggregation::WeightedSum => p + i,
                };
                row[col] = -self.weights[i];
                row
            })
            .collect())
    }
}

fn aligned_goals(spec: &ProblemSpec, goals: &GoalSet) -> Result<Vec<f64>, AttainError> {
    if goals.entries.len() != spec.scenarios.len() {
        return Err(AttainError::Misaligned(format!(
            "{} goals for {} scenarios",
            goals.entries.len(),
            spec.scenarios.len()
        )));
    }
    let goals = goals.clone().with_overrides(spec);
    spec.scenarios
        .iter()
        .zip(&goals.entries)
        .map(|(sc, entry)| {
            if entry.scenario_id != sc.id {
                return Err(AttainError::Misaligned(format!(
                    "goal `{}` where scenario `{}` was expected",
                    entry.scenario_id, sc.id
                )));
            }
            entry.j_star.ok_or_else(|| AttainError::MissingGoal(sc.id.clone()))
        })
        .collect()
}

fn weights_for(spec: &ProblemSpec, opts: &SolverOptions) -> Result<(Vec<f64>, Option<WeightNotice>), WeightError> {
    if spec.weights.len() != spec.scenarios.len() {
        return Err(WeightError::Count {
            got: spec.weights.len(),
            want: spec.scenarios.len(),
        });
    }
    if opts.normalize_weights {
        let (w, notice) = normalize_weights(&spec.weights)?;
        Ok((w.0, notice))
    } else {
        check_weights(&spec.weights)?;
        Ok((spec.weights.0.clone(), None))
    }
}

fn max_attainment(costs: &[f64], goals: &[f64], weights: &[f64]) -> f64 {
    costs
        .iter()
        .zip(goals)
        .zip(weights)
        .map(|((j, g), w)| (j - g) / w)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn initial_theta(
    spec: &ProblemSpec,
    goals: &GoalSet,
    goal_values: &[f64],
    weights: &[f64],
    opts: &SolverOptions,
) -> Vec<f64> {
    match opts.warm_start {
        WarmStart::ThetaInit => spec.theta_init.0.clone(),
        WarmStart::BestStage1 => {
            let mut best: Option<(f64, &[f64])> = None;
            for entry in &goals.entries {
                if entry.status == GoalStatus::UserGoal {
                    continue;
                }
                let theta = &entry.theta_star.0;
                let Ok(costs) = evaluate_all_with(spec, theta, opts) else {
                    continue;
                };
                let totals: Vec<f64> = costs.iter().map(|c| c.total).collect();
                let score = max_attainment(&totals, goal_values, weights);
                if best.is_none_or(|(s, _)| score < s) {
                    best = Some((score, theta));
                }
            }
            best.map_or_else(|| spec.theta_init.0.clone(), |(_, t)| t.to_vec())
        }
    }
}

/// Finds one parameter vector for all scenarios against the given goals.
pub fn run_goal_attainment(
    spec: &ProblemSpec,
    goals: &GoalSet,
    opts: &SolverOptions,
) -> Result<GoalSolution, AttainError> {
    let goal_values = aligned_goals(spec, goals)?;
    let (weights, weight_notice) = weights_for(spec, opts)?;
    let n = spec.scenarios.len();
    let p = spec.p;
    let aggregation = opts.aggregation;

    let theta0 = initial_theta(spec, goals, &goal_values, &weights, opts);
    let costs0: Vec<f64> = evaluate_all_with(spec, &theta0, opts)
        .map_err(AttainError::Start)?
        .iter()
        .map(|c| c.total)
        .collect();

    let gammas = match aggregation {
        Aggregation::Minimax => 1,
        Aggregation::WeightedSum => n,
    };
    let mut z0 = theta0.clone();
    match aggregation {
        Aggregation::Minimax => z0.push(max_attainment(&costs0, &goal_values, &weights) + 1.0),
        Aggregation::WeightedSum => z0.extend((0..n).map(|i| (costs0[i] - goal_values[i]) / weights[i] + 1.0)),
    }

    let problem = AttainmentProblem {
        spec,
        opts,
        goals: &goal_values,
        weights: &weights,
        aggregation,
        bounds: spec.theta_bounds.extended(gammas),
    };
    let solver = solve_nlp(&problem, &z0, opts)?;

    let theta_star = solver.z_star[..p].to_vec();
    let costs = evaluate_all_with(spec, &theta_star, opts).map_err(AttainError::Final)?;
    let gamma: Vec<f64> = (0..n).map(|i| (costs[i].total - goal_values[i]) / weights[i]).collect();
    let objective = match aggregation {
        Aggregation::Minimax => gamma.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::WeightedSum => gamma.iter().sum(),
    };

    Ok(GoalSolution {
        scenario_ids: spec.scenario_ids(),
        theta_star: ParameterVector(theta_star),
        gamma,
        objective,
        costs,
        goals: goal_values,
        weights,
        aggregation_used: aggregation,
        weight_notice,
        solver,
    })
}

// ---------------------------------------------------------------------------
// reporting

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attainment {
    /// Achieved cost beat the goal.
    OverAttained,
    Met,
    /// Achieved cost fell short of the goal.
    UnderAttained,
}

impl fmt::Display for Attainment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Attainment::OverAttained => "over-attained",
            Attainment::Met => "met",
            Attainment::UnderAttained => "under-attained",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttainmentRow {
    pub scenario_id: String,
    pub goal: f64,
    pub achieved: f64,
    pub deviation: f64,
    pub gamma: f64,
    pub class: Attainment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttainmentReport {
    pub rows: Vec<AttainmentRow>,
}

pub fn classify(deviation: f64, tol: f64) -> Attainment {
    if deviation > tol {
        Attainment::UnderAttained
    } else if deviation < -tol {
        Attainment::OverAttained
    } else {
        Attainment::Met
    }
}

/// Per-scenario deviation of the achieved cost from its goal. The goals
/// recorded in `solution` are the ones it was solved against, so the goal
/// set only supplies scenario ids here.
pub fn attainment_report(spec: &ProblemSpec, goals: &GoalSet, solution: &GoalSolution) -> AttainmentReport {
    let tol = spec.options.feas_tol;
    let rows = goals
        .entries
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let goal = solution.goals[i];
            let achieved = solution.costs[i].total;
            let deviation = achieved - goal;
            AttainmentRow {
                scenario_id: entry.scenario_id.clone(),
                goal,
                achieved,
                deviation,
                gamma: deviation / solution.weights[i],
                class: classify(deviation, tol),
            }
        })
        .collect();
    AttainmentReport { rows }
}

// ---------------------------------------------------------------------------
// weight sweep

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub weights: Vec<f64>,
    pub theta: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub costs: Option<Vec<f64>>,
    /// Solver status, or `error` when the row could not be solved.
    pub status: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub scenario_ids: Vec<String>,
    pub p: usize,
    pub rows: Vec<SweepRow>,
}

/// Re-solves Stage 2 for each weight vector, always from the same start.
pub fn weight_sweep(
    spec: &ProblemSpec,
    goals: &GoalSet,
    weight_list: &[WeightVector],
    opts: &SolverOptions,
) -> SweepTable {
    let rows = weight_list
        .par_iter()
        .map(|w| {
            let mut variant = spec.clone();
            variant.weights = w.clone();
            match run_goal_attainment(&variant, goals, opts) {
                Ok(sol) => SweepRow {
                    weights: w.0.clone(),
                    theta: Some(sol.theta_star.0.clone()),
                    gamma: Some(sol.gamma.clone()),
                    costs: Some(sol.costs.iter().map(|c| c.total).collect()),
                    status: sol.solver.status.to_string(),
                    error: None,
                },
                Err(e) => SweepRow {
                    weights: w.0.clone(),
                    theta: None,
                    gamma: None,
                    costs: None,
                    status: "error".into(),
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    SweepTable {
        scenario_ids: spec.scenario_ids(),
        p: spec.p,
        rows,
    }
}
