//! Problem files, result files and CSV exports.
//!
//! Problem and result documents are JSON carrying `"schema": 1`. Reals are
//! written with 17 significant digits so that reading a file back gives the
//! same bits. Open bounds are written as `null`. CSV output is comma
//! separated with LF line endings and never needs quoting.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::Formatter;
use serde_json::Value;
use thiserror::Error;

use crate::dynamics::Trajectory;
use crate::expr::{Formula, ParseError};
use crate::model::{
    validate_problem, Aggregation, BoxSet, GoalOverride, ParameterVector, ProblemSpec, Scenario, SolverOptions,
    StateVector, ValidationReport, WeightVector,
};
use crate::pipeline::{GoalEntry, GoalSet, GoalSolution, GoalStatus, SweepTable};
use crate::sqp::{IterationRecord, NlpStatus};

pub const SCHEMA_VERSION: u64 = 1;

// ---------------------------------------------------------------------------
// problem files

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    schema: u64,
    parameters: ParametersFile,
    weights: Vec<f64>,
    scenarios: Vec<ScenarioFile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    goals: Vec<GoalOverrideFile>,
    #[serde(default)]
    options: SolverOptions,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParametersFile {
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lower: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    upper: Option<Vec<Option<f64>>>,
    init: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    id: String,
    dynamics: Vec<String>,
    x0: Vec<f64>,
    #[serde(default)]
    t0: f64,
    tf: f64,
    #[serde(default = "zero_expr")]
    terminal_cost: String,
    #[serde(default = "zero_expr")]
    running_cost: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state_lower: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state_upper: Option<Vec<Option<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GoalOverrideFile {
    id: String,
    #[serde(rename = "J_star")]
    j_star: f64,
}

fn zero_expr() -> String {
    "0".into()
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("invalid JSON at line {line}, column {column} (byte {offset}): {message}")]
    Syntax {
        line: usize,
        column: usize,
        offset: usize,
        message: String,
    },
    #[error("`{path}`: {message}")]
    Decode { path: String, message: String },
    #[error("`schema`: unsupported schema version {found}, expected {SCHEMA_VERSION}")]
    Schema { found: String },
    #[error("`{path}` (scenario {scenario}): {source}")]
    Expression {
        path: String,
        scenario: String,
        source: ParseError,
    },
    #[error("{}", join_findings(.0))]
    Invalid(ValidationReport),
}

impl LoadError {
    /// Document path of the failure, when there is one.
    pub fn path(&self) -> Option<&str> {
        match self {
            LoadError::Decode { path, .. } | LoadError::Expression { path, .. } => Some(path),
            LoadError::Schema { .. } => Some("schema"),
            LoadError::Invalid(report) => report.findings.first().map(|f| f.field.as_str()),
            LoadError::Syntax { .. } => None,
        }
    }
}

fn join_findings(report: &ValidationReport) -> String {
    report
        .findings
        .iter()
        .map(|f| f.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Parses `text` and checks the schema version; returns the raw document.
fn parse_document(text: &str) -> Result<Value, LoadError> {
    let value: Value = serde_json::from_str(text).map_err(|e| LoadError::Syntax {
        line: e.line(),
        column: e.column(),
        offset: byte_offset(text, e.line(), e.column()),
        message: strip_position(&e),
    })?;
    match value.get("schema") {
        Some(Value::Number(n)) if n.as_u64() == Some(SCHEMA_VERSION) => Ok(value),
        Some(other) => Err(LoadError::Schema {
            found: other.to_string(),
        }),
        None => Err(LoadError::Decode {
            path: "schema".into(),
            message: "missing field `schema`".into(),
        }),
    }
}

/// serde_json appends "at line L column C", which is meaningless for a
/// document decoded from a tree.
fn strip_position(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg,
    }
}

fn decode<T: DeserializeOwned>(value: Value) -> Result<T, LoadError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let mut path = e.path().to_string();
        let message = strip_position(e.inner());
        if let Some(field) = message
            .strip_prefix("missing field `")
            .and_then(|m| m.strip_suffix('`'))
        {
            path = if path == "." {
                field.to_string()
            } else {
                format!("{path}.{field}")
            };
        }
        LoadError::Decode { path, message }
    })
}

fn open_box(lower: Option<Vec<Option<f64>>>, upper: Option<Vec<Option<f64>>>, dim: usize) -> BoxSet {
    let side = |v: Option<Vec<Option<f64>>>, open: f64| match v {
        Some(v) => v.into_iter().map(|x| x.unwrap_or(open)).collect(),
        None => vec![open; dim],
    };
    BoxSet::new(side(lower, f64::NEG_INFINITY), side(upper, f64::INFINITY))
}

fn closed_side(v: &[f64]) -> Option<Vec<Option<f64>>> {
    if v.iter().all(|x| x.is_infinite()) {
        return None;
    }
    Some(v.iter().map(|&x| x.is_finite().then_some(x)).collect())
}

fn compile(source: &str, path: String, scenario: &str) -> Result<Formula, LoadError> {
    Formula::parse(source).map_err(|source| LoadError::Expression {
        path,
        scenario: scenario.to_string(),
        source,
    })
}

/// Decodes a problem file without rejecting it on validation findings.
pub fn load_problem_unchecked(text: &str) -> Result<(ProblemSpec, ValidationReport), LoadError> {
    let file: ProblemFile = decode(parse_document(text)?)?;
    let p = file.parameters.dim;
    let mut scenarios = Vec::with_capacity(file.scenarios.len());
    for (i, sc) in file.scenarios.into_iter().enumerate() {
        let dynamics = sc
            .dynamics
            .iter()
            .enumerate()
            .map(|(k, src)| compile(src, format!("scenarios[{i}].dynamics[{k}]"), &sc.id))
            .collect::<Result<Vec<_>, _>>()?;
        let terminal_cost = compile(&sc.terminal_cost, format!("scenarios[{i}].terminal_cost"), &sc.id)?;
        let running_cost = compile(&sc.running_cost, format!("scenarios[{i}].running_cost"), &sc.id)?;
        let n = sc.x0.len();
        scenarios.push(Scenario {
            id: sc.id,
            dynamics,
            x0: StateVector(sc.x0),
            t0: sc.t0,
            tf: sc.tf,
            terminal_cost,
            running_cost,
            state_bounds: open_box(sc.state_lower, sc.state_upper, n),
        });
    }
    let spec = ProblemSpec {
        scenarios,
        p,
        theta_bounds: open_box(file.parameters.lower, file.parameters.upper, p),
        theta_init: ParameterVector(file.parameters.init),
        weights: WeightVector(file.weights),
        goals: file
            .goals
            .into_iter()
            .map(|g| GoalOverride {
                id: g.id,
                j_star: g.j_star,
            })
            .collect(),
        options: file.options,
    };
    let report = validate_problem(&spec);
    Ok((spec, report))
}

/// Decodes and validates a problem file.
pub fn load_problem(text: &str) -> Result<ProblemSpec, LoadError> {
    let (spec, report) = load_problem_unchecked(text)?;
    if report.is_ok() {
        Ok(spec)
    } else {
        Err(LoadError::Invalid(report))
    }
}

/// Serializes a spec in the problem-file format.
pub fn problem_to_json(spec: &ProblemSpec) -> String {
    let file = ProblemFile {
        schema: SCHEMA_VERSION,
        parameters: ParametersFile {
            dim: spec.p,
            lower: closed_side(&spec.theta_bounds.lower),
            upper: closed_side(&spec.theta_bounds.upper),
            init: spec.theta_init.0.clone(),
        },
        weights: spec.weights.0.clone(),
        scenarios: spec
            .scenarios
            .iter()
            .map(|sc| ScenarioFile {
                id: sc.id.clone(),
                dynamics: sc.dynamics.iter().map(|f| f.source().to_string()).collect(),
                x0: sc.x0.0.clone(),
                t0: sc.t0,
                tf: sc.tf,
                terminal_cost: sc.terminal_cost.source().to_string(),
                running_cost: sc.running_cost.source().to_string(),
                state_lower: closed_side(&sc.state_bounds.lower),
                state_upper: closed_side(&sc.state_bounds.upper),
            })
            .collect(),
        goals: spec
            .goals
            .iter()
            .map(|g| GoalOverrideFile {
                id: g.id.clone(),
                j_star: g.j_star,
            })
            .collect(),
        options: spec.options.clone(),
    };
    to_json(&file)
}

// ---------------------------------------------------------------------------
// result files

/// Writes every `f64` with 17 significant digits.
struct Exact;

impl Formatter for Exact {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{}", exact(value))
    }
}

/// 17 significant digits in scientific notation; enough to round-trip.
pub fn exact(value: f64) -> String {
    format!("{value:.16e}")
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Exact);
    value.serialize(&mut ser).expect("serializing to memory cannot fail");
    buf.push(b'\n');
    String::from_utf8(buf).expect("serde_json writes UTF-8")
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GoalSetFile {
    schema: u64,
    goals: Vec<GoalEntryFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GoalEntryFile {
    id: String,
    theta_star: Vec<f64>,
    #[serde(rename = "J_star")]
    j_star: Option<f64>,
    status: String,
}

fn parse_status(s: &str) -> Option<GoalStatus> {
    if s == "user_goal" {
        return Some(GoalStatus::UserGoal);
    }
    if let Some(msg) = s.strip_prefix("failed: ") {
        return Some(GoalStatus::Failed(msg.to_string()));
    }
    serde_json::from_value::<NlpStatus>(Value::String(s.to_string()))
        .ok()
        .map(GoalStatus::Solver)
}

pub fn goal_set_to_json(goals: &GoalSet) -> String {
    to_json(&GoalSetFile {
        schema: SCHEMA_VERSION,
        goals: goals
            .entries
            .iter()
            .map(|e| GoalEntryFile {
                id: e.scenario_id.clone(),
                theta_star: e.theta_star.0.clone(),
                j_star: e.j_star,
                status: e.status.to_string(),
            })
            .collect(),
    })
}

pub fn read_goal_set(text: &str) -> Result<GoalSet, LoadError> {
    let file: GoalSetFile = decode(parse_document(text)?)?;
    let entries = file
        .goals
        .into_iter()
        .enumerate()
        .map(|(i, g)| {
            let status = parse_status(&g.status).ok_or_else(|| LoadError::Decode {
                path: format!("goals[{i}].status"),
                message: format!("unknown status `{}`", g.status),
            })?;
            Ok(GoalEntry {
                scenario_id: g.id,
                theta_star: ParameterVector(g.theta_star),
                j_star: g.j_star,
                status,
            })
        })
        .collect::<Result<_, LoadError>>()?;
    Ok(GoalSet { entries })
}

#[derive(Serialize)]
struct SolutionFile<'a> {
    schema: u64,
    aggregation: Aggregation,
    scenario_ids: &'a [String],
    theta_star: &'a [f64],
    gamma: &'a [f64],
    objective: f64,
    weights: &'a [f64],
    #[serde(rename = "J_star")]
    goals: &'a [f64],
    costs: Vec<CostFile<'a>>,
    solver: SolverFile<'a>,
}

#[derive(Serialize)]
struct CostFile<'a> {
    id: &'a str,
    total: f64,
    terminal: f64,
    running: f64,
    bound_penalty: f64,
}

#[derive(Serialize)]
struct SolverFile<'a> {
    status: NlpStatus,
    iterations: usize,
    objective: f64,
    kkt_residual: f64,
    feasibility_residual: f64,
    multipliers: &'a [f64],
    bound_multipliers: &'a [f64],
}

pub fn goal_solution_to_json(sol: &GoalSolution) -> String {
    to_json(&SolutionFile {
        schema: SCHEMA_VERSION,
        aggregation: sol.aggregation_used,
        scenario_ids: &sol.scenario_ids,
        theta_star: &sol.theta_star,
        gamma: &sol.gamma,
        objective: sol.objective,
        weights: &sol.weights,
        goals: &sol.goals,
        costs: sol
            .scenario_ids
            .iter()
            .zip(&sol.costs)
            .map(|(id, c)| CostFile {
                id,
                total: c.total,
                terminal: c.terminal_part,
                running: c.running_part,
                bound_penalty: c.bound_penalty,
            })
            .collect(),
        solver: SolverFile {
            status: sol.solver.status,
            iterations: sol.solver.iterations,
            objective: sol.solver.f_star,
            kkt_residual: sol.solver.kkt_residual,
            feasibility_residual: sol.solver.feasibility_residual,
            multipliers: &sol.solver.multipliers,
            bound_multipliers: &sol.solver.bound_multipliers,
        },
    })
}

// ---------------------------------------------------------------------------
// CSV

fn csv_table(header: Vec<String>, rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(&header).expect("writing to memory cannot fail");
    for row in rows {
        w.write_record(&row).expect("writing to memory cannot fail");
    }
    let buf = w.into_inner().expect("flushing memory cannot fail");
    String::from_utf8(buf).expect("CSV fields are UTF-8")
}

fn cells(values: &[f64]) -> impl Iterator<Item = String> + '_ {
    values.iter().map(|&v| exact(v))
}

fn optional_cells(values: Option<&Vec<f64>>, width: usize) -> Vec<String> {
    match values {
        Some(v) => cells(v).collect(),
        None => vec![String::new(); width],
    }
}

fn prefixed<'a>(prefix: &str, ids: &'a [String]) -> impl Iterator<Item = String> + 'a {
    let prefix = prefix.to_string();
    ids.iter().map(move |id| format!("{prefix}{id}"))
}

/// Columns `t, x0, .., x{n-1}, q` where `q` is the running-cost integral.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let n = traj.states.first().map_or(0, |s| s.len());
    let header = std::iter::once("t".to_string())
        .chain((0..n).map(|i| format!("x{i}")))
        .chain(std::iter::once("q".to_string()))
        .collect();
    let rows = traj.times.iter().enumerate().map(|(k, &t)| {
        std::iter::once(exact(t))
            .chain(cells(&traj.states[k]))
            .chain(std::iter::once(exact(traj.running_cost_accumulator[k])))
            .collect()
    });
    csv_table(header, rows)
}

/// Columns `w_<id>.., theta<j>.., gamma_<id>.., J_<id>.., status`. Rows that
/// failed keep their weights and leave the numeric cells empty.
pub fn sweep_csv(table: &SweepTable) -> String {
    let ids = &table.scenario_ids;
    let n = ids.len();
    let header = prefixed("w_", ids)
        .chain((0..table.p).map(|j| format!("theta{j}")))
        .chain(prefixed("gamma_", ids))
        .chain(prefixed("J_", ids))
        .chain(std::iter::once("status".to_string()))
        .collect();
    let rows = table.rows.iter().map(|r| {
        let mut row: Vec<String> = cells(&r.weights).collect();
        row.extend(optional_cells(r.theta.as_ref(), table.p));
        row.extend(optional_cells(r.gamma.as_ref(), n));
        row.extend(optional_cells(r.costs.as_ref(), n));
        row.push(r.status.clone());
        row
    });
    csv_table(header, rows)
}

/// One row per weight vector: `w_<id>.., J_<id>.., gamma_<id>..`.
pub fn plot_data_csv(table: &SweepTable) -> String {
    let ids = &table.scenario_ids;
    let n = ids.len();
    let header = prefixed("w_", ids)
        .chain(prefixed("J_", ids))
        .chain(prefixed("gamma_", ids))
        .collect();
    let rows = table.rows.iter().map(|r| {
        let mut row: Vec<String> = cells(&r.weights).collect();
        row.extend(optional_cells(r.costs.as_ref(), n));
        row.extend(optional_cells(r.gamma.as_ref(), n));
        row
    });
    csv_table(header, rows)
}

pub fn trace_csv(trace: &[IterationRecord]) -> String {
    let header = ["iteration", "f", "merit", "step_length", "kkt_residual"]
        .map(String::from)
        .to_vec();
    let rows = trace.iter().map(|r| {
        vec![
            r.iteration.to_string(),
            exact(r.f),
            exact(r.merit),
            exact(r.step_length),
            exact(r.kkt_residual),
        ]
    });
    csv_table(header, rows)
}

#[derive(Debug, Error)]
#[error("weights file line {line}: {message}")]
pub struct GridError {
    pub line: u64,
    pub message: String,
}

/// Reads one weight vector per CSV row. Lines starting with `#` are
/// comments, and a first row with no numeric field is taken as a header.
pub fn parse_weight_grid(text: &str) -> Result<Vec<WeightVector>, GridError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut grid = Vec::new();
    let mut width = None;
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| GridError {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let parsed: Vec<Result<f64, _>> = record.iter().map(str::parse::<f64>).collect();
        if k == 0 && parsed.iter().all(Result::is_err) {
            width = Some(record.len());
            continue;
        }
        let row = parsed
            .into_iter()
            .zip(record.iter())
            .enumerate()
            .map(|(col, (v, raw))| {
                v.map_err(|_| GridError {
                    line,
                    message: format!("column {}: `{raw}` is not a number", col + 1),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(GridError {
                line,
                message: format!("expected {} weights, found {}", width.unwrap_or(0), row.len()),
            });
        }
        grid.push(WeightVector(row));
    }
    Ok(grid)
}

// ---------------------------------------------------------------------------
// files

#[derive(Debug, Error)]
pub struct FileError {
    pub path: PathBuf,
    pub error: io::Error,
}

impl fmt::Display for FileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path.display(), self.error)
    }
}

pub fn read_text(path: &Path) -> Result<String, FileError> {
    fs::read_to_string(path).map_err(|error| FileError {
        path: path.to_path_buf(),
        error,
    })
}

pub fn write_text(path: &Path, contents: &str) -> Result<(), FileError> {
    fs::write(path, contents).map_err(|error| FileError {
        path: path.to_path_buf(),
        error,
    })
}
