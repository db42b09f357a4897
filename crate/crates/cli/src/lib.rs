//! The `attain` command line. Every command is a thin wrapper over the
//! library; file outputs are exactly what the library serializers produce.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use goal_attain::cost::evaluate_cost;
use goal_attain::dynamics::integrate;
use goal_attain::io::{
    goal_set_to_json, goal_solution_to_json, load_problem, parse_weight_grid, plot_data_csv, read_goal_set, read_text,
    sweep_csv, trace_csv, trajectory_csv, write_text,
};
use goal_attain::model::{Aggregation, ProblemSpec};
use goal_attain::pipeline::{attainment_report, run_goal_attainment, run_stage1, weight_sweep, GoalSet};

/// Exit code for usage errors.
pub const USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "attain",
    version,
    about = "Two-stage goal-attainment tuning over multiple scenarios"
)]
struct Cli {
    /// Maximum number of worker threads
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: Option<u16>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a problem file
    Validate { file: PathBuf },
    /// Simulate one scenario and write its trajectory
    Simulate {
        file: PathBuf,
        #[arg(long)]
        scenario: String,
        /// Comma-separated parameter values; defaults to the initial parameters
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        theta: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tune every scenario separately and write the goals
    Stage1 {
        file: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the goal-attainment problem
    Attain {
        file: PathBuf,
        /// Goals from `stage1`; computed on the fly when omitted
        #[arg(long)]
        goals: Option<PathBuf>,
        #[arg(long)]
        aggregation: Option<AggregationArg>,
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration solver trace (CSV)
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Re-solve for every weight vector of a grid
    Sweep {
        file: PathBuf,
        #[arg(long)]
        goals: PathBuf,
        #[arg(long)]
        weights_file: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plot_data: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AggregationArg {
    Minimax,
    WeightedSum,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Minimax => Aggregation::Minimax,
            AggregationArg::WeightedSum => Aggregation::WeightedSum,
        }
    }
}

/// What a command printed, and the failure it ended with, if any.
struct Outcome {
    summary: String,
    failure: Option<String>,
}

impl Outcome {
    fn ok(summary: String) -> Self {
        Outcome { summary, failure: None }
    }
}

/// Runs one invocation. `seed` is the value of `ATTAIN_SEED`, if set.
pub fn run<I, T>(args: I, seed: Option<&str>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(stdout, "{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("error: invalid arguments");
            let _ = writeln!(stderr, "{line}");
            return USAGE;
        }
    };
    let seed = match seed.map(str::parse::<u64>).transpose() {
        Ok(s) => s,
        Err(_) => {
            let _ = writeln!(stderr, "error: ATTAIN_SEED must be a non-negative integer");
            return USAGE;
        }
    };

    let result = match cli.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.into())
            .build()
            .map_err(anyhow::Error::from)
            .and_then(|pool| pool.install(|| dispatch(cli.command, seed))),
        None => dispatch(cli.command, seed),
    };

    match result {
        Ok(outcome) => {
            let _ = stdout.write_all(outcome.summary.as_bytes());
            match outcome.failure {
                None => 0,
                Some(msg) => {
                    let _ = writeln!(stderr, "error: {msg}");
                    1
                }
            }
        }
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            let _ = writeln!(stderr, "error: {msg}");
            1
        }
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<ProblemSpec> {
    let text = read_text(path)?;
    let mut spec = load_problem(&text).with_context(|| path.display().to_string())?;
    if let Some(seed) = seed {
        spec.options.seed = seed;
    }
    Ok(spec)
}

fn load_goals(path: &Path) -> Result<GoalSet> {
    let text = read_text(path)?;
    read_goal_set(&text).with_context(|| path.display().to_string())
}

fn tuple(values: &[f64], precision: usize) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.precision$}")).collect();
    format!("({})", parts.join(", "))
}

fn dispatch(command: Command, seed: Option<u64>) -> Result<Outcome> {
    match command {
        Command::Validate { file } => {
            let spec = load(&file, seed)?;
            Ok(Outcome::ok(format!(
                "ok: N={} scenarios, p={} parameters\n",
                spec.scenarios.len(),
                spec.p
            )))
        }
        Command::Simulate {
            file,
            scenario,
            theta,
            out,
        } => {
            let spec = load(&file, seed)?;
            let sc = spec
                .scenario(&scenario)
                .ok_or_else(|| anyhow!("unknown scenario `{scenario}`"))?;
            let theta = theta.unwrap_or_else(|| spec.theta_init.0.clone());
            if theta.len() != spec.p {
                bail!("--theta has {} values, the problem has p={}", theta.len(), spec.p);
            }
            let traj =
                integrate(sc, &theta, spec.options.integrator_steps).with_context(|| format!("scenario {scenario}"))?;
            write_text(&out, &trajectory_csv(&traj))?;
            let cost = evaluate_cost(sc, &theta, &spec.options).with_context(|| format!("scenario {scenario}"))?;
            Ok(Outcome::ok(format!(
                "scenario {scenario}: J = {:.6e} (terminal {:.6e}, running {:.6e}), {} samples\n",
                cost.total,
                cost.terminal_part,
                cost.running_part,
                traj.times.len()
            )))
        }
        Command::Stage1 { file, out } => {
            let spec = load(&file, seed)?;
            let goals = run_stage1(&spec, &spec.options);
            write_text(&out, &goal_set_to_json(&goals))?;
            let width = goals
                .entries
                .iter()
                .map(|e| e.scenario_id.len())
                .max()
                .unwrap_or(0)
                .max(8);
            let mut summary = format!("{:<width$}  {:>14}  status\n", "scenario", "J*");
            for e in &goals.entries {
                let j = e.j_star.map_or("-".to_string(), |j| format!("{j:.6e}"));
                let _ = writeln!(summary, "{:<width$}  {:>14}  {}", e.scenario_id, j, e.status);
            }
            let failed: Vec<&str> = goals
                .entries
                .iter()
                .filter(|e| !e.status.is_converged())
                .map(|e| e.scenario_id.as_str())
                .collect();
            let failure = (!failed.is_empty()).then(|| format!("stage 1 did not converge for {}", failed.join(", ")));
            Ok(Outcome { summary, failure })
        }
        Command::Attain {
            file,
            goals,
            aggregation,
            out,
            trace,
        } => {
            let mut spec = load(&file, seed)?;
            if let Some(a) = aggregation {
                spec.options.aggregation = a.into();
            }
            let goals = match goals {
                Some(path) => load_goals(&path)?,
                None => GoalSet::from_problem(&spec).unwrap_or_else(|| run_stage1(&spec, &spec.options)),
            };
            let sol = run_goal_attainment(&spec, &goals, &spec.options)?;
            write_text(&out, &goal_solution_to_json(&sol))?;
            if let Some(path) = trace {
                write_text(&path, &trace_csv(&sol.solver.trace))?;
            }

            let mut summary = String::new();
            if let Some(notice) = sol.weight_notice {
                let _ = writeln!(summary, "note: {notice}");
            }
            let _ = writeln!(summary, "θ* = {}", tuple(&sol.theta_star, 6));
            let _ = writeln!(summary, "γ = {}", tuple(&sol.gamma, 3));
            let _ = writeln!(summary, "objective ({}) = {:.6}", sol.aggregation_used, sol.objective);
            for row in attainment_report(&spec, &goals, &sol).rows {
                let _ = writeln!(
                    summary,
                    "  {}: J = {:.6e}, goal = {:.6e}, deviation = {:+.3e}, {}",
                    row.scenario_id, row.achieved, row.goal, row.deviation, row.class
                );
            }
            let _ = writeln!(
                summary,
                "solver: {} after {} iterations",
                sol.solver.status, sol.solver.iterations
            );
            let failure =
                (!sol.converged()).then(|| format!("goal attainment did not converge ({})", sol.solver.status));
            Ok(Outcome { summary, failure })
        }
        Command::Sweep {
            file,
            goals,
            weights_file,
            out,
            plot_data,
        } => {
            let spec = load(&file, seed)?;
            let goals = load_goals(&goals)?;
            let grid =
                parse_weight_grid(&read_text(&weights_file)?).with_context(|| weights_file.display().to_string())?;
            let n = spec.scenarios.len();
            if let Some(w) = grid.iter().find(|w| w.len() != n) {
                bail!(
                    "{}: weight vectors have {} entries for {} scenarios",
                    weights_file.display(),
                    w.len(),
                    n
                );
            }
            let table = weight_sweep(&spec, &goals, &grid, &spec.options);
            write_text(&out, &sweep_csv(&table))?;
            if let Some(path) = plot_data {
                write_text(&path, &plot_data_csv(&table))?;
            }
            let failed = table.rows.iter().filter(|r| r.status != "converged").count();
            let summary = format!(
                "sweep: {} weight vectors, {} converged\n",
                table.rows.len(),
                table.rows.len() - failed
            );
            let failure = (failed > 0).then(|| format!("{failed} of {} sweep rows did not converge", table.rows.len()));
            Ok(Outcome { summary, failure })
        }
    }
}
