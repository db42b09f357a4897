use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use goal_attain::dynamics::integrate;
use goal_attain::io::{
    goal_set_to_json, goal_solution_to_json, load_problem, parse_weight_grid, plot_data_csv, read_goal_set, sweep_csv,
    trace_csv, trajectory_csv,
};
use goal_attain::model::ProblemSpec;
use goal_attain::pipeline::{run_goal_attainment, run_stage1, weight_sweep};

fn problem(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../problems")
        .join(name)
}

fn spec(name: &str) -> ProblemSpec {
    load_problem(&fs::read_to_string(problem(name)).unwrap()).unwrap()
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn attain(args: &[&str]) -> Run {
    attain_with_seed(args, None)
}

fn attain_with_seed(args: &[&str], seed: Option<&str>) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("attain").chain(args.iter().copied());
    let code = goal_attain_cli::run(argv, seed, &mut out, &mut err);
    Run {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_single_error_line(run: &Run) {
    assert_eq!(run.stderr.lines().count(), 1, "{}", run.stderr);
    assert!(run.stderr.starts_with("error: "), "{}", run.stderr);
}

#[test]
fn validate_reports_sizes() {
    let run = attain(&["validate", s(&problem("two_scenario.json"))]);
    assert_eq!(run.code, 0);
    assert_eq!(run.stdout, "ok: N=2 scenarios, p=3 parameters\n");
}

#[test]
fn validate_rejects_negative_weight() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(problem("conflicting_quadratics.json"))
        .unwrap()
        .replace("\"weights\": [0.5, 0.5]", "\"weights\": [0.5, -0.1]");
    let path = dir.path().join("bad.json");
    fs::write(&path, text).unwrap();
    let run = attain(&["validate", s(&path)]);
    assert_eq!(run.code, 1);
    assert_single_error_line(&run);
    assert!(run.stderr.contains("weight not positive"));
    assert!(run.stderr.contains("weights[1]"));
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        vec!["frobnicate"],
        vec!["stage1"],
        vec!["attain", "x.json", "--out", "y.json", "--aggregation", "median"],
        vec!["--jobs", "0", "validate", "x.json"],
    ] {
        let run = attain(&args);
        assert_eq!(run.code, 2, "{args:?}");
        assert_single_error_line(&run);
    }
    let run = attain_with_seed(&["validate", s(&problem("two_scenario.json"))], Some("abc"));
    assert_eq!(run.code, 2);
    assert_single_error_line(&run);
}

#[test]
fn missing_file_is_an_error() {
    let run = attain(&["validate", "/nonexistent/problem.json"]);
    assert_eq!(run.code, 1);
    assert_single_error_line(&run);
    assert!(run.stderr.contains("/nonexistent/problem.json"));
}

#[test]
fn help_goes_to_stdout() {
    let run = attain(&["--help"]);
    assert_eq!(run.code, 0);
    assert!(run.stdout.contains("stage1"));
}

#[test]
fn outputs_match_library_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let file = problem("conflicting_quadratics.json");
    let spec = spec("conflicting_quadratics.json");

    let run = attain(&["stage1", s(&file), "--out", s(&d.join("goals.json"))]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let goals = run_stage1(&spec, &spec.options);
    assert_eq!(
        fs::read_to_string(d.join("goals.json")).unwrap(),
        goal_set_to_json(&goals)
    );
    assert!(run.stdout.contains("left") && run.stdout.contains("right"));

    let run = attain(&[
        "attain",
        s(&file),
        "--goals",
        s(&d.join("goals.json")),
        "--aggregation",
        "minimax",
        "--out",
        s(&d.join("sol.json")),
        "--trace",
        s(&d.join("trace.csv")),
    ]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    assert!(run.stdout.contains("γ = (2.000, 2.000)"), "{}", run.stdout);
    let read_back = read_goal_set(&fs::read_to_string(d.join("goals.json")).unwrap()).unwrap();
    let sol = run_goal_attainment(&spec, &read_back, &spec.options).unwrap();
    assert_eq!(
        fs::read_to_string(d.join("sol.json")).unwrap(),
        goal_solution_to_json(&sol)
    );
    assert_eq!(
        fs::read_to_string(d.join("trace.csv")).unwrap(),
        trace_csv(&sol.solver.trace)
    );

    let weights = d.join("w.csv");
    fs::write(&weights, "0.9,0.1\n0.5,0.5\n0.1,0.9\n0.3,0.7\n").unwrap();
    let run = attain(&[
        "sweep",
        s(&file),
        "--goals",
        s(&d.join("goals.json")),
        "--weights-file",
        s(&weights),
        "--out",
        s(&d.join("sweep.csv")),
        "--plot-data",
        s(&d.join("plot.csv")),
    ]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let grid = parse_weight_grid(&fs::read_to_string(&weights).unwrap()).unwrap();
    let table = weight_sweep(&spec, &read_back, &grid, &spec.options);
    assert_eq!(fs::read_to_string(d.join("sweep.csv")).unwrap(), sweep_csv(&table));
    let plot = fs::read_to_string(d.join("plot.csv")).unwrap();
    assert_eq!(plot, plot_data_csv(&table));
    assert_eq!(plot.lines().count() - 1, grid.len());

    let run = attain(&[
        "simulate",
        s(&file),
        "--scenario",
        "right",
        "--theta",
        "-0.25",
        "--out",
        s(&d.join("traj.csv")),
    ]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let traj = integrate(spec.scenario("right").unwrap(), &[-0.25], spec.options.integrator_steps).unwrap();
    assert_eq!(fs::read_to_string(d.join("traj.csv")).unwrap(), trajectory_csv(&traj));
}

#[test]
fn attain_without_goals_runs_stage1() {
    let dir = tempfile::tempdir().unwrap();
    let run = attain(&[
        "attain",
        s(&problem("conflicting_quadratics.json")),
        "--out",
        s(&dir.path().join("sol.json")),
    ]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    assert!(run.stdout.contains("γ = (2.000, 2.000)"));
}

#[test]
fn weight_grid_width_must_match() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let file = problem("conflicting_quadratics.json");
    assert_eq!(attain(&["stage1", s(&file), "--out", s(&d.join("g.json"))]).code, 0);
    fs::write(d.join("w.csv"), "0.2,0.3,0.5\n").unwrap();
    let run = attain(&[
        "sweep",
        s(&file),
        "--goals",
        s(&d.join("g.json")),
        "--weights-file",
        s(&d.join("w.csv")),
        "--out",
        s(&d.join("sweep.csv")),
    ]);
    assert_eq!(run.code, 1);
    assert_single_error_line(&run);
}

#[test]
fn binary_honours_seed_and_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let file = problem("first_order_tuning.json");
    let status = Command::new(env!("CARGO_BIN_EXE_attain"))
        .args(["--jobs", "1", "stage1", s(&file), "--out", s(&d.join("g.json"))])
        .env("ATTAIN_SEED", "11")
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let mut spec = spec("first_order_tuning.json");
    spec.options.seed = 11;
    let goals = run_stage1(&spec, &spec.options);
    assert_eq!(fs::read_to_string(d.join("g.json")).unwrap(), goal_set_to_json(&goals));

    let bad = Command::new(env!("CARGO_BIN_EXE_attain")).arg("nope").output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
