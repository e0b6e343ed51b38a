//! `contiplan plan|simulate|bench`: runs one experiment described by a
//! scenario file and writes its results as CSV for external plotting.
//!
//! Column layouts are listed in `docs/formats.md`.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, ValueEnum};
use contiplan::bench::{render_report, run_trials, summarize};
use contiplan::planner::{execute_dynamic, plan, FailureReason, Method};
use contiplan::scenario::{ParseError, Scenario};

pub mod output;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// Unreadable or invalid scenario, bad flags, or unwritable output.
    pub const CONFIG: i32 = 1;
    /// `plan`: no path found. `simulate`: the robot hit an obstacle.
    pub const FAILED: i32 = 2;
    /// `simulate`: out of steps, or replanning kept failing.
    pub const BUDGET: i32 = 3;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Plan once from the start and export the path.
    Plan,
    /// Execute among the (moving) obstacles with replanning.
    Simulate,
    /// Random-scenario RRT vs RRT* benchmark.
    Bench,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Rrt,
    RrtStar,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Rrt => Method::Rrt,
            MethodArg::RrtStar => Method::RrtStar,
        }
    }
}

#[derive(Debug, Clone, Parser)]
#[command(
    name = "contiplan",
    version,
    about = "Safety-constrained motion planning for cable-driven continuum robots"
)]
pub struct Cli {
    pub command: Command,
    /// Scenario JSON file.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the scenario's rng_seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the planner method (bench: runs only this method).
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Trials per (method, obstacle count) cell; bench only.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Sets the obstacle penalty to zero, disabling body-level safety.
    #[arg(long)]
    pub ablation_no_safety: bool,
    /// Leaves wall-clock columns empty so bench output is reproducible byte for byte.
    #[arg(long)]
    pub no_timing: bool,
}

/// Scenario with the command-line overrides applied.
pub fn load_scenario(cli: &Cli) -> Result<Scenario, ParseError> {
    let mut scenario = Scenario::from_path(&cli.scenario)?;
    if let Some(seed) = cli.seed {
        scenario.rng_seed = seed;
    }
    if let Some(m) = cli.method {
        scenario.planner.method = m.into();
        scenario.bench.methods = vec![m.into()];
    }
    if let Some(n) = cli.trials {
        if n == 0 {
            return Err(ParseError::new("--trials", "must be at least 1"));
        }
        scenario.bench.trials_per_cell = n;
    }
    if cli.ablation_no_safety {
        scenario.controller.penalty_mu = 0.0;
    }
    Ok(scenario)
}

/// Runs the command and returns the process exit code. Messages go to
/// stdout (results) and stderr (errors).
pub fn run(cli: &Cli) -> i32 {
    let scenario = match load_scenario(cli) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}: {e}", cli.scenario.display());
            return exit::CONFIG;
        }
    };
    let result = std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("cannot create {}", cli.out.display()))
        .and_then(|()| match cli.command {
            Command::Plan => cmd_plan(&scenario, &cli.out),
            Command::Simulate => cmd_simulate(&scenario, &cli.out),
            Command::Bench => cmd_bench(&scenario, &cli.out, !cli.no_timing),
        });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit::CONFIG
        }
    }
}

fn start_state(scenario: &Scenario) -> anyhow::Result<contiplan::pcc::RobotState> {
    scenario.start_state().map_err(|e| anyhow::anyhow!("start_tip: {e}"))
}

pub fn cmd_plan(scenario: &Scenario, out: &Path) -> anyhow::Result<i32> {
    let start = start_state(scenario)?;
    let problem = scenario.problem(&start, 0.0);
    match plan(&problem, &scenario.planner_params(), &scenario.controller) {
        Ok(result) => {
            output::write_path(&out.join("path.csv"), &result.path)?;
            output::write_configs(&out.join("configs.csv"), &result.configurations, &scenario.model)?;
            output::write_config_bodies(&out.join("body_points.csv"), &result.configurations, scenario)?;
            println!(
                "planned {} waypoints, length {:.1} mm, {} iterations",
                result.path.len(),
                result.length(),
                result.iterations_used
            );
            Ok(exit::OK)
        }
        Err(e) => {
            eprintln!("planning failed: {e}");
            Ok(exit::FAILED)
        }
    }
}

pub fn cmd_simulate(scenario: &Scenario, out: &Path) -> anyhow::Result<i32> {
    let start = start_state(scenario)?;
    let problem = scenario.problem(&start, 0.0);
    let (log, code) = match execute_dynamic(&problem, &scenario.planner_params(), &scenario.controller) {
        Ok(log) => {
            println!(
                "reached the goal in {} steps, {} replans",
                log.records.len() - 1,
                log.replans
            );
            (log, exit::OK)
        }
        Err(e) => {
            let code = match e.reason {
                FailureReason::Collision => {
                    if let Some(step) = e.log.first_collision() {
                        println!("collision at step {step}");
                    }
                    exit::FAILED
                }
                FailureReason::Budget | FailureReason::PlanFailed => exit::BUDGET,
            };
            eprintln!("{e}");
            (e.log, code)
        }
    };
    println!("minimum clearance {:.3} mm", log.min_clearance());
    output::write_steps(&out.join("steps.csv"), &log, &scenario.model)?;
    output::write_step_bodies(&out.join("body_points.csv"), &log)?;
    output::write_obstacles(&out.join("obstacles.csv"), &log, &scenario.obstacles)?;
    Ok(code)
}

pub fn cmd_bench(scenario: &Scenario, out: &Path, with_timing: bool) -> anyhow::Result<i32> {
    let settings = &scenario.bench;
    eprintln!(
        "running {} trials for each of {} methods x {} obstacle counts",
        settings.trials_per_cell,
        settings.methods.len(),
        settings.obstacle_counts.len()
    );
    let records = run_trials(
        scenario,
        &settings.methods,
        &settings.obstacle_counts,
        settings.trials_per_cell,
        scenario.rng_seed,
    );
    let cells = summarize(&records);
    output::write_trials(&out.join("bench_trials.csv"), &records, &scenario.model, with_timing)?;
    output::write_summary(&out.join("bench_summary.csv"), &cells, with_timing)?;
    let report = render_report(&cells, with_timing);
    std::fs::write(out.join("bench_report.txt"), &report).context("cannot write bench_report.txt")?;
    print!("{report}");
    Ok(exit::OK)
}
