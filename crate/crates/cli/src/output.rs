//! CSV exports. Every file has a header row; numbers use `.` decimals and
//! the shortest representation that round-trips, so identical results give
//! identical bytes. Per-segment columns are numbered from the base (`theta_1`
//! is the proximal segment).

use std::path::Path;

use anyhow::Context;
use contiplan::bench::{CellSummary, TrialRecord};
use contiplan::pcc::{body_points, RobotModel, RobotState};
use contiplan::planner::ExecutionLog;
use contiplan::scenario::Scenario;
use contiplan::world::DynamicSphere;
use nalgebra::Vector3;

fn writer(path: &Path) -> anyhow::Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn config_header(model: &RobotModel, prefix: &str) -> Vec<String> {
    let mut h = Vec::new();
    for j in 1..=model.segment_count() {
        h.push(format!("{prefix}theta_{j}"));
        h.push(format!("{prefix}phi_{j}"));
    }
    h.push(format!("{prefix}base_z_mm"));
    h
}

fn config_fields(state: &RobotState) -> Vec<String> {
    let mut f: Vec<String> = state.segments.iter().flat_map(|s| [num(s.theta), num(s.phi)]).collect();
    f.push(num(state.base_z));
    f
}

/// `path.csv`: `index, x_mm, y_mm, z_mm`.
pub fn write_path(path: &Path, waypoints: &[Vector3<f64>]) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["index", "x_mm", "y_mm", "z_mm"])?;
    for (i, p) in waypoints.iter().enumerate() {
        w.write_record([i.to_string(), num(p.x), num(p.y), num(p.z)])?;
    }
    w.flush()?;
    Ok(())
}

/// `configs.csv`: `index, theta_1, phi_1, .., base_z_mm` (rad, rad, .., mm).
pub fn write_configs(path: &Path, configs: &[RobotState], model: &RobotModel) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["index".to_string()];
    header.extend(config_header(model, ""));
    w.write_record(&header)?;
    for (i, c) in configs.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(config_fields(c));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `body_points.csv` of a plan: `index, point, x_mm, y_mm, z_mm`, one row per
/// centerline point of each waypoint configuration.
pub fn write_config_bodies(path: &Path, configs: &[RobotState], scenario: &Scenario) -> anyhow::Result<()> {
    let per_segment = scenario.controller.points_per_segment(&scenario.model);
    let mut w = writer(path)?;
    w.write_record(["index", "point", "x_mm", "y_mm", "z_mm"])?;
    for (i, c) in configs.iter().enumerate() {
        for (k, p) in body_points(c, &scenario.model, per_segment).iter().enumerate() {
            w.write_record([i.to_string(), k.to_string(), num(p.x), num(p.y), num(p.z)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `steps.csv`: `step, time_s, tip_x_mm, tip_y_mm, tip_z_mm, tip_error_mm,
/// min_clearance_mm, replanned, theta_1, phi_1, .., base_z_mm`.
pub fn write_steps(path: &Path, log: &ExecutionLog, model: &RobotModel) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<String> = [
        "step",
        "time_s",
        "tip_x_mm",
        "tip_y_mm",
        "tip_z_mm",
        "tip_error_mm",
        "min_clearance_mm",
        "replanned",
    ]
    .map(String::from)
    .into();
    header.extend(config_header(model, ""));
    w.write_record(&header)?;
    for r in &log.records {
        let mut row = vec![
            r.step.to_string(),
            num(r.time),
            num(r.tip.x),
            num(r.tip.y),
            num(r.tip.z),
            num(r.tip_error),
            num(r.min_clearance),
            r.replanned.to_string(),
        ];
        row.extend(config_fields(&r.state));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `body_points.csv` of a simulation: `step, point, x_mm, y_mm, z_mm`.
pub fn write_step_bodies(path: &Path, log: &ExecutionLog) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["step", "point", "x_mm", "y_mm", "z_mm"])?;
    for r in &log.records {
        for (k, p) in r.body.iter().enumerate() {
            w.write_record([r.step.to_string(), k.to_string(), num(p.x), num(p.y), num(p.z)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `obstacles.csv`: `step, obstacle, x_mm, y_mm, z_mm, radius_mm` at each
/// logged time.
pub fn write_obstacles(path: &Path, log: &ExecutionLog, obstacles: &[DynamicSphere]) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["step", "obstacle", "x_mm", "y_mm", "z_mm", "radius_mm"])?;
    for r in &log.records {
        for (k, o) in obstacles.iter().enumerate() {
            let s = o.at(r.time);
            w.write_record([
                r.step.to_string(),
                k.to_string(),
                num(s.center.x),
                num(s.center.y),
                num(s.center.z),
                num(s.radius),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn optional(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// `bench_summary.csv`: `method, obstacle_count, trials, success_rate,
/// mean_time_s, mean_length_mm, successes, mean_success_time_s`. Means with
/// no population are empty, as are the time columns without timing.
pub fn write_summary(path: &Path, cells: &[CellSummary], with_timing: bool) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "method",
        "obstacle_count",
        "trials",
        "success_rate",
        "mean_time_s",
        "mean_length_mm",
        "successes",
        "mean_success_time_s",
    ])?;
    for c in cells {
        let time = |x: Option<f64>| if with_timing { optional(x) } else { String::new() };
        w.write_record([
            c.method.to_string(),
            c.obstacle_count.to_string(),
            c.trials.to_string(),
            num(c.success_rate),
            time(Some(c.mean_time_s)),
            optional(c.mean_length_mm),
            c.successes.to_string(),
            time(c.mean_success_time_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `bench_trials.csv`: `method, obstacle_count, trial_index, seed, success,
/// outcome, plan_time_s, path_length_mm`, then `config{k}_theta_{j}`,
/// `config{k}_phi_{j}`, `config{k}_base_z_mm` for k = 1..3 (empty when the
/// trial recorded fewer configurations).
pub fn write_trials(path: &Path, records: &[TrialRecord], model: &RobotModel, with_timing: bool) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<String> = [
        "method",
        "obstacle_count",
        "trial_index",
        "seed",
        "success",
        "outcome",
        "plan_time_s",
        "path_length_mm",
    ]
    .map(String::from)
    .into();
    let per_config = config_header(model, "").len();
    for k in 1..=contiplan::bench::RECORDED_CONFIGS {
        header.extend(config_header(model, &format!("config{k}_")));
    }
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.method.to_string(),
            r.obstacle_count.to_string(),
            r.trial_index.to_string(),
            r.seed.to_string(),
            r.success().to_string(),
            r.outcome.as_str().to_string(),
            if with_timing { num(r.plan_time_s) } else { String::new() },
            optional(r.path_length_mm),
        ];
        for k in 0..contiplan::bench::RECORDED_CONFIGS {
            match r.first_three_configs.get(k) {
                Some(c) => row.extend(config_fields(c)),
                None => row.extend(std::iter::repeat_n(String::new(), per_config)),
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
