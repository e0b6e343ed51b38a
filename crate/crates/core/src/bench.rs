//! Monte-Carlo comparison of RRT and RRT* on random moving-obstacle fields.
//!
//! Every trial draws a scenario around the fixed start/goal pair of a base
//! scenario and plans once over the first time step. A trial succeeds when
//! the planner connects the goal and an independent re-check finds neither
//! the smoothed tip path nor any planned configuration inside an obstacle.

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{track_waypoint, ControlError, InvalidParameter};
use crate::pcc::{body_points, RobotState};
use crate::planner::{path_length, plan, smooth_path, Method, PlannerParams};
use crate::scenario::Scenario;
use crate::world::{clearance, snapshot, DynamicSphere, Motion, Phase, RadiusLaw, Sphere};

/// Rejected obstacle draws after which a scenario is declared infeasible.
pub const MAX_RESAMPLES: usize = 100;
/// Configurations recorded per trial.
pub const RECORDED_CONFIGS: usize = 3;

/// Ranges random scenarios are drawn from, and the default experiment grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub methods: Vec<Method>,
    pub obstacle_counts: Vec<usize>,
    pub trials_per_cell: usize,
    /// Mean radius `A` of `A + B phase(rate t)` (mm), drawn uniformly.
    pub radius_base: [f64; 2],
    /// Radius swing `B` (mm).
    pub radius_amplitude: [f64; 2],
    /// Angular rate of the radius law (rad/s).
    pub radius_rate: f64,
    /// Length of the back-and-forth travel along the start-goal direction (mm).
    pub travel: [f64; 2],
    /// Mean speed over a period (mm/s); the upper end is exclusive.
    pub speed: [f64; 2],
    /// Where along start -> goal centers are placed, as fractions.
    pub corridor_span: [f64; 2],
    /// Largest distance of a center from the start-goal line (mm).
    pub corridor_radius: f64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            methods: vec![Method::Rrt, Method::RrtStar],
            obstacle_counts: vec![1, 3, 5, 7],
            trials_per_cell: 100,
            radius_base: [30.0, 50.0],
            radius_amplitude: [10.0, 20.0],
            radius_rate: 1.0,
            travel: [50.0, 100.0],
            speed: [5.0, 15.0],
            corridor_span: [0.25, 0.75],
            corridor_radius: 40.0,
        }
    }
}

impl BenchSettings {
    pub fn validate(&self) -> Result<(), InvalidParameter> {
        let range_ok = |r: &[f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if self.methods.is_empty() {
            return Err(InvalidParameter::new("methods", "must not be empty"));
        }
        if self.trials_per_cell == 0 {
            return Err(InvalidParameter::new("trials_per_cell", "must be at least 1"));
        }
        if !range_ok(&self.radius_amplitude) || self.radius_amplitude[0] < 0.0 {
            return Err(InvalidParameter::new(
                "radius_amplitude",
                "must be a non-negative [low, high] range",
            ));
        }
        if !range_ok(&self.radius_base) || self.radius_base[0] <= self.radius_amplitude[1] {
            return Err(InvalidParameter::new(
                "radius_base",
                "must be a range above the largest amplitude",
            ));
        }
        if !(self.radius_rate >= 0.0 && self.radius_rate.is_finite()) {
            return Err(InvalidParameter::new("radius_rate", "must be non-negative"));
        }
        if !range_ok(&self.travel) || self.travel[0] < 0.0 {
            return Err(InvalidParameter::new(
                "travel",
                "must be a non-negative [low, high] range",
            ));
        }
        if !range_ok(&self.speed) || self.speed[0] <= 0.0 || self.speed[0] >= self.speed[1] {
            return Err(InvalidParameter::new("speed", "must be a positive [low, high) range"));
        }
        if !range_ok(&self.corridor_span) || self.corridor_span[0] < 0.0 || self.corridor_span[1] > 1.0 {
            return Err(InvalidParameter::new("corridor_span", "must be a range within [0, 1]"));
        }
        if !(self.corridor_radius >= 0.0 && self.corridor_radius.is_finite()) {
            return Err(InvalidParameter::new("corridor_radius", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BenchError {
    #[error("no safe start for {count} obstacles after {MAX_RESAMPLES} resamples")]
    ScenarioInfeasible { count: usize },
}

/// One random obstacle: radius `A + B phase(rate t)`, oscillating along the
/// start-goal direction around a center placed in the corridor between them.
pub fn random_obstacle<R: Rng>(
    settings: &BenchSettings,
    start: &Vector3<f64>,
    goal: &Vector3<f64>,
    rng: &mut R,
) -> DynamicSphere {
    let uniform = |rng: &mut R, r: [f64; 2]| if r[0] < r[1] { rng.gen_range(r[0]..=r[1]) } else { r[0] };
    let phase = |rng: &mut R| if rng.gen::<bool>() { Phase::Sin } else { Phase::Cos };

    let radius = RadiusLaw {
        base: uniform(rng, settings.radius_base),
        amplitude: uniform(rng, settings.radius_amplitude),
        phase: phase(rng),
        rate: settings.radius_rate,
    };
    let travel = uniform(rng, settings.travel);
    let speed = rng.gen_range(settings.speed[0]..settings.speed[1]);
    let axis = (goal - start).try_normalize(1e-12).unwrap_or(Vector3::z());

    // uniform point of a disc perpendicular to the axis
    let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = axis.cross(&helper).normalize();
    let v = axis.cross(&u);
    let r = settings.corridor_radius * rng.gen::<f64>().sqrt();
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let along = uniform(rng, settings.corridor_span);
    let center = start.lerp(goal, along) + r * (angle.cos() * u + angle.sin() * v);

    DynamicSphere {
        center,
        radius,
        motion: Motion::Linear {
            half_span: axis * (travel / 2.0),
            phase: phase(rng),
            // the span is covered twice per period
            period: 2.0 * travel / speed,
        },
    }
}

/// `base` with `count` random obstacles, together with a start configuration
/// that is collision-free over the first time step.
///
/// Obstacles are drawn one after another and each is redrawn while the start
/// is unsafe or the goal tip lies within the clearance margin, so for a fixed
/// `rng` state the obstacles for `count` are a prefix of those for any larger
/// count.
pub fn random_scenario<R: Rng>(
    base: &Scenario,
    count: usize,
    rng: &mut R,
) -> Result<(Scenario, RobotState), BenchError> {
    let mut scenario = Scenario {
        obstacles: Vec::with_capacity(count),
        time_step: base.time_step,
        ..base.clone()
    };
    let margin = scenario.controller.clearance_margin(&scenario.model);
    let dt = scenario.time_step;
    let mut rejected = 0;
    let mut start = scenario
        .start_state()
        .map_err(|_| BenchError::ScenarioInfeasible { count })?;
    while scenario.obstacles.len() < count {
        let obstacle = random_obstacle(&scenario.bench, &scenario.start_tip, &scenario.goal_tip, rng);
        // a swallowed goal makes the trial unwinnable for either method
        let tip_clear = [0.0, dt].iter().all(|&t| {
            let s = obstacle.at(t);
            s.surface_distance(&scenario.start_tip) >= margin && s.surface_distance(&scenario.goal_tip) >= margin
        });
        scenario.obstacles.push(obstacle);
        // keep the current start configuration when it is still clear
        let state = if !tip_clear {
            None
        } else if scenario.problem(&start, 0.0).state_ok(&start, &scenario.controller) {
            Some(start.clone())
        } else {
            scenario.start_state().ok()
        };
        match state {
            Some(s) => start = s,
            None => {
                scenario.obstacles.pop();
                rejected += 1;
                if rejected >= MAX_RESAMPLES {
                    return Err(BenchError::ScenarioInfeasible { count });
                }
            }
        }
    }
    Ok((scenario, start))
}

/// 64-bit seed mixed from a sequence of words (SplitMix64 finalizer).
pub fn derive_seed(words: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    words.iter().fold(0x9e37_79b9_7f4a_7c15, |acc: u64, &w| {
        mix(acc.wrapping_add(0x9e37_79b9_7f4a_7c15) ^ w)
    })
}

const SCENARIO_STREAM: u64 = 1;
const PLANNER_STREAM: u64 = 2;

/// Seed of the obstacle stream for trial `index`; shared by every count.
pub fn scenario_seed(base_seed: u64, index: usize) -> u64 {
    derive_seed(&[base_seed, SCENARIO_STREAM, index as u64])
}

/// Planner seed of one cell. Both methods get the same seed so their sample
/// sequences agree until the trees diverge.
pub fn planner_seed(base_seed: u64, _method: Method, count: usize, index: usize) -> u64 {
    derive_seed(&[base_seed, PLANNER_STREAM, count as u64, index as u64])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialOutcome {
    Success,
    ScenarioInfeasible,
    PlanFailed,
    /// The tip path crosses an obstacle while the robot would follow it.
    PathCollision,
    /// A planned configuration intersects an obstacle when it is reached.
    BodyCollision,
}

impl TrialOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialOutcome::Success => "success",
            TrialOutcome::ScenarioInfeasible => "scenario_infeasible",
            TrialOutcome::PlanFailed => "plan_failed",
            TrialOutcome::PathCollision => "path_collision",
            TrialOutcome::BodyCollision => "body_collision",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub method: Method,
    pub obstacle_count: usize,
    pub trial_index: usize,
    pub seed: u64,
    pub outcome: TrialOutcome,
    /// Wall-clock planning time (s).
    pub plan_time_s: f64,
    /// Length of the smoothed path (mm); successful trials only.
    pub path_length_mm: Option<f64>,
    /// Configurations tracking the first smoothed waypoints.
    pub first_three_configs: Vec<RobotState>,
}

impl TrialRecord {
    pub fn success(&self) -> bool {
        self.outcome == TrialOutcome::Success
    }
}

/// Runs every (method, count, index) cell. Records come back in table
/// order: by method, then obstacle count, then trial index.
pub fn run_trials(
    base: &Scenario,
    methods: &[Method],
    obstacle_counts: &[usize],
    trials_per_cell: usize,
    base_seed: u64,
) -> Vec<TrialRecord> {
    assert!(trials_per_cell >= 1, "at least one trial per cell");
    let cells: Vec<(usize, usize)> = obstacle_counts
        .iter()
        .flat_map(|&c| (0..trials_per_cell).map(move |i| (c, i)))
        .collect();
    let mut records: Vec<TrialRecord> = cells
        .par_iter()
        .flat_map_iter(|&(count, index)| run_cell(base, methods, count, index, base_seed))
        .collect();
    let method_rank = |m: Method| methods.iter().position(|&x| x == m);
    let count_rank = |c: usize| obstacle_counts.iter().position(|&x| x == c);
    records.sort_by_key(|r| (method_rank(r.method), count_rank(r.obstacle_count), r.trial_index));
    records
}

fn run_cell(base: &Scenario, methods: &[Method], count: usize, index: usize, base_seed: u64) -> Vec<TrialRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario_seed(base_seed, index));
    let drawn = random_scenario(base, count, &mut rng);
    methods
        .iter()
        .map(|&method| {
            let seed = planner_seed(base_seed, method, count, index);
            let mut record = TrialRecord {
                method,
                obstacle_count: count,
                trial_index: index,
                seed,
                outcome: TrialOutcome::ScenarioInfeasible,
                plan_time_s: 0.0,
                path_length_mm: None,
                first_three_configs: Vec::new(),
            };
            if let Ok((scenario, start)) = &drawn {
                run_trial(scenario, start, method, seed, &mut record);
            }
            record
        })
        .collect()
}

fn run_trial(scenario: &Scenario, start: &RobotState, method: Method, seed: u64, record: &mut TrialRecord) {
    let params = PlannerParams {
        method,
        rng_seed: seed,
        ..scenario.planner.clone()
    };
    let problem = scenario.problem(start, 0.0);
    let clock = Instant::now();
    let result = plan(&problem, &params, &scenario.controller);
    record.plan_time_s = clock.elapsed().as_secs_f64();
    let Ok(result) = result else {
        record.outcome = TrialOutcome::PlanFailed;
        return;
    };
    let smooth = smooth_path(&result.path, params.smoothing_spacing);
    record.first_three_configs = leading_configs(scenario, start, &smooth);
    record.outcome = revalidate(scenario, &result.configurations, &smooth, &record.first_three_configs);
    if record.success() {
        record.path_length_mm = Some(path_length(&smooth));
    }
}

/// Configurations reached by tracking smoothed waypoints 1, 2, 3 in turn
/// from `start`, avoiding the obstacles of the planning step.
pub fn leading_configs(scenario: &Scenario, start: &RobotState, smooth: &[Vector3<f64>]) -> Vec<RobotState> {
    let spheres = if scenario.controller.safety_enabled() {
        snapshot(&scenario.obstacles, &[0.0, scenario.time_step])
    } else {
        Vec::new()
    };
    let mut state = start.clone();
    let mut out = Vec::with_capacity(RECORDED_CONFIGS);
    for target in smooth.iter().skip(1).take(RECORDED_CONFIGS) {
        state = match track_waypoint(&state, target, &scenario.model, &spheres, &scenario.controller) {
            Ok(r) => r.state,
            Err(ControlError::NotConverged { state, .. }) => state,
            Err(_) => state,
        };
        out.push(state.clone());
    }
    out
}

/// Body points per segment of the re-check, far denser than the planner's.
pub const RECHECK_POINTS_PER_SEGMENT: usize = 100;

/// Signed clearance of the straight segment `a`-`b` from a sphere surface.
pub fn segment_clearance(a: &Vector3<f64>, b: &Vector3<f64>, sphere: &Sphere) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let s = if len2 > 0.0 {
        ((sphere.center - a).dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (a + s * ab - sphere.center).norm() - sphere.radius
}

/// Collision re-check of a plan against the obstacles of the planning
/// step (both instants), independent of the planner's own checks: exact
/// distances for the smoothed tip path the robot will follow, and densely
/// sampled bodies for every tree configuration and the leading tracked ones.
/// Touching is allowed; penetration is a failure.
pub fn revalidate(
    scenario: &Scenario,
    configurations: &[RobotState],
    smooth: &[Vector3<f64>],
    leading: &[RobotState],
) -> TrialOutcome {
    let spheres = snapshot(&scenario.obstacles, &[0.0, scenario.time_step]);
    let path_hit = smooth
        .windows(2)
        .any(|w| spheres.iter().any(|s| segment_clearance(&w[0], &w[1], s) < 0.0));
    if path_hit {
        return TrialOutcome::PathCollision;
    }
    let body_hit = configurations.iter().chain(leading).any(|c| {
        let points = body_points(c, &scenario.model, RECHECK_POINTS_PER_SEGMENT);
        clearance(&points, &spheres) < 0.0
    });
    if body_hit {
        return TrialOutcome::BodyCollision;
    }
    TrialOutcome::Success
}

/// Aggregate of one (method, obstacle count) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub method: Method,
    pub obstacle_count: usize,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean planning time over all trials (s).
    pub mean_time_s: f64,
    /// Mean planning time over successful trials (s).
    pub mean_success_time_s: Option<f64>,
    /// Mean smoothed length of successful paths (mm).
    pub mean_length_mm: Option<f64>,
}

/// Per-cell aggregates in the order cells first appear in `records`.
pub fn summarize(records: &[TrialRecord]) -> Vec<CellSummary> {
    let mut keys: Vec<(Method, usize)> = Vec::new();
    for r in records {
        if !keys.contains(&(r.method, r.obstacle_count)) {
            keys.push((r.method, r.obstacle_count));
        }
    }
    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    keys.into_iter()
        .map(|(method, obstacle_count)| {
            let cell: Vec<&TrialRecord> = records
                .iter()
                .filter(|r| r.method == method && r.obstacle_count == obstacle_count)
                .collect();
            let times: Vec<f64> = cell.iter().map(|r| r.plan_time_s).collect();
            let success_times: Vec<f64> = cell.iter().filter(|r| r.success()).map(|r| r.plan_time_s).collect();
            let lengths: Vec<f64> = cell.iter().filter_map(|r| r.path_length_mm).collect();
            let successes = success_times.len();
            CellSummary {
                method,
                obstacle_count,
                trials: cell.len(),
                successes,
                success_rate: successes as f64 / cell.len() as f64,
                mean_time_s: mean(&times).unwrap_or(0.0),
                mean_success_time_s: mean(&success_times),
                mean_length_mm: mean(&lengths),
            }
        })
        .collect()
}

/// A reference cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceCell {
    pub method: Method,
    pub obstacle_count: usize,
    pub time_s: f64,
    pub success_rate: f64,
    pub mean_length_mm: f64,
}

const fn reference(
    method: Method,
    obstacle_count: usize,
    time_s: f64,
    success_rate: f64,
    mean_length_mm: f64,
) -> ReferenceCell {
    ReferenceCell {
        method,
        obstacle_count,
        time_s,
        success_rate,
        mean_length_mm,
    }
}

/// Reference figures for 1, 3, 5 and 7 obstacles (desktop i7 hardware).
pub const REFERENCE_TABLE: [ReferenceCell; 8] = [
    reference(Method::Rrt, 1, 3.05, 0.99, 715.36),
    reference(Method::Rrt, 3, 4.77, 0.97, 736.11),
    reference(Method::Rrt, 5, 5.55, 0.95, 785.46),
    reference(Method::Rrt, 7, 6.36, 0.90, 743.36),
    reference(Method::RrtStar, 1, 3.66, 0.99, 609.07),
    reference(Method::RrtStar, 3, 4.82, 0.89, 626.70),
    reference(Method::RrtStar, 5, 6.07, 0.78, 625.46),
    reference(Method::RrtStar, 7, 7.30, 0.65, 597.45),
];

fn label(method: Method) -> &'static str {
    match method {
        Method::Rrt => "RRT",
        Method::RrtStar => "RRT*",
    }
}

/// Plain-text table of `cells` followed by the reference rows.
/// Times are left out when `with_timing` is false.
pub fn render_report(cells: &[CellSummary], with_timing: bool) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let mut methods: Vec<Method> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for c in cells {
        if !methods.contains(&c.method) {
            methods.push(c.method);
        }
        if !counts.contains(&c.obstacle_count) {
            counts.push(c.obstacle_count);
        }
    }
    let find = |m: Method, n: usize| cells.iter().find(|c| c.method == m && c.obstacle_count == n);

    let _ = writeln!(out, "This run");
    let _ = write!(out, "{:<20}", "obstacles");
    for n in &counts {
        let _ = write!(out, "{n:>16}");
    }
    out.push('\n');
    for &m in &methods {
        let _ = write!(out, "{:<20}", format!("{} Time(s)/Succ", label(m)));
        for &n in &counts {
            let cell = match find(m, n) {
                Some(c) if with_timing => format!("{:.2}/{:.0}%", c.mean_time_s, 100.0 * c.success_rate),
                Some(c) => format!("-/{:.0}%", 100.0 * c.success_rate),
                None => "-".into(),
            };
            let _ = write!(out, "{cell:>16}");
        }
        out.push('\n');
    }
    for &m in &methods {
        let _ = write!(out, "{:<20}", format!("{} Avg dis(mm)", label(m)));
        for &n in &counts {
            let cell = find(m, n)
                .and_then(|c| c.mean_length_mm)
                .map_or("-".into(), |l| format!("{l:.2}"));
            let _ = write!(out, "{cell:>16}");
        }
        out.push('\n');
    }
    if let Some(trials) = cells.first().map(|c| c.trials) {
        let _ = writeln!(out, "({trials} trials per cell)");
    }

    let _ = writeln!(out, "\nReference figures (different hardware; not expected to match)");
    for m in [Method::Rrt, Method::RrtStar] {
        let _ = write!(out, "{} Time(s)/Succ", label(m));
        for r in REFERENCE_TABLE.iter().filter(|r| r.method == m) {
            let _ = write!(out, " {:.2}/{:.0}%", r.time_s, 100.0 * r.success_rate);
        }
        out.push('\n');
    }
    for m in [Method::Rrt, Method::RrtStar] {
        let _ = write!(out, "{} Avg dis", label(m));
        for r in REFERENCE_TABLE.iter().filter(|r| r.method == m) {
            let _ = write!(out, " {:.2}", r.mean_length_mm);
        }
        out.push('\n');
    }
    out
}
