//! Closed-loop execution among moving obstacles.
//!
//! The executor plans once, then advances one time step at a time: it
//! re-validates the rest of the path against the obstacles over the next
//! step, replans from the current configuration when that fails, and moves
//! the robot toward the next waypoint with the constrained IK.

use nalgebra::Vector3;
use thiserror::Error;

use super::{plan, smooth_path, PlanError, PlannerParams, PlanningProblem};
use crate::control::{track_waypoint, ControlError, ControllerParams};
use crate::pcc::{tip_position, RobotState};
use crate::world::{clearance, edge_is_safe, snapshot, DynamicSphere, Sphere};

/// Consecutive failed replans after which execution gives up.
pub const MAX_CONSECUTIVE_PLAN_FAILURES: usize = 10;
/// Consecutive steps without reaching the current waypoint before a replan is forced.
pub const STALL_STEPS: usize = 3;
/// Clearance beyond the margin a held tip retreats to when an obstacle closes in (mm).
const RETREAT_SLACK: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub tip: Vector3<f64>,
    /// Distance from the tip to the waypoint being tracked.
    pub tip_error: f64,
    /// Smallest signed distance from a body point to an obstacle surface.
    pub min_clearance: f64,
    pub replanned: bool,
    pub state: RobotState,
    pub body: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExecutionLog {
    pub records: Vec<StepRecord>,
    pub replans: usize,
    pub reached_goal: bool,
    /// Wall-clock seconds spent in each planning call, initial plan first.
    pub plan_times: Vec<f64>,
}

impl ExecutionLog {
    pub fn min_clearance(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.min_clearance)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn first_collision(&self) -> Option<usize> {
        self.records.iter().find(|r| r.min_clearance < 0.0).map(|r| r.step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureReason {
    Collision,
    Budget,
    PlanFailed,
}

impl std::fmt::Display for FailureReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FailureReason::Collision => "collision",
            FailureReason::Budget => "step budget exhausted",
            FailureReason::PlanFailed => "planning failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("execution failed: {reason} after {} steps", log.records.len())]
pub struct ExecutionError {
    pub reason: FailureReason,
    pub log: ExecutionLog,
}

/// Drives the robot from `problem.start` to `problem.goal`, stepping time by
/// `problem.t_next - problem.t_now`.
pub fn execute_dynamic(
    problem: &PlanningProblem,
    params: &PlannerParams,
    controller: &ControllerParams,
) -> Result<ExecutionLog, ExecutionError> {
    let dt = problem.t_next - problem.t_now;
    assert!(dt > 0.0, "time step must be positive");
    let model = problem.model;
    let check = problem.safety_check(controller);
    let mut log = ExecutionLog::default();
    let mut state = problem.start.clone();
    let mut replan_count = 0usize;

    let record = |log: &mut ExecutionLog, step: usize, t: f64, state: &RobotState, target: &Vector3<f64>, replanned| {
        let body = check.body(state);
        let tip = tip_position(state, model);
        let min_clearance = clearance(&body, &snapshot(problem.obstacles, &[t]));
        log.records.push(StepRecord {
            step,
            time: t,
            tip,
            tip_error: (target - tip).norm(),
            min_clearance,
            replanned,
            state: state.clone(),
            body,
        });
    };

    // Smoothed (or densified) waypoints, each flagged when it is a vertex of
    // the planner's tree.
    let mut replan =
        |state: &RobotState, t: f64, log: &mut ExecutionLog| -> Result<(Vec<Vector3<f64>>, Vec<bool>), PlanError> {
            let local = PlanningProblem {
                start: state,
                t_now: t,
                t_next: t + dt,
                ..*problem
            };
            let local_params = PlannerParams {
                rng_seed: params.rng_seed.wrapping_add(replan_count as u64),
                ..params.clone()
            };
            replan_count += 1;
            let result = plan(&local, &local_params, controller);
            if let Ok(r) = &result {
                log.plan_times.push(r.wall_time);
            }
            let mut raw = result?.path;
            // The tree stops within the goal tolerance; aim at the goal itself
            // so tracking slack does not leave the tip just outside it.
            if let Some(&last) = raw.last() {
                if last != problem.goal
                    && edge_is_safe(
                        &last,
                        &problem.goal,
                        problem.obstacles,
                        (t, t + dt),
                        params.edge_resolution,
                        check.margin,
                    )
                {
                    raw.push(problem.goal);
                }
            }
            let smooth = smooth_path(&raw, params.smoothing_spacing);
            let dense = if path_is_clear(&smooth, problem.obstacles, (t, t + dt), params, check.margin) {
                smooth
            } else {
                densify(&raw, params.smoothing_spacing)
            };
            let vertices = dense.iter().map(|p| raw.contains(p)).collect();
            Ok((dense, vertices))
        };

    let t0 = problem.t_now;
    let (mut path, mut vertices) = match replan(&state, t0, &mut log) {
        Ok(p) => p,
        Err(_) => {
            record(&mut log, 0, t0, &state, &problem.goal, false);
            return Err(ExecutionError {
                reason: FailureReason::PlanFailed,
                log,
            });
        }
    };
    let mut next = 1.min(path.len() - 1);
    record(&mut log, 0, t0, &state, &path[next], false);
    if log.records[0].min_clearance < 0.0 {
        return Err(ExecutionError {
            reason: FailureReason::Collision,
            log,
        });
    }
    let mut plan_failures = 0usize;
    let mut stalled = 0usize;

    for step in 1..=params.max_execution_steps {
        let t = t0 + (step - 1) as f64 * dt;
        let tip = tip_position(&state, model);
        if (tip - problem.goal).norm() <= params.goal_tolerance && next + 1 >= path.len() {
            log.reached_goal = true;
            return Ok(log);
        }

        let mut remaining = vec![tip];
        remaining.extend_from_slice(&path[next..]);
        let mut replanned = false;
        let mut holding = false;
        if stalled >= STALL_STEPS || !path_is_clear(&remaining, problem.obstacles, (t, t + dt), params, check.margin) {
            replanned = true;
            log.replans += 1;
            match replan(&state, t, &mut log) {
                Ok((p, v)) => {
                    path = p;
                    vertices = v;
                    next = 1.min(path.len() - 1);
                    plan_failures = 0;
                    stalled = 0;
                }
                Err(_) => {
                    plan_failures += 1;
                    holding = true;
                    if plan_failures >= MAX_CONSECUTIVE_PLAN_FAILURES {
                        return Err(ExecutionError {
                            reason: FailureReason::PlanFailed,
                            log,
                        });
                    }
                }
            }
        }

        let spheres = if controller.safety_enabled() {
            snapshot(problem.obstacles, &[t, t + dt])
        } else {
            Vec::new()
        };
        // While no valid plan exists the robot keeps its tip where it is,
        // unless an obstacle is about to swallow it, and lets the penalty
        // push the body away.
        let target = if holding {
            retreat_target(&tip, &spheres, check.margin + RETREAT_SLACK)
        } else {
            path[next]
        };
        let mut outcome = track_waypoint(&state, &target, model, &spheres, controller);
        if outcome.is_err() && !holding {
            // The planner reached each tree vertex with this same solver from
            // its parent's configuration, so aiming straight at the next
            // vertex often gets around a local minimum of the smoothed route.
            if let Some(j) = (next + 1..path.len()).find(|&j| vertices[j]) {
                if let Ok(r) = track_waypoint(&state, &path[j], model, &spheres, controller) {
                    next = j;
                    outcome = Ok(r);
                }
            }
        }
        match outcome {
            Ok(r) => {
                state = r.state;
                if !holding {
                    next = (next + 1).min(path.len() - 1);
                    stalled = 0;
                }
            }
            Err(ControlError::NotConverged { state: best, .. }) => {
                state = best;
                if !holding {
                    stalled += 1;
                }
            }
            Err(_) => {
                if !holding {
                    stalled += 1;
                }
            }
        }

        record(&mut log, step, t + dt, &state, &path[next], replanned);
        if log.records.last().is_some_and(|r| r.min_clearance < 0.0) {
            return Err(ExecutionError {
                reason: FailureReason::Collision,
                log,
            });
        }
    }
    let tip = tip_position(&state, model);
    if (tip - problem.goal).norm() <= params.goal_tolerance && next + 1 >= path.len() {
        log.reached_goal = true;
        return Ok(log);
    }
    Err(ExecutionError {
        reason: FailureReason::Budget,
        log,
    })
}

/// `tip` pushed radially out of every sphere it is closer than `margin` to.
fn retreat_target(tip: &Vector3<f64>, spheres: &[Sphere], margin: f64) -> Vector3<f64> {
    let mut target = *tip;
    for sphere in spheres {
        let offset = target - sphere.center;
        let distance = offset.norm();
        let needed = sphere.radius + margin;
        if distance < needed && distance > 1e-9 {
            target = sphere.center + offset * (needed / distance);
        }
    }
    target
}

/// True iff every consecutive tip edge of `path` is clear over `window`.
pub(crate) fn path_is_clear(
    path: &[Vector3<f64>],
    obstacles: &[DynamicSphere],
    window: (f64, f64),
    params: &PlannerParams,
    margin: f64,
) -> bool {
    path.windows(2)
        .all(|w| edge_is_safe(&w[0], &w[1], obstacles, window, params.edge_resolution, margin))
}

/// Polyline with extra points so no gap exceeds `spacing`.
pub(crate) fn densify(path: &[Vector3<f64>], spacing: f64) -> Vec<Vector3<f64>> {
    let mut out: Vec<Vector3<f64>> = path.first().copied().into_iter().collect();
    for w in path.windows(2) {
        let pieces = ((w[1] - w[0]).norm() / spacing).ceil().max(1.0) as usize;
        for k in 1..=pieces {
            out.push(w[0].lerp(&w[1], k as f64 / pieces as f64));
        }
    }
    out
}
