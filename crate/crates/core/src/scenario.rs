//! Experiment descriptions and their JSON file format.
//!
//! A scenario file is a JSON object. Lengths are in millimetres, times in
//! seconds and angles in radians; rates are radians per second. Unknown keys
//! are rejected everywhere, and every error names the offending field, e.g.
//! `obstacles[1].radius.base: must be positive`.
//!
//! ```json
//! {
//!   "start_tip": [-50, 100, 390],
//!   "goal_tip": [10, -120, 170],
//!   "obstacles": [
//!     { "center": [0, 90, 330], "radius": { "base": 65 } },
//!     { "center": [0, 0, 300],
//!       "radius": { "base": 40, "amplitude": 10, "phase": "cos", "rate": 1 },
//!       "motion": { "type": "linear", "half_span": [0, 0, 25], "phase": "sin", "period": 12 } }
//!   ],
//!   "rng_seed": 7
//! }
//! ```
//!
//! Optional sections fall back to their defaults: `robot`
//! ([`RobotModel::two_segment`]), `workspace` (300 x 300 x 500 box around the
//! base axis), `controller`, `planner`, `bench`, and `time_step` (1 s).

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::BenchSettings;
use crate::control::{ControllerParams, InvalidParameter};
use crate::pcc::{RobotModel, RobotState};
use crate::planner::{initial_state, PlannerParams, PlanningProblem};
use crate::world::{DynamicSphere, Motion, Phase, RadiusLaw, Workspace};

/// A rejected scenario: where, and why.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field_path}: {reason}")]
pub struct ParseError {
    /// Dotted path to the field, `.` for the document itself.
    pub field_path: String,
    pub reason: String,
}

impl ParseError {
    pub fn new(field_path: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field_path: field_path.into(),
            reason: reason.into(),
        }
    }

    fn param(section: &str, e: InvalidParameter) -> Self {
        Self::new(format!("{section}.{}", e.field), e.reason)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("no collision-free configuration reaches the start tip")]
    StartUnreachable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub model: RobotModel,
    pub workspace: Workspace,
    pub start_tip: Vector3<f64>,
    pub goal_tip: Vector3<f64>,
    pub obstacles: Vec<DynamicSphere>,
    pub controller: ControllerParams,
    pub planner: PlannerParams,
    /// Duration of one execution step (s).
    pub time_step: f64,
    pub rng_seed: u64,
    pub bench: BenchSettings,
}

impl Scenario {
    pub fn from_json_str(text: &str) -> Result<Self, ParseError> {
        let mut de = serde_json::Deserializer::from_str(text);
        let file: ScenarioFile = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            ParseError::new(path, e.into_inner().to_string())
        })?;
        de.end().map_err(|e| ParseError::new(".", e.to_string()))?;
        let scenario = Scenario::from(file);
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_path(path: &Path) -> Result<Self, ParseError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ParseError::new(".", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&ScenarioFile::from(self)).expect("scenario serializes")
    }

    /// Range checks that the JSON types alone cannot express.
    pub fn validate(&self) -> Result<(), ParseError> {
        for (i, seg) in self.model.segments.iter().enumerate() {
            let at = |field: &str| format!("robot.segments[{i}].{field}");
            seg.validate()
                .map_err(|e| ParseError::new(format!("robot.segments[{i}]"), e.to_string()))?;
            // cables must stay taut (positive length) up to a half-turn bend
            if seg.cable_pitch * std::f64::consts::PI >= seg.length {
                return Err(ParseError::new(
                    at("cable_pitch"),
                    "cable_pitch * pi must be below the segment length",
                ));
            }
        }
        if self.model.segments.is_empty() {
            return Err(ParseError::new("robot.segments", "at least one segment is required"));
        }
        let (lo, hi) = self.model.base_z_limits;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(ParseError::new(
                "robot.base_z_limits",
                "must be finite with lower <= upper",
            ));
        }
        if !(self.model.disc_radius >= 0.0 && self.model.disc_radius.is_finite()) {
            return Err(ParseError::new("robot.disc_radius", "must be non-negative"));
        }
        if !self.workspace.is_valid() {
            return Err(ParseError::new("workspace", "min must be below max on every axis"));
        }
        for (name, tip) in [("start_tip", &self.start_tip), ("goal_tip", &self.goal_tip)] {
            if !tip.iter().all(|v| v.is_finite()) {
                return Err(ParseError::new(name, "must be finite"));
            }
            if !self.workspace.contains(tip) {
                return Err(ParseError::new(name, "lies outside the workspace"));
            }
        }
        for (i, obs) in self.obstacles.iter().enumerate() {
            validate_obstacle(obs)
                .map_err(|(field, reason)| ParseError::new(format!("obstacles[{i}].{field}"), reason))?;
        }
        self.controller
            .validate()
            .map_err(|e| ParseError::param("controller", e))?;
        if let crate::control::KpGain::Diagonal(d) = &self.controller.kp_gain {
            if d.len() != 3 {
                return Err(ParseError::new("controller.kp_gain", "needs 3 diagonal entries"));
            }
        }
        self.planner.validate().map_err(|e| ParseError::param("planner", e))?;
        if !(self.time_step > 0.0 && self.time_step.is_finite()) {
            return Err(ParseError::new("time_step", "must be positive"));
        }
        self.bench.validate().map_err(|e| ParseError::param("bench", e))?;
        Ok(())
    }

    /// Planning query from `start` over the step beginning at `t`.
    pub fn problem<'a>(&'a self, start: &'a RobotState, t: f64) -> PlanningProblem<'a> {
        PlanningProblem {
            model: &self.model,
            workspace: &self.workspace,
            obstacles: &self.obstacles,
            start,
            goal: self.goal_tip,
            t_now: t,
            t_next: t + self.time_step,
        }
    }

    /// Collision-free configuration at the start tip, valid over the first step.
    pub fn start_state(&self) -> Result<RobotState, ScenarioError> {
        let straight = RobotState::straight(self.model.segment_count(), self.model.base_z_limits.0);
        let problem = self.problem(&straight, 0.0);
        initial_state(&problem, &self.start_tip, &self.controller).ok_or(ScenarioError::StartUnreachable)
    }

    /// Planner parameters with the scenario seed filled in.
    pub fn planner_params(&self) -> PlannerParams {
        PlannerParams {
            rng_seed: self.rng_seed,
            ..self.planner.clone()
        }
    }
}

fn validate_obstacle(obs: &DynamicSphere) -> Result<(), (&'static str, &'static str)> {
    if !obs.center.iter().all(|v| v.is_finite()) {
        return Err(("center", "must be finite"));
    }
    let r = &obs.radius;
    if !(r.base > 0.0 && r.base.is_finite()) {
        return Err(("radius.base", "must be positive"));
    }
    if !(r.amplitude >= 0.0 && r.amplitude < r.base) {
        return Err(("radius.amplitude", "must be non-negative and below the base radius"));
    }
    if !(r.rate >= 0.0 && r.rate.is_finite()) {
        return Err(("radius.rate", "must be non-negative"));
    }
    if let Motion::Linear { half_span, period, .. } = obs.motion {
        if !half_span.iter().all(|v| v.is_finite()) {
            return Err(("motion.half_span", "must be finite"));
        }
        if !(period > 0.0 && period.is_finite()) {
            return Err(("motion.period", "must be positive"));
        }
    }
    Ok(())
}

// --- file representation -------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default = "RobotModel::two_segment")]
    robot: RobotModel,
    #[serde(default)]
    workspace: WorkspaceFile,
    start_tip: [f64; 3],
    goal_tip: [f64; 3],
    #[serde(default)]
    obstacles: Vec<ObstacleFile>,
    #[serde(default)]
    controller: ControllerParams,
    #[serde(default)]
    planner: PlannerParams,
    #[serde(default = "unit_time_step")]
    time_step: f64,
    #[serde(default)]
    rng_seed: u64,
    #[serde(default)]
    bench: BenchSettings,
}

fn unit_time_step() -> f64 {
    1.0
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkspaceFile {
    min: [f64; 3],
    max: [f64; 3],
}

impl Default for WorkspaceFile {
    fn default() -> Self {
        let w = Workspace::default();
        Self {
            min: w.min.into(),
            max: w.max.into(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObstacleFile {
    center: [f64; 3],
    radius: RadiusFile,
    #[serde(default)]
    motion: MotionFile,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RadiusFile {
    base: f64,
    #[serde(default)]
    amplitude: f64,
    #[serde(default = "sin_phase")]
    phase: Phase,
    #[serde(default = "unit_rate")]
    rate: f64,
}

fn sin_phase() -> Phase {
    Phase::Sin
}

fn unit_rate() -> f64 {
    1.0
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum MotionFile {
    #[default]
    Static,
    Linear {
        half_span: [f64; 3],
        #[serde(default = "sin_phase")]
        phase: Phase,
        period: f64,
    },
}

impl From<ScenarioFile> for Scenario {
    fn from(f: ScenarioFile) -> Self {
        Scenario {
            model: f.robot,
            workspace: Workspace {
                min: f.workspace.min.into(),
                max: f.workspace.max.into(),
            },
            start_tip: f.start_tip.into(),
            goal_tip: f.goal_tip.into(),
            obstacles: f
                .obstacles
                .into_iter()
                .map(|o| DynamicSphere {
                    center: o.center.into(),
                    radius: RadiusLaw {
                        base: o.radius.base,
                        amplitude: o.radius.amplitude,
                        phase: o.radius.phase,
                        rate: o.radius.rate,
                    },
                    motion: match o.motion {
                        MotionFile::Static => Motion::Static,
                        MotionFile::Linear {
                            half_span,
                            phase,
                            period,
                        } => Motion::Linear {
                            half_span: half_span.into(),
                            phase,
                            period,
                        },
                    },
                })
                .collect(),
            controller: f.controller,
            planner: f.planner,
            time_step: f.time_step,
            rng_seed: f.rng_seed,
            bench: f.bench,
        }
    }
}

impl From<&Scenario> for ScenarioFile {
    fn from(s: &Scenario) -> Self {
        ScenarioFile {
            robot: s.model.clone(),
            workspace: WorkspaceFile {
                min: s.workspace.min.into(),
                max: s.workspace.max.into(),
            },
            start_tip: s.start_tip.into(),
            goal_tip: s.goal_tip.into(),
            obstacles: s
                .obstacles
                .iter()
                .map(|o| ObstacleFile {
                    center: o.center.into(),
                    radius: RadiusFile {
                        base: o.radius.base,
                        amplitude: o.radius.amplitude,
                        phase: o.radius.phase,
                        rate: o.radius.rate,
                    },
                    motion: match o.motion {
                        Motion::Static => MotionFile::Static,
                        Motion::Linear {
                            half_span,
                            phase,
                            period,
                        } => MotionFile::Linear {
                            half_span: half_span.into(),
                            phase,
                            period,
                        },
                    },
                })
                .collect(),
            controller: s.controller.clone(),
            planner: s.planner.clone(),
            time_step: s.time_step,
            rng_seed: s.rng_seed,
            bench: s.bench.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{ "start_tip": [-50, 100, 390], "goal_tip": [10, -120, 170] }"#;

    fn with(extra: &str) -> String {
        format!(r#"{{ "start_tip": [-50, 100, 390], "goal_tip": [10, -120, 170], {extra} }}"#)
    }

    fn error_of(text: &str) -> ParseError {
        Scenario::from_json_str(text).expect_err("should be rejected")
    }

    #[test]
    fn minimal_file_takes_defaults() {
        let s = Scenario::from_json_str(MINIMAL).unwrap();
        assert_eq!(s.model, RobotModel::two_segment());
        assert_eq!(s.workspace, Workspace::default());
        assert_eq!(s.controller, ControllerParams::default());
        assert_eq!(s.time_step, 1.0);
        assert!(s.obstacles.is_empty());
    }

    #[test]
    fn negative_radius_names_the_field() {
        let e = error_of(&with(
            r#""obstacles": [{ "center": [0,0,300], "radius": { "base": 10 } }, { "center": [0,0,300], "radius": { "base": -5 } }]"#,
        ));
        assert_eq!(e.field_path, "obstacles[1].radius.base");
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        let e = error_of(&with(r#""colour": 3"#));
        assert_eq!(e.field_path, "colour");
        assert!(e.reason.contains("unknown field"), "{e}");
        let e = error_of(&with(r#""controller": { "penalty_mu": 20, "mu": 3 }"#));
        assert_eq!(e.field_path, "controller.mu");
        let e = error_of(&with(
            r#""obstacles": [{ "center": [0,0,1], "radius": { "base": 1, "sigma": 2 } }]"#,
        ));
        assert_eq!(e.field_path, "obstacles[0].radius.sigma");
        let e = error_of(&with(r#""bench": { "trials": 2 }"#));
        assert_eq!(e.field_path, "bench.trials");
    }

    #[test]
    fn type_errors_carry_the_path() {
        let e = error_of(&with(r#""planner": { "max_iterations": -3 }"#));
        assert_eq!(e.field_path, "planner.max_iterations");
        let e = error_of(r#"{ "start_tip": [1, 2], "goal_tip": [10, -120, 170] }"#);
        assert_eq!(e.field_path, "start_tip");
    }

    #[test]
    fn range_errors_carry_the_path() {
        assert_eq!(
            error_of(r#"{ "start_tip": [0, 0, 900], "goal_tip": [10, -120, 170] }"#).field_path,
            "start_tip"
        );
        assert_eq!(
            error_of(&with(r#""controller": { "damping_lambda": 0 }"#)).field_path,
            "controller.damping_lambda"
        );
        assert_eq!(error_of(&with(r#""time_step": 0"#)).field_path, "time_step");
        let e = error_of(&with(
            r#""obstacles": [{ "center": [0,0,1], "radius": { "base": 10, "amplitude": 12 } }]"#,
        ));
        assert_eq!(e.field_path, "obstacles[0].radius.amplitude");
        let e = error_of(&with(
            r#""obstacles": [{ "center": [0,0,1], "radius": { "base": 10 }, "motion": { "type": "linear", "half_span": [1,0,0], "period": 0 } }]"#,
        ));
        assert_eq!(e.field_path, "obstacles[0].motion.period");
        let e = error_of(&with(
            r#""robot": { "segments": [{ "length": 10, "cable_pitch": 4, "cable_count": 3 }], "base_z_limits": [0, 1], "disc_radius": 1 }"#,
        ));
        assert_eq!(e.field_path, "robot.segments[0].cable_pitch");
    }

    #[test]
    fn motion_and_radius_laws_are_read() {
        let s = Scenario::from_json_str(&with(
            r#""obstacles": [{ "center": [1,2,3], "radius": { "base": 45, "amplitude": 15, "phase": "cos", "rate": 0.5 },
                "motion": { "type": "linear", "half_span": [0, 10, 0], "phase": "cos", "period": 8 } }]"#,
        ))
        .unwrap();
        let o = &s.obstacles[0];
        assert_eq!(
            o.radius,
            RadiusLaw {
                base: 45.0,
                amplitude: 15.0,
                phase: Phase::Cos,
                rate: 0.5
            }
        );
        assert_eq!(
            o.motion,
            Motion::Linear {
                half_span: Vector3::new(0.0, 10.0, 0.0),
                phase: Phase::Cos,
                period: 8.0
            }
        );
    }

    #[test]
    fn json_round_trip() {
        let s = Scenario::from_json_str(&with(
            r#""obstacles": [{ "center": [1,2,3], "radius": { "base": 45, "amplitude": 15, "phase": "cos", "rate": 0.5 },
                "motion": { "type": "linear", "half_span": [0, 10, 0], "period": 8 } }], "rng_seed": 99"#,
        ))
        .unwrap();
        assert_eq!(Scenario::from_json_str(&s.to_json_string()).unwrap(), s);
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        assert!(Scenario::from_json_str(&format!("{MINIMAL} 1")).is_err());
    }
}
