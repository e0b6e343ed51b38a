//! Time-varying spherical obstacles, the workspace box, and clearance queries.

use std::f64::consts::TAU;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::pcc::{body_points, RobotModel, RobotState};

/// Default spacing of tip-edge collision samples (mm).
pub const DEFAULT_EDGE_RESOLUTION: f64 = 5.0;

/// Periodic profile used by radius laws and oscillating motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Sin,
    Cos,
}

impl Phase {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Phase::Sin => x.sin(),
            Phase::Cos => x.cos(),
        }
    }
}

/// `radius(t) = base + amplitude * phase(rate * t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusLaw {
    pub base: f64,
    pub amplitude: f64,
    pub phase: Phase,
    pub rate: f64,
}

impl RadiusLaw {
    pub fn constant(radius: f64) -> Self {
        Self {
            base: radius,
            amplitude: 0.0,
            phase: Phase::Sin,
            rate: 0.0,
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        self.base + self.amplitude * self.phase.eval(self.rate * t)
    }
}

/// Motion of an obstacle center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    Static,
    /// Oscillation along a line through the center:
    /// `center + half_span * phase(2 pi t / period)`, so the endpoints are
    /// `center -/+ half_span`.
    Linear {
        half_span: Vector3<f64>,
        phase: Phase,
        period: f64,
    },
}

/// A sphere at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: Vector3<f64>,
    pub radius: f64,
}

impl Sphere {
    /// Signed distance from `p` to the surface; negative inside.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        (p - self.center).norm() - self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicSphere {
    pub center: Vector3<f64>,
    pub motion: Motion,
    pub radius: RadiusLaw,
}

impl DynamicSphere {
    pub fn fixed(center: Vector3<f64>, radius: f64) -> Self {
        Self {
            center,
            motion: Motion::Static,
            radius: RadiusLaw::constant(radius),
        }
    }

    pub fn center_at(&self, t: f64) -> Vector3<f64> {
        match self.motion {
            Motion::Static => self.center,
            Motion::Linear {
                half_span,
                phase,
                period,
            } => self.center + half_span * phase.eval(TAU * t / period),
        }
    }

    pub fn at(&self, t: f64) -> Sphere {
        Sphere {
            center: self.center_at(t),
            radius: self.radius.at(t),
        }
    }

    /// Mean speed of the center over one period (mm/s).
    pub fn mean_speed(&self) -> f64 {
        match self.motion {
            Motion::Static => 0.0,
            // a full period sweeps the span twice
            Motion::Linear { half_span, period, .. } => 2.0 * (2.0 * half_span.norm()) / period,
        }
    }

    pub fn min_radius(&self) -> f64 {
        self.radius.base - self.radius.amplitude.abs()
    }

    pub fn max_radius(&self) -> f64 {
        self.radius.base + self.radius.amplitude.abs()
    }
}

/// Center and radius of `obs` at time `t`.
pub fn obstacle_state_at(obs: &DynamicSphere, t: f64) -> (Vector3<f64>, f64) {
    let s = obs.at(t);
    (s.center, s.radius)
}

/// Every obstacle evaluated at every listed time.
pub fn snapshot(obstacles: &[DynamicSphere], times: &[f64]) -> Vec<Sphere> {
    times
        .iter()
        .flat_map(|&t| obstacles.iter().map(move |o| o.at(t)))
        .collect()
}

/// Axis-aligned box bounding the tip and body (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Workspace {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Workspace {
    /// Box of the given extents centered on the base axis, from z = 0 up.
    pub fn around_base_axis(x_extent: f64, y_extent: f64, height: f64) -> Self {
        Self {
            min: Vector3::new(-x_extent / 2.0, -y_extent / 2.0, 0.0),
            max: Vector3::new(x_extent / 2.0, y_extent / 2.0, height),
        }
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] < self.max[i])
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

impl Default for Workspace {
    fn default() -> Self {
        Self::around_base_axis(300.0, 300.0, 500.0)
    }
}

/// Smallest signed surface distance between any point and the obstacle at `t`.
pub fn min_surface_distance(points: &[Vector3<f64>], obs: &DynamicSphere, t: f64) -> f64 {
    let sphere = obs.at(t);
    points
        .iter()
        .map(|p| sphere.surface_distance(p))
        .fold(f64::INFINITY, f64::min)
}

/// Smallest signed surface distance between any point and any sphere.
pub fn clearance(points: &[Vector3<f64>], spheres: &[Sphere]) -> f64 {
    spheres
        .iter()
        .flat_map(|s| points.iter().map(move |p| s.surface_distance(p)))
        .fold(f64::INFINITY, f64::min)
}

/// Body points per segment so that the robot carries `total` points.
pub fn points_per_segment(total: usize, segments: usize) -> usize {
    total.div_ceil(segments.max(1)).max(2)
}

/// Collision geometry shared by validity checks: the workspace, the body
/// sampling density and the required surface clearance.
#[derive(Debug, Clone, Copy)]
pub struct SafetyCheck<'a> {
    pub model: &'a RobotModel,
    pub workspace: &'a Workspace,
    pub points_per_segment: usize,
    /// Required clearance between centerline points and obstacle surfaces.
    pub margin: f64,
}

impl SafetyCheck<'_> {
    pub fn body(&self, state: &RobotState) -> Vec<Vector3<f64>> {
        body_points(state, self.model, self.points_per_segment)
    }
}

/// True iff every body point is inside the workspace and at least `margin`
/// away from every obstacle surface at time `t`. The inequality is closed.
pub fn state_is_safe(state: &RobotState, obstacles: &[DynamicSphere], t: f64, check: &SafetyCheck) -> bool {
    let points = check.body(state);
    points_are_safe(&points, obstacles, t, check.margin) && points.iter().all(|p| check.workspace.contains(p))
}

fn points_are_safe(points: &[Vector3<f64>], obstacles: &[DynamicSphere], t: f64, margin: f64) -> bool {
    obstacles.iter().all(|o| min_surface_distance(points, o, t) >= margin)
}

/// Samples the straight tip segment at no more than `resolution` spacing and
/// requires every sample to clear every obstacle by `margin`, evaluated at
/// both `t_now` and `t_next`.
pub fn edge_is_safe(
    from: &Vector3<f64>,
    to: &Vector3<f64>,
    obstacles: &[DynamicSphere],
    (t_now, t_next): (f64, f64),
    resolution: f64,
    margin: f64,
) -> bool {
    assert!(resolution > 0.0, "edge resolution must be positive");
    let length = (to - from).norm();
    let pieces = (length / resolution).ceil().max(1.0) as usize;
    let spheres = snapshot(obstacles, &[t_now, t_next]);
    (0..=pieces).all(|i| {
        let p = from.lerp(to, i as f64 / pieces as f64);
        spheres.iter().all(|s| s.surface_distance(&p) >= margin)
    })
}
