//! Piecewise-constant-curvature kinematics for multi-segment cable-driven
//! continuum robots.
//!
//! Each segment bends as a circular arc described by a bending angle `theta`
//! and a bending-plane angle `phi`. Segments are actuated by cables routed at
//! radius `cable_pitch` around the backbone; the robot base additionally
//! translates along the world z axis. The drive vector of an `n`-segment robot
//! is therefore `[q_1,1 .. q_n,c, base_z]`, and the configuration vector is
//! `[theta_1, phi_1, .., theta_n, phi_n, base_z]`.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this bending angle the arc map is evaluated with its Taylor series.
pub const THETA_EPS: f64 = 1e-7;

/// Central-difference step used by [`task_jacobian`].
pub const TASK_JACOBIAN_STEP: f64 = 1e-6;

const SQRT_3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("invalid segment geometry: {0}")]
    InvalidGeometry(String),
    #[error("expected {expected} values, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cable lengths imply bending angle {theta} > pi")]
    BendingOutOfRange { theta: f64 },
    #[error("cable length {0} is not positive")]
    NonPositiveCable(f64),
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(TAU);
    if a > PI {
        a -= TAU;
    }
    a
}

/// Geometry and stiffness of one segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentGeometry {
    /// Backbone length (mm); constant, the backbone does not elongate.
    pub length: f64,
    /// Radius from the disc center to the cable channels (mm).
    pub cable_pitch: f64,
    /// Number of evenly spaced cables.
    pub cable_count: usize,
    /// Bending stiffness, moment per radian.
    #[serde(default = "unit_stiffness")]
    pub stiffness: f64,
}

impl SegmentGeometry {
    pub fn new(length: f64, cable_pitch: f64) -> Result<Self, KinematicsError> {
        let geom = Self {
            length,
            cable_pitch,
            cable_count: 3,
            stiffness: 1.0,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(KinematicsError::InvalidGeometry(format!(
                "length must be positive, got {}",
                self.length
            )));
        }
        if !(self.cable_pitch > 0.0 && self.cable_pitch.is_finite()) {
            return Err(KinematicsError::InvalidGeometry(format!(
                "cable pitch must be positive, got {}",
                self.cable_pitch
            )));
        }
        if self.cable_count < 3 {
            return Err(KinematicsError::InvalidGeometry(format!(
                "at least 3 cables are required, got {}",
                self.cable_count
            )));
        }
        if !(self.stiffness > 0.0 && self.stiffness.is_finite()) {
            return Err(KinematicsError::InvalidGeometry(format!(
                "stiffness must be positive, got {}",
                self.stiffness
            )));
        }
        Ok(())
    }

    /// Angular spacing between neighbouring cables.
    pub fn cable_spacing(&self) -> f64 {
        TAU / self.cable_count as f64
    }
}

/// Bending angle and bending-plane angle of one segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub theta: f64,
    pub phi: f64,
}

impl SegmentConfig {
    /// Builds a configuration with `phi` wrapped into `(-pi, pi]`.
    pub fn new(theta: f64, phi: f64) -> Self {
        Self {
            theta,
            phi: wrap_angle(phi),
        }
    }

    pub const fn straight() -> Self {
        Self { theta: 0.0, phi: 0.0 }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=PI).contains(&self.theta) && self.phi > -PI && self.phi <= PI
    }

    /// Bending radius `L / theta`; `None` for a straight segment.
    pub fn bending_radius(&self, geom: &SegmentGeometry) -> Option<f64> {
        (self.theta > 0.0).then(|| geom.length / self.theta)
    }
}

/// Geometry of the whole robot.
fn unit_stiffness() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotModel {
    /// Segments ordered from base to tip.
    pub segments: Vec<SegmentGeometry>,
    /// Travel of the prismatic base along world z (mm).
    pub base_z_limits: (f64, f64),
    /// Disc radius (mm); added to clearance margins since the body is
    /// collision-checked along its centerline.
    pub disc_radius: f64,
}

impl RobotModel {
    /// Two 150 mm segments, 3 mm cable pitch, 6 mm discs, 200 mm base travel.
    pub fn two_segment() -> Self {
        let seg = SegmentGeometry {
            length: 150.0,
            cable_pitch: 3.0,
            cable_count: 3,
            stiffness: 1.0,
        };
        Self {
            segments: vec![seg, seg],
            base_z_limits: (0.0, 200.0),
            disc_radius: 3.0,
        }
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        if self.segments.is_empty() {
            return Err(KinematicsError::InvalidGeometry(
                "robot needs at least one segment".into(),
            ));
        }
        for seg in &self.segments {
            seg.validate()?;
        }
        let (lo, hi) = self.base_z_limits;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(KinematicsError::InvalidGeometry(format!(
                "base z limits [{lo}, {hi}] are empty"
            )));
        }
        if !(self.disc_radius >= 0.0) {
            return Err(KinematicsError::InvalidGeometry(
                "disc radius must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    /// Dimension of the configuration vector, `2n + 1`.
    pub fn config_dim(&self) -> usize {
        2 * self.segments.len() + 1
    }

    /// Dimension of the drive vector, total cable count plus the base axis.
    pub fn drive_dim(&self) -> usize {
        self.segments.iter().map(|s| s.cable_count).sum::<usize>() + 1
    }

    pub fn clamp_base_z(&self, z: f64) -> f64 {
        z.clamp(self.base_z_limits.0, self.base_z_limits.1)
    }

    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(|s| s.length).sum()
    }
}

/// Full robot configuration: per-segment `(theta, phi)` plus base translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub segments: Vec<SegmentConfig>,
    pub base_z: f64,
}

impl RobotState {
    pub fn straight(n: usize, base_z: f64) -> Self {
        Self {
            segments: vec![SegmentConfig::straight(); n],
            base_z,
        }
    }

    pub fn is_valid_for(&self, model: &RobotModel) -> bool {
        self.segments.len() == model.segments.len()
            && self.segments.iter().all(SegmentConfig::is_valid)
            && self.base_z >= model.base_z_limits.0 - 1e-12
            && self.base_z <= model.base_z_limits.1 + 1e-12
    }

    /// `[theta_1, phi_1, .., theta_n, phi_n, base_z]`.
    pub fn config_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(2 * self.segments.len() + 1);
        for (k, seg) in self.segments.iter().enumerate() {
            v[2 * k] = seg.theta;
            v[2 * k + 1] = seg.phi;
        }
        v[2 * self.segments.len()] = self.base_z;
        v
    }

    /// Inverse of [`RobotState::config_vector`]; `phi` entries are wrapped.
    pub fn from_config_vector(v: &DVector<f64>) -> Result<Self, KinematicsError> {
        if v.len() < 3 || v.len() % 2 == 0 {
            return Err(KinematicsError::DimensionMismatch {
                expected: 2 * (v.len() / 2) + 1,
                found: v.len(),
            });
        }
        let n = v.len() / 2;
        let segments = (0..n).map(|k| SegmentConfig::new(v[2 * k], v[2 * k + 1])).collect();
        Ok(Self {
            segments,
            base_z: v[2 * n],
        })
    }
}

/// Cable lengths of every segment plus the base translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CableLengths {
    pub segments: Vec<Vec<f64>>,
    pub base_z: f64,
}

/// Rigid transform with an explicit rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Frame {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// `self * child`: expresses `child` (given in this frame) in the parent of `self`.
    pub fn compose(&self, child: &Frame) -> Frame {
        Frame {
            rotation: self.rotation * child.rotation,
            translation: self.rotation * child.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn rot_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Point of an arc of length `length` bent by `theta` in plane `phi`,
/// expressed in the arc's base frame. Accepts any real `theta`.
fn arc_point(theta: f64, phi: f64, length: f64) -> Vector3<f64> {
    // (1 - cos t) / t and sin t / t
    let (versine_ratio, sine_ratio) = if theta.abs() < THETA_EPS {
        let t2 = theta * theta;
        (
            theta * (0.5 - t2 / 24.0 + t2 * t2 / 720.0),
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
        )
    } else {
        ((1.0 - theta.cos()) / theta, theta.sin() / theta)
    };
    let (sp, cp) = phi.sin_cos();
    length * Vector3::new(versine_ratio * cp, versine_ratio * sp, sine_ratio)
}

/// Tip of a single segment in its base frame.
pub fn segment_tip_position(cfg: &SegmentConfig, geom: &SegmentGeometry) -> Vector3<f64> {
    arc_point(cfg.theta, cfg.phi, geom.length)
}

/// Orientation of a segment tip relative to its base: `Rz(phi) Ry(theta) Rz(-phi)`.
pub fn segment_rotation(theta: f64, phi: f64) -> Matrix3<f64> {
    rot_z(phi) * rot_y(theta) * rot_z(-phi)
}

pub fn segment_transform(cfg: &SegmentConfig, geom: &SegmentGeometry) -> Frame {
    Frame {
        rotation: segment_rotation(cfg.theta, cfg.phi),
        translation: segment_tip_position(cfg, geom),
    }
}

/// Base frame of every segment followed by the tip frame (`n + 1` frames).
///
/// The first frame is the robot base translated to `[0, 0, base_z]`.
pub fn forward_kinematics(state: &RobotState, model: &RobotModel) -> Vec<Frame> {
    debug_assert_eq!(state.segments.len(), model.segments.len());
    let mut frames = Vec::with_capacity(state.segments.len() + 1);
    let mut current = Frame::from_translation(Vector3::new(0.0, 0.0, state.base_z));
    frames.push(current);
    for (cfg, geom) in state.segments.iter().zip(&model.segments) {
        current = current.compose(&segment_transform(cfg, geom));
        frames.push(current);
    }
    frames
}

pub fn tip_position(state: &RobotState, model: &RobotModel) -> Vector3<f64> {
    let mut rotation = Matrix3::identity();
    let mut position = Vector3::new(0.0, 0.0, state.base_z);
    for (cfg, geom) in state.segments.iter().zip(&model.segments) {
        position += rotation * segment_tip_position(cfg, geom);
        rotation *= segment_rotation(cfg.theta, cfg.phi);
    }
    position
}

/// Samples `points_per_segment` centerline points per segment at evenly
/// spaced arc-length fractions `0, 1/(K-1), .., 1`, in world coordinates.
///
/// Adjacent segments share their junction, so it appears twice.
pub fn body_points(state: &RobotState, model: &RobotModel, points_per_segment: usize) -> Vec<Vector3<f64>> {
    assert!(points_per_segment >= 2, "need at least two points per segment");
    let frames = forward_kinematics(state, model);
    let denom = (points_per_segment - 1) as f64;
    let mut points = Vec::with_capacity(state.segments.len() * points_per_segment);
    for ((cfg, geom), base) in state.segments.iter().zip(&model.segments).zip(&frames) {
        for j in 0..points_per_segment {
            let s = j as f64 / denom;
            let local = arc_point(s * cfg.theta, cfg.phi, s * geom.length);
            points.push(base.transform_point(&local));
        }
    }
    points
}

/// Cable lengths `q_i = L - r theta cos(phi + (i-1) xi)`.
pub fn cables_from_config(cfg: &SegmentConfig, geom: &SegmentGeometry) -> Vec<f64> {
    let xi = geom.cable_spacing();
    (0..geom.cable_count)
        .map(|i| geom.length - geom.cable_pitch * cfg.theta * (cfg.phi + i as f64 * xi).cos())
        .collect()
}

/// Recovers `(theta, phi)` from one segment's cable lengths.
///
/// `phi` is 0 when the segment is straight (`theta < THETA_EPS`).
pub fn config_from_cables(q: &[f64], geom: &SegmentGeometry) -> Result<SegmentConfig, KinematicsError> {
    if q.len() != geom.cable_count {
        return Err(KinematicsError::DimensionMismatch {
            expected: geom.cable_count,
            found: q.len(),
        });
    }
    if let Some(&bad) = q.iter().find(|&&v| !(v > 0.0)) {
        return Err(KinematicsError::NonPositiveCable(bad));
    }
    let (theta, phi) = raw_config_from_cables(q, geom);
    if theta > PI + 1e-12 {
        return Err(KinematicsError::BendingOutOfRange { theta });
    }
    Ok(SegmentConfig::new(theta.min(PI), phi))
}

/// Bending angle and plane of a cable set without range checks; the bending
/// angle may exceed pi. Expects `q.len() == geom.cable_count`.
pub(crate) fn raw_config_from_cables(q: &[f64], geom: &SegmentGeometry) -> (f64, f64) {
    let r = geom.cable_pitch;
    let (theta, phi) = if geom.cable_count == 3 {
        let (q1, q2, q3) = (q[0], q[1], q[2]);
        // q1^2 + q2^2 + q3^2 - q1 q2 - q2 q3 - q1 q3, written as half the sum
        // of squared pairwise differences to avoid cancellation.
        let spread = 0.5 * ((q1 - q2).powi(2) + (q2 - q3).powi(2) + (q1 - q3).powi(2));
        let theta = 2.0 * spread.sqrt() / (3.0 * r);
        let phi = (SQRT_3 * (q2 - q3)).atan2(q2 + q3 - 2.0 * q1);
        (theta, phi)
    } else {
        // first Fourier coefficient of the cable deviations
        let xi = geom.cable_spacing();
        let n = geom.cable_count as f64;
        let (mut c, mut s) = (0.0, 0.0);
        for (i, &qi) in q.iter().enumerate() {
            let dev = geom.length - qi;
            let (si, ci) = (i as f64 * xi).sin_cos();
            c += dev * ci;
            s -= dev * si;
        }
        let (c, s) = (2.0 * c / (n * r), 2.0 * s / (n * r));
        (c.hypot(s), s.atan2(c))
    };
    if theta < THETA_EPS {
        (theta, 0.0)
    } else {
        (theta, phi)
    }
}

/// `d q / d [theta, phi]` for one segment (`cable_count x 2`).
pub fn segment_jacobian(cfg: &SegmentConfig, geom: &SegmentGeometry) -> DMatrix<f64> {
    let xi = geom.cable_spacing();
    let r = geom.cable_pitch;
    DMatrix::from_fn(geom.cable_count, 2, |i, j| {
        let angle = cfg.phi + i as f64 * xi;
        match j {
            0 => -r * angle.cos(),
            _ => r * cfg.theta * angle.sin(),
        }
    })
}

/// Block-diagonal map from configuration rates to drive rates.
///
/// The last row and column carry the prismatic base, which maps one to one.
pub fn robot_jacobian(state: &RobotState, model: &RobotModel) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(model.drive_dim(), model.config_dim());
    let mut row = 0;
    for (k, (cfg, geom)) in state.segments.iter().zip(&model.segments).enumerate() {
        let block = segment_jacobian(cfg, geom);
        jac.view_mut((row, 2 * k), (geom.cable_count, 2)).copy_from(&block);
        row += geom.cable_count;
    }
    jac[(row, 2 * model.segment_count())] = 1.0;
    jac
}

/// `d tip / d config` (`3 x (2n+1)`) by central differences.
pub fn task_jacobian(state: &RobotState, model: &RobotModel) -> DMatrix<f64> {
    let dim = model.config_dim();
    let base = state.config_vector();
    let mut jac = DMatrix::zeros(3, dim);
    let eval = |v: &DVector<f64>| {
        let n = model.segment_count();
        // unwrapped on purpose: finite differences may step theta below zero
        let perturbed = RobotState {
            segments: (0..n)
                .map(|k| SegmentConfig {
                    theta: v[2 * k],
                    phi: v[2 * k + 1],
                })
                .collect(),
            base_z: v[2 * n],
        };
        tip_position(&perturbed, model)
    };
    for j in 0..dim {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[j] += TASK_JACOBIAN_STEP;
        minus[j] -= TASK_JACOBIAN_STEP;
        let col = (eval(&plus) - eval(&minus)) / (2.0 * TASK_JACOBIAN_STEP);
        jac.view_mut((0, j), (3, 1)).copy_from(&col);
    }
    jac
}

pub fn cable_lengths(state: &RobotState, model: &RobotModel) -> CableLengths {
    CableLengths {
        segments: state
            .segments
            .iter()
            .zip(&model.segments)
            .map(|(cfg, geom)| cables_from_config(cfg, geom))
            .collect(),
        base_z: state.base_z,
    }
}

/// Flattened drive vector `[cables.., base_z]`.
pub fn drive_vector(state: &RobotState, model: &RobotModel) -> DVector<f64> {
    let lengths = cable_lengths(state, model);
    let mut values: Vec<f64> = lengths.segments.into_iter().flatten().collect();
    values.push(state.base_z);
    DVector::from_vec(values)
}

/// Configuration reached by a drive vector. The base coordinate is taken as is.
pub fn state_from_drive(q: &DVector<f64>, model: &RobotModel) -> Result<RobotState, KinematicsError> {
    if q.len() != model.drive_dim() {
        return Err(KinematicsError::DimensionMismatch {
            expected: model.drive_dim(),
            found: q.len(),
        });
    }
    let mut offset = 0;
    let mut segments = Vec::with_capacity(model.segment_count());
    for geom in &model.segments {
        let slice = &q.as_slice()[offset..offset + geom.cable_count];
        segments.push(config_from_cables(slice, geom)?);
        offset += geom.cable_count;
    }
    Ok(RobotState {
        segments,
        base_z: q[offset],
    })
}

/// Own and resultant bending moments per segment.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub own: Vec<f64>,
    pub resultant: Vec<f64>,
}

/// Effective configuration of a segment under the moment of its successor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoupledConfig {
    pub theta: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingOptions {
    /// Add the constant quarter-turn to the coupled bending plane.
    pub quarter_turn_offset: bool,
}

impl Default for CouplingOptions {
    fn default() -> Self {
        Self {
            quarter_turn_offset: true,
        }
    }
}

/// `M_k = K_B theta_k`, accumulated tip to base: `Mbar_n = M_n`,
/// `Mbar_{k-1} = M_{k-1} + Mbar_k`.
pub fn moment_state(configs: &[SegmentConfig], model: &RobotModel) -> MomentState {
    let own: Vec<f64> = configs
        .iter()
        .zip(&model.segments)
        .map(|(c, g)| g.stiffness * c.theta)
        .collect();
    let mut resultant = own.clone();
    for k in (0..own.len().saturating_sub(1)).rev() {
        resultant[k] = own[k] + resultant[k + 1];
    }
    MomentState { own, resultant }
}

/// Coupled `(theta_bar, phi_bar)` of every segment.
///
/// Each proximal segment combines its own moment with the distal segment's
/// moment as planar vectors at angles `phi_{k-1}` and `phi_k - pi`. The most
/// distal segment carries no coupling and is returned unchanged.
pub fn coupled_configuration(
    configs: &[SegmentConfig],
    model: &RobotModel,
    options: CouplingOptions,
) -> Vec<CoupledConfig> {
    let n = configs.len();
    let moments = moment_state(configs, model);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        if k + 1 == n {
            out.push(CoupledConfig {
                theta: configs[k].theta,
                phi: configs[k].phi,
            });
            continue;
        }
        let kb = model.segments[k].stiffness;
        let own = moments.own[k];
        let distal = model.segments[k + 1].stiffness * configs[k + 1].theta;
        let (phi_own, phi_distal) = (configs[k].phi, configs[k + 1].phi);
        let theta = if distal == 0.0 {
            configs[k].theta
        } else {
            let sq = own * own + distal * distal + 2.0 * own * distal * (phi_own - phi_distal + PI).cos();
            sq.max(0.0).sqrt() / kb
        };
        let y = own * phi_own.sin() + distal * (phi_distal - PI).sin();
        let x = own * phi_own.cos() + distal * (phi_distal - PI).cos();
        let offset = if options.quarter_turn_offset { PI / 2.0 } else { 0.0 };
        out.push(CoupledConfig {
            theta,
            phi: wrap_angle(offset + y.atan2(x)),
        });
    }
    out
}
