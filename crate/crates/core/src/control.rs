//! Damped-least-squares tip control with a clearance penalty.
//!
//! The solver works on drive increments `dq` (cable lengths plus base
//! translation). Each step minimizes
//!
//! ```text
//! F(dq) = |rho J dq - Kp e|^2 + lambda^2 |dq|^2 + P(q + dq)
//! ```
//!
//! where `J` maps drive increments to tip motion, `e` is the tip error and
//! `P` is the obstacle penalty `sum mu^2 ((R + D) / min_i |p_i - C|)^2`
//! over obstacles. The quadratic part gives a Gauss-Newton direction; the
//! penalty enters through a finite-difference gradient, and a backtracking
//! line search keeps every accepted step a descent step on `F`.
//!
//! When the penalty is active the line search also refuses any candidate
//! whose body clearance would fall below the required margin (or below the
//! current clearance, if that is already smaller).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pcc::{
    body_points, drive_vector, raw_config_from_cables, state_from_drive, tip_position, wrap_angle, KinematicsError,
    RobotModel, RobotState, SegmentConfig,
};
use crate::world::{clearance, points_per_segment, Sphere};

/// Central-difference step of the drive-space tip Jacobian (mm).
pub const DRIVE_JACOBIAN_STEP: f64 = 1e-6;
/// Central-difference step of the penalty gradient (mm).
pub const PENALTY_GRADIENT_STEP: f64 = 1e-5;
/// Fraction of the per-step cap available to the null-space penalty descent.
const SECONDARY_SHARE: f64 = 0.5;
pub const MAX_BACKTRACKS: usize = 20;
/// Obstacles whose clearance is within this band of the margin (mm) enter
/// the step computation as linearized constraints.
const CONSTRAINT_BAND: f64 = 20.0;
/// Bending angles this close to pi (rad) are linearly constrained to stay below it.
const BENDING_BAND: f64 = 0.3;
/// Extra clearance the linearized constraints aim for beyond the margin (mm).
const CONSTRAINT_SLACK: f64 = 0.5;
const ARMIJO_C: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("line search could not reduce the objective {objective}")]
    StepStalled { objective: f64 },
    #[error("tip error {tip_error:.3} mm after {iterations} iterations")]
    NotConverged {
        state: RobotState,
        tip_error: f64,
        iterations: usize,
    },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

/// Proportional gain, either isotropic or per error component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KpGain {
    Scalar(f64),
    Diagonal(Vec<f64>),
}

impl KpGain {
    pub fn is_positive_definite(&self) -> bool {
        match self {
            KpGain::Scalar(k) => *k > 0.0,
            KpGain::Diagonal(d) => !d.is_empty() && d.iter().all(|&k| k > 0.0),
        }
    }

    pub fn apply(&self, e: &DVector<f64>) -> Result<DVector<f64>, ControlError> {
        match self {
            KpGain::Scalar(k) => Ok(e * *k),
            KpGain::Diagonal(d) if d.len() == e.len() => Ok(e.component_mul(&DVector::from_column_slice(d))),
            KpGain::Diagonal(d) => Err(ControlError::DimensionMismatch {
                expected: e.len(),
                found: d.len(),
            }),
        }
    }
}

/// A parameter outside its admissible range.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field} {reason}")]
pub struct InvalidParameter {
    pub field: &'static str,
    pub reason: &'static str,
}

impl InvalidParameter {
    pub fn new(field: &'static str, reason: &'static str) -> Self {
        Self { field, reason }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerParams {
    pub kp_gain: KpGain,
    pub damping_lambda: f64,
    /// Obstacle penalty coefficient; 0 disables every body-level safety check.
    pub penalty_mu: f64,
    /// Safety distance added to obstacle radii in the penalty (mm).
    pub safety_margin: f64,
    /// Scale on the Jacobian term.
    pub rho: f64,
    /// Body points per robot used for clearance.
    pub body_point_count: usize,
    pub max_inner_iterations: usize,
    /// Tip error accepted as reached (mm).
    pub tip_tolerance: f64,
    /// Largest change of any cable length per step (mm).
    pub max_step_norm: f64,
    /// Largest change of the base translation per step (mm).
    pub max_base_step: f64,
}

impl Default for ControllerParams {
    fn default() -> Self {
        Self {
            kp_gain: KpGain::Scalar(10.0),
            damping_lambda: 0.3,
            penalty_mu: 20.0,
            safety_margin: 5.0,
            rho: 10.0,
            body_point_count: 10,
            max_inner_iterations: 200,
            tip_tolerance: 0.5,
            max_step_norm: 1.0,
            max_base_step: 10.0,
        }
    }
}

impl ControllerParams {
    /// Coefficients used among moving obstacles.
    pub fn dynamic() -> Self {
        Self {
            penalty_mu: 40.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), InvalidParameter> {
        if !self.kp_gain.is_positive_definite() {
            return Err(InvalidParameter::new("kp_gain", "must be positive definite"));
        }
        if !(self.damping_lambda > 0.0) {
            return Err(InvalidParameter::new("damping_lambda", "must be positive"));
        }
        if !(self.penalty_mu >= 0.0) {
            return Err(InvalidParameter::new("penalty_mu", "must be non-negative"));
        }
        if !(self.safety_margin >= 0.0) {
            return Err(InvalidParameter::new("safety_margin", "must be non-negative"));
        }
        if !(self.rho > 0.0) {
            return Err(InvalidParameter::new("rho", "must be positive"));
        }
        if self.body_point_count < 2 {
            return Err(InvalidParameter::new("body_point_count", "must be at least 2"));
        }
        if self.max_inner_iterations == 0 {
            return Err(InvalidParameter::new("max_inner_iterations", "must be at least 1"));
        }
        if !(self.tip_tolerance > 0.0) {
            return Err(InvalidParameter::new("tip_tolerance", "must be positive"));
        }
        if !(self.max_step_norm > 0.0) {
            return Err(InvalidParameter::new("max_step_norm", "must be positive"));
        }
        if !(self.max_base_step > 0.0) {
            return Err(InvalidParameter::new("max_base_step", "must be positive"));
        }
        Ok(())
    }

    pub fn safety_enabled(&self) -> bool {
        self.penalty_mu > 0.0
    }

    /// Surface clearance required of body points: safety distance plus disc radius.
    pub fn clearance_margin(&self, model: &RobotModel) -> f64 {
        self.safety_margin + model.disc_radius
    }

    pub fn points_per_segment(&self, model: &RobotModel) -> usize {
        points_per_segment(self.body_point_count, model.segment_count())
    }
}

/// `desired - current` over configuration vectors, with bending-plane
/// entries wrapped into `(-pi, pi]`.
pub fn configuration_error(desired: &DVector<f64>, current: &DVector<f64>) -> Result<DVector<f64>, ControlError> {
    if desired.len() != current.len() {
        return Err(ControlError::DimensionMismatch {
            expected: desired.len(),
            found: current.len(),
        });
    }
    let n = desired.len() / 2;
    let mut e = desired - current;
    for k in 0..n {
        e[2 * k + 1] = wrap_angle(e[2 * k + 1]);
    }
    Ok(e)
}

/// Minimizer of `|J d - Kp e|^2 + lambda^2 |d|^2`.
pub fn dls_step(
    jacobian: &DMatrix<f64>,
    error: &DVector<f64>,
    params: &ControllerParams,
) -> Result<DVector<f64>, ControlError> {
    if jacobian.nrows() != error.len() {
        return Err(ControlError::DimensionMismatch {
            expected: jacobian.nrows(),
            found: error.len(),
        });
    }
    let target = params.kp_gain.apply(error)?;
    let zero = DVector::zeros(jacobian.ncols());
    Ok(damped_solve(jacobian, &target, &zero, params.damping_lambda))
}

/// Solves `(J^T J + lambda^2 I) d = J^T b - g / 2`.
fn damped_solve(
    jacobian: &DMatrix<f64>,
    target: &DVector<f64>,
    linear_term: &DVector<f64>,
    lambda: f64,
) -> DVector<f64> {
    let (normal, rhs) = normal_system(jacobian, target, linear_term, lambda);
    solve_spd(normal, &rhs)
}

fn normal_system(
    jacobian: &DMatrix<f64>,
    target: &DVector<f64>,
    linear_term: &DVector<f64>,
    lambda: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = jacobian.ncols();
    let normal = jacobian.tr_mul(jacobian) + DMatrix::identity(n, n) * (lambda * lambda);
    let rhs = jacobian.tr_mul(target) - linear_term * 0.5;
    (normal, rhs)
}

fn solve_spd(normal: DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    match normal.clone().cholesky() {
        Some(chol) => chol.solve(rhs),
        None => normal
            .lu()
            .solve(rhs)
            .expect("damped normal matrix is positive definite"),
    }
}

/// Search direction of one solver step.
///
/// The tip step is the damped least-squares solution on the (scaled) tip
/// Jacobian. The penalty acts as a secondary task: its descent direction is
/// projected onto the null space of the tip Jacobian and sized by the
/// Gauss-Newton curvature of the penalty residuals, so it reshapes the body
/// without fighting the tip. The sum is finally projected, in the metric of
/// the damped normal matrix, onto the linearized clearance constraints.
fn step_direction(
    jac: &DMatrix<f64>,
    target_term: &DVector<f64>,
    grad_penalty: &DVector<f64>,
    curvature: &DMatrix<f64>,
    constraints: &[(DVector<f64>, f64)],
    params: &ControllerParams,
) -> DVector<f64> {
    let zero = DVector::zeros(jac.ncols());
    let (normal, rhs) = normal_system(jac, target_term, &zero, params.damping_lambda);
    let mut preferred = solve_spd(normal.clone(), &rhs);
    preferred *= step_scale(&preferred, params);
    let gradient_norm = grad_penalty.norm();
    if gradient_norm > 0.0 {
        let n = jac.ncols();
        let lambda2 = params.damping_lambda * params.damping_lambda;
        let row_space = jac.tr_mul(
            &(jac * jac.transpose() + DMatrix::identity(jac.nrows(), jac.nrows()) * lambda2)
                .try_inverse()
                .expect("damped Gram matrix is invertible"),
        ) * jac;
        let projector = DMatrix::identity(n, n) - row_space;
        let descent = -(&projector * grad_penalty);
        // Gauss-Newton step length along the descent direction
        let along = descent.dot(&(curvature * &descent)) + lambda2 * descent.norm_squared();
        if along > 0.0 {
            let length = 0.5 * (-descent.dot(grad_penalty)).max(0.0) / along;
            let secondary = descent * length;
            // the body-shaping motion only gets a share of the step budget
            let share = step_scale(&(&secondary / SECONDARY_SHARE), params);
            preferred += secondary * share;
        }
    }
    if constraints.iter().all(|(g, b)| g.dot(&preferred) >= *b) {
        return preferred;
    }
    let rhs = &normal * &preferred;
    constrained_solve(normal, &rhs, constraints)
}

/// Minimizer of `d^T M d / 2 - rhs^T d` (with `M` positive definite)
/// subject to linear constraints `g . d >= b`, by a small primal
/// active-set method.
fn constrained_solve(normal: DMatrix<f64>, rhs: &DVector<f64>, constraints: &[(DVector<f64>, f64)]) -> DVector<f64> {
    let Some(chol) = normal.clone().cholesky() else {
        return solve_spd(normal, rhs);
    };
    let unconstrained = chol.solve(rhs);
    if constraints.is_empty() {
        return unconstrained;
    }
    // M^-1 g for every constraint row
    let scaled: Vec<DVector<f64>> = constraints.iter().map(|(g, _)| chol.solve(g)).collect();
    let mut active: Vec<usize> = Vec::new();
    let mut delta = unconstrained.clone();
    for _ in 0..4 * constraints.len() + 4 {
        let violated = constraints
            .iter()
            .enumerate()
            .filter(|(k, _)| !active.contains(k))
            .map(|(k, (g, b))| (k, b - g.dot(&delta)))
            .filter(|&(_, gap)| gap > 1e-12)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match violated {
            Some((k, _)) => active.push(k),
            None => break,
        }
        loop {
            let m = active.len();
            let gram = DMatrix::from_fn(m, m, |i, j| constraints[active[i]].0.dot(&scaled[active[j]]));
            let gaps = DVector::from_fn(m, |i, _| {
                constraints[active[i]].1 - constraints[active[i]].0.dot(&unconstrained)
            });
            let Some(multipliers) = gram.lu().solve(&gaps) else {
                active.pop();
                break;
            };
            let (worst, value) = multipliers.argmin();
            if value < 0.0 {
                active.remove(worst);
                if active.is_empty() {
                    delta = unconstrained.clone();
                    break;
                }
                continue;
            }
            delta = unconstrained.clone();
            for (i, &k) in active.iter().enumerate() {
                delta += &scaled[k] * multipliers[i];
            }
            break;
        }
    }
    delta
}

/// Joint-space increment driving the configuration toward `desired`:
/// DLS on `J_phi = pinv(J_robot)` against the configuration error.
pub fn configuration_space_increment(
    state: &RobotState,
    desired: &RobotState,
    model: &RobotModel,
    params: &ControllerParams,
) -> Result<DVector<f64>, ControlError> {
    let e = configuration_error(&desired.config_vector(), &state.config_vector())?;
    let jac = crate::pcc::robot_jacobian(state, model);
    let pinv = jac
        .pseudo_inverse(1e-12)
        .expect("SVD of the drive Jacobian does not fail");
    dls_step(&(pinv * params.rho), &e, params)
}

/// Tip position of an arbitrary drive vector, without range validation.
fn tip_of_drive(q: &DVector<f64>, model: &RobotModel) -> Vector3<f64> {
    tip_position(&raw_state_from_drive(q, model), model)
}

fn raw_state_from_drive(q: &DVector<f64>, model: &RobotModel) -> RobotState {
    let mut offset = 0;
    let mut segments = Vec::with_capacity(model.segment_count());
    for geom in &model.segments {
        let (theta, phi) = raw_config_from_cables(&q.as_slice()[offset..offset + geom.cable_count], geom);
        segments.push(SegmentConfig { theta, phi });
        offset += geom.cable_count;
    }
    RobotState {
        segments,
        base_z: q[offset],
    }
}

/// `d tip / d q` (`3 x drive_dim`) by central differences in drive space.
///
/// The tip is smooth in the cable lengths even where the bending plane is
/// undefined, so this stays well conditioned at straight configurations.
pub fn drive_tip_jacobian(state: &RobotState, model: &RobotModel) -> DMatrix<f64> {
    let q = drive_vector(state, model);
    let mut jac = DMatrix::zeros(3, q.len());
    for j in 0..q.len() {
        let mut plus = q.clone();
        let mut minus = q.clone();
        plus[j] += DRIVE_JACOBIAN_STEP;
        minus[j] -= DRIVE_JACOBIAN_STEP;
        let col = (tip_of_drive(&plus, model) - tip_of_drive(&minus, model)) / (2.0 * DRIVE_JACOBIAN_STEP);
        jac.view_mut((0, j), (3, 1)).copy_from(&col);
    }
    jac
}

/// Obstacle penalty of a set of body points.
///
/// Returns `f64::INFINITY` when a point sits on an obstacle center.
pub fn penalty_of_points(points: &[Vector3<f64>], spheres: &[Sphere], params: &ControllerParams) -> f64 {
    let mu2 = params.penalty_mu * params.penalty_mu;
    if mu2 == 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    for s in spheres {
        let nearest = points
            .iter()
            .map(|p| (p - s.center).norm())
            .fold(f64::INFINITY, f64::min);
        if nearest <= 1e-9 {
            return f64::INFINITY;
        }
        let ratio = (s.radius + params.safety_margin) / nearest;
        total += mu2 * ratio * ratio;
    }
    total
}

/// Obstacle penalty of a robot state, summed over obstacles.
pub fn safety_penalty(state: &RobotState, model: &RobotModel, spheres: &[Sphere], params: &ControllerParams) -> f64 {
    let points = body_points(state, model, params.points_per_segment(model));
    penalty_of_points(&points, spheres, params)
}

fn penalty_of_drive(q: &DVector<f64>, model: &RobotModel, spheres: &[Sphere], params: &ControllerParams) -> f64 {
    let state = raw_state_from_drive(q, model);
    safety_penalty(&state, model, spheres, params)
}

/// Central-difference gradient of the penalty in drive space.
pub fn penalty_gradient(
    state: &RobotState,
    model: &RobotModel,
    spheres: &[Sphere],
    params: &ControllerParams,
    step: f64,
) -> DVector<f64> {
    let q = drive_vector(state, model);
    DVector::from_fn(q.len(), |j, _| {
        let mut plus = q.clone();
        let mut minus = q.clone();
        plus[j] += step;
        minus[j] -= step;
        (penalty_of_drive(&plus, model, spheres, params) - penalty_of_drive(&minus, model, spheres, params))
            / (2.0 * step)
    })
}

/// Linearized per-obstacle clearance constraints `g . dq >= b` asking each
/// nearby obstacle to stay slightly beyond the clearance margin.
fn clearance_constraints(
    q0: &DVector<f64>,
    model: &RobotModel,
    spheres: &[Sphere],
    params: &ControllerParams,
) -> Vec<(DVector<f64>, f64)> {
    let per_segment = params.points_per_segment(model);
    let desired = params.clearance_margin(model) + CONSTRAINT_SLACK;
    let clearance_of = |q: &DVector<f64>, sphere: &Sphere| {
        let state = raw_state_from_drive(q, model);
        clearance(&body_points(&state, model, per_segment), std::slice::from_ref(sphere))
    };
    spheres
        .iter()
        .filter_map(|sphere| {
            let c0 = clearance_of(q0, sphere);
            if c0 > desired + CONSTRAINT_BAND {
                return None;
            }
            let gradient = DVector::from_fn(q0.len(), |j, _| {
                let mut plus = q0.clone();
                let mut minus = q0.clone();
                plus[j] += PENALTY_GRADIENT_STEP;
                minus[j] -= PENALTY_GRADIENT_STEP;
                (clearance_of(&plus, sphere) - clearance_of(&minus, sphere)) / (2.0 * PENALTY_GRADIENT_STEP)
            });
            (gradient.norm() > 1e-12).then_some((gradient, desired - c0))
        })
        .collect()
}

/// Penalty gradient and its Gauss-Newton curvature in drive space.
///
/// Each obstacle contributes `P_k = (mu r_k)^2`; with `g_k` the central
/// difference gradient of `P_k`, the residual gradient is `g_k / (2 sqrt P_k)`
/// and its outer product is the curvature that keeps the penalty from
/// pushing unboundedly along directions the tip does not see.
fn penalty_terms(
    q0: &DVector<f64>,
    model: &RobotModel,
    spheres: &[Sphere],
    params: &ControllerParams,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = q0.len();
    let mut gradient = DVector::zeros(n);
    let mut curvature = DMatrix::zeros(n, n);
    for sphere in spheres {
        let one = std::slice::from_ref(sphere);
        let value = penalty_of_drive(q0, model, one, params);
        if !value.is_finite() || value <= 0.0 {
            continue;
        }
        let g = DVector::from_fn(n, |j, _| {
            let mut plus = q0.clone();
            let mut minus = q0.clone();
            plus[j] += PENALTY_GRADIENT_STEP;
            minus[j] -= PENALTY_GRADIENT_STEP;
            (penalty_of_drive(&plus, model, one, params) - penalty_of_drive(&minus, model, one, params))
                / (2.0 * PENALTY_GRADIENT_STEP)
        });
        curvature += &g * g.transpose() / (4.0 * value);
        gradient += g;
    }
    (gradient, curvature)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkStepResult {
    /// Applied drive increment.
    pub delta_q: DVector<f64>,
    pub new_state: RobotState,
    /// Objective at the accepted increment.
    pub objective_value: f64,
    /// Objective at zero increment.
    pub initial_objective: f64,
    /// Signed body clearance of the new state (mm); infinite without obstacles.
    pub min_clearance: f64,
    /// Tip error of the new state (mm).
    pub tip_error: f64,
    pub converged: bool,
}

fn body_clearance(state: &RobotState, model: &RobotModel, spheres: &[Sphere], params: &ControllerParams) -> f64 {
    clearance(&body_points(state, model, params.points_per_segment(model)), spheres)
}

/// Whether `state` already satisfies the tip tolerance and, with the
/// penalty active, the clearance margin.
fn is_settled(
    state: &RobotState,
    model: &RobotModel,
    target: &Vector3<f64>,
    spheres: &[Sphere],
    params: &ControllerParams,
) -> bool {
    let error = (target - tip_position(state, model)).norm();
    error < params.tip_tolerance
        && (!params.safety_enabled() || body_clearance(state, model, spheres, params) >= params.clearance_margin(model))
}

/// Uniform factor (at most 1) bringing every cable change within
/// `max_step_norm` and the base change within `max_base_step`.
fn step_scale(delta: &DVector<f64>, params: &ControllerParams) -> f64 {
    let z = delta.len() - 1;
    let cables = delta.rows(0, z).amax();
    let base = delta[z].abs();
    let mut scale: f64 = 1.0;
    if cables > params.max_step_norm {
        scale = scale.min(params.max_step_norm / cables);
    }
    if base > params.max_base_step {
        scale = scale.min(params.max_base_step / base);
    }
    scale
}

/// Linearized range limits near the current state: base travel within
/// `base_z_limits` and bending angles at most pi.
///
/// Without them the clamping in the line search silently changes the
/// direction near a limit and the step may stop being a descent direction.
fn range_constraints(q0: &DVector<f64>, model: &RobotModel, params: &ControllerParams) -> Vec<(DVector<f64>, f64)> {
    let n = q0.len();
    let z = n - 1;
    let (lo, hi) = model.base_z_limits;
    let mut out = Vec::new();
    if q0[z] - lo < params.max_base_step {
        out.push((DVector::from_fn(n, |j, _| if j == z { 1.0 } else { 0.0 }), lo - q0[z]));
    }
    if hi - q0[z] < params.max_base_step {
        out.push((DVector::from_fn(n, |j, _| if j == z { -1.0 } else { 0.0 }), q0[z] - hi));
    }
    let mut offset = 0;
    for geom in &model.segments {
        let k = geom.cable_count;
        let theta_of = |q: &DVector<f64>| raw_config_from_cables(&q.as_slice()[offset..offset + k], geom).0;
        let theta0 = theta_of(q0);
        if theta0 > PI - BENDING_BAND {
            let gradient = DVector::from_fn(n, |j, _| {
                if j < offset || j >= offset + k {
                    return 0.0;
                }
                let mut plus = q0.clone();
                let mut minus = q0.clone();
                plus[j] += DRIVE_JACOBIAN_STEP;
                minus[j] -= DRIVE_JACOBIAN_STEP;
                -(theta_of(&plus) - theta_of(&minus)) / (2.0 * DRIVE_JACOBIAN_STEP)
            });
            out.push((gradient, theta0 - PI));
        }
        offset += k;
    }
    out
}

/// Shrinks each segment's cable deviations about their mean so that its
/// bending angle does not exceed pi.
fn cap_bending(q: &mut DVector<f64>, model: &RobotModel) {
    let mut offset = 0;
    for geom in &model.segments {
        let n = geom.cable_count;
        let (theta, _) = raw_config_from_cables(&q.as_slice()[offset..offset + n], geom);
        if theta > PI {
            let mut seg = q.rows_mut(offset, n);
            let mean = seg.mean();
            let scale = PI / theta;
            seg.apply(|v| *v = mean + (*v - mean) * scale);
        }
        offset += n;
    }
}

/// One damped Gauss-Newton step toward `target` with the clearance penalty.
pub fn constrained_ik_step(
    state: &RobotState,
    target: &Vector3<f64>,
    model: &RobotModel,
    spheres: &[Sphere],
    params: &ControllerParams,
) -> Result<IkStepResult, ControlError> {
    let q0 = drive_vector(state, model);
    let tip = tip_position(state, model);
    let error = target - tip;
    let safety = params.safety_enabled() && !spheres.is_empty();
    let clearance0 = body_clearance(state, model, spheres, params);
    let penalty0 = if safety {
        safety_penalty(state, model, spheres, params)
    } else {
        0.0
    };
    let target_term = params.kp_gain.apply(&DVector::from_column_slice(error.as_slice()))?;
    let objective0 = target_term.norm_squared() + penalty0;

    if is_settled(state, model, target, spheres, params) {
        return Ok(IkStepResult {
            delta_q: DVector::zeros(q0.len()),
            new_state: state.clone(),
            objective_value: objective0,
            initial_objective: objective0,
            min_clearance: clearance0,
            tip_error: error.norm(),
            converged: true,
        });
    }

    let jac = drive_tip_jacobian(state, model) * params.rho;
    let (grad_penalty, curvature) = if safety {
        penalty_terms(&q0, model, spheres, params)
    } else {
        (DVector::zeros(q0.len()), DMatrix::zeros(q0.len(), q0.len()))
    };
    let mut constraints = range_constraints(&q0, model, params);
    if safety {
        constraints.extend(clearance_constraints(&q0, model, spheres, params));
    }
    let mut direction = step_direction(&jac, &target_term, &grad_penalty, &curvature, &constraints, params);
    let scale = step_scale(&direction, params);
    if scale < 1.0 {
        direction *= scale;
    }
    // gradient of F at dq = 0
    let slope_dir = -2.0 * jac.tr_mul(&target_term) + &grad_penalty;

    let lambda2 = params.damping_lambda * params.damping_lambda;
    let guard = clearance0.min(params.clearance_margin(model));
    let z_index = q0.len() - 1;
    let mut alpha = 1.0;
    for _ in 0..=MAX_BACKTRACKS {
        let mut candidate = &q0 + &direction * alpha;
        candidate[z_index] = model.clamp_base_z(candidate[z_index]);
        alpha *= 0.5;
        cap_bending(&mut candidate, model);
        let Ok(new_state) = state_from_drive(&candidate, model) else {
            continue;
        };
        let applied = &candidate - &q0;
        if step_scale(&applied, params) < 1.0 - 1e-9 {
            continue;
        }
        let residual = &jac * &applied - &target_term;
        let penalty = if safety {
            safety_penalty(&new_state, model, spheres, params)
        } else {
            0.0
        };
        let objective = residual.norm_squared() + lambda2 * applied.norm_squared() + penalty;
        let predicted = slope_dir.dot(&applied).min(0.0);
        if !(objective <= objective0 && objective <= objective0 + ARMIJO_C * predicted) {
            continue;
        }
        // The objective above is the local model; the true tip error must
        // improve as well or long steps overshoot on the curved manifold.
        let true_error = params.kp_gain.apply(&DVector::from_column_slice(
            (target - tip_position(&new_state, model)).as_slice(),
        ))?;
        if true_error.norm_squared() + penalty > objective0 + ARMIJO_C * predicted {
            continue;
        }
        let min_clearance = body_clearance(&new_state, model, spheres, params);
        if safety && min_clearance < guard {
            continue;
        }
        let tip_error = (target - tip_position(&new_state, model)).norm();
        return Ok(IkStepResult {
            delta_q: applied,
            converged: tip_error < params.tip_tolerance,
            new_state,
            objective_value: objective,
            initial_objective: objective0,
            min_clearance,
            tip_error,
        });
    }
    Err(ControlError::StepStalled { objective: objective0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    pub state: RobotState,
    pub tip_error: f64,
    /// Accepted solver steps.
    pub iterations: usize,
}

/// Iterations over which tracking must cut the tip error by
/// [`PROGRESS_FRACTION`] to keep going.
pub const PROGRESS_WINDOW: usize = 20;
pub const PROGRESS_FRACTION: f64 = 0.05;

/// Iterates [`constrained_ik_step`] until the tip is within tolerance.
///
/// Gives up early once the error stops shrinking meaningfully (see
/// [`PROGRESS_WINDOW`]). On failure the error carries the state with the
/// smallest tip error seen.
pub fn track_waypoint(
    state: &RobotState,
    target: &Vector3<f64>,
    model: &RobotModel,
    spheres: &[Sphere],
    params: &ControllerParams,
) -> Result<TrackResult, ControlError> {
    let mut current = state.clone();
    let mut best = (current.clone(), (target - tip_position(&current, model)).norm());
    // best error after each iteration, to detect a crawl that will not finish
    let mut history = Vec::with_capacity(params.max_inner_iterations);
    for iteration in 0..params.max_inner_iterations {
        if iteration >= PROGRESS_WINDOW {
            let before = history[iteration - PROGRESS_WINDOW];
            if before - best.1 < PROGRESS_FRACTION * before {
                return Err(ControlError::NotConverged {
                    state: best.0,
                    tip_error: best.1,
                    iterations: iteration,
                });
            }
        }
        if is_settled(&current, model, target, spheres, params) {
            let tip_error = (target - tip_position(&current, model)).norm();
            return Ok(TrackResult {
                state: current,
                tip_error,
                iterations: iteration,
            });
        }
        match constrained_ik_step(&current, target, model, spheres, params) {
            Ok(step) => {
                if step.tip_error < best.1 {
                    best = (step.new_state.clone(), step.tip_error);
                }
                current = step.new_state;
            }
            Err(ControlError::StepStalled { .. }) => {
                return Err(ControlError::NotConverged {
                    state: best.0,
                    tip_error: best.1,
                    iterations: iteration,
                })
            }
            Err(e) => return Err(e),
        }
        history.push(best.1);
    }
    if is_settled(&current, model, target, spheres, params) {
        let tip_error = (target - tip_position(&current, model)).norm();
        return Ok(TrackResult {
            state: current,
            tip_error,
            iterations: params.max_inner_iterations,
        });
    }
    Err(ControlError::NotConverged {
        state: best.0,
        tip_error: best.1,
        iterations: params.max_inner_iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn sample_state() -> RobotState {
        RobotState {
            segments: vec![SegmentConfig::new(0.6, 0.4), SegmentConfig::new(0.9, -1.7)],
            base_z: 40.0,
        }
    }

    #[test]
    fn configuration_error_wraps_phi() {
        let a = DVector::from_vec(vec![1.0, PI - 0.1, 0.0]);
        let b = DVector::from_vec(vec![0.4, -PI + 0.1, 0.0]);
        let e = configuration_error(&a, &b).unwrap();
        assert_abs_diff_eq!(e[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(e[1], -0.2, epsilon = 1e-12);
        assert_eq!(configuration_error(&a, &a).unwrap(), DVector::zeros(3));
        assert!(configuration_error(&a, &DVector::zeros(5)).is_err());
    }

    #[test]
    fn dls_closed_form() {
        let params = ControllerParams {
            damping_lambda: 1.0,
            kp_gain: KpGain::Scalar(1.0),
            ..ControllerParams::default()
        };
        let d = dls_step(&DMatrix::identity(2, 2), &DVector::from_vec(vec![1.0, 0.0]), &params).unwrap();
        assert_abs_diff_eq!(d, DVector::from_vec(vec![0.5, 0.0]), epsilon = 1e-15);
    }

    #[test]
    fn dls_small_damping_inverts() {
        let params = ControllerParams {
            damping_lambda: 1e-9,
            kp_gain: KpGain::Scalar(1.0),
            ..ControllerParams::default()
        };
        let j = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 0.5, 3.0, 1.0, 0.0, -1.0, 4.0]);
        let e = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let d = dls_step(&j, &e, &params).unwrap();
        let exact = j.clone().try_inverse().unwrap() * &e;
        assert_abs_diff_eq!(d, exact, epsilon = 1e-9);
    }

    #[test]
    fn diagonal_gain_must_match() {
        let params = ControllerParams {
            kp_gain: KpGain::Diagonal(vec![1.0, 2.0]),
            ..ControllerParams::default()
        };
        assert!(dls_step(&DMatrix::identity(3, 3), &DVector::zeros(3), &params).is_err());
    }

    #[test]
    fn penalty_examples() {
        let model = RobotModel::two_segment();
        let params = ControllerParams::default();
        let far = [Sphere {
            center: Vector3::new(1e6, 0.0, 0.0),
            radius: 65.0,
        }];
        assert!(safety_penalty(&RobotState::straight(2, 0.0), &model, &far, &params) < 1e-5);

        // nearest body point exactly 150 mm from the center
        let points = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 400.0)];
        let sphere = [Sphere {
            center: Vector3::new(150.0, 0.0, 0.0),
            radius: 65.0,
        }];
        let p = penalty_of_points(
            &points,
            &sphere,
            &ControllerParams {
                safety_margin: 10.0,
                ..params.clone()
            },
        );
        assert_abs_diff_eq!(p, 100.0, epsilon = 1e-9);

        let on_center = [Sphere {
            center: Vector3::zeros(),
            radius: 10.0,
        }];
        assert_eq!(penalty_of_points(&points, &on_center, &params), f64::INFINITY);
    }

    #[test]
    fn penalty_grows_as_obstacle_approaches() {
        let params = ControllerParams::default();
        let points = [Vector3::zeros()];
        let mut last = 0.0;
        for d in (10..200).rev().map(|d| d as f64) {
            let p = penalty_of_points(
                &points,
                &[Sphere {
                    center: Vector3::new(d, 0.0, 0.0),
                    radius: 5.0,
                }],
                &params,
            );
            assert!(p > last);
            last = p;
        }
    }

    #[test]
    fn settled_state_does_not_move() {
        let model = RobotModel::two_segment();
        let state = sample_state();
        let tip = tip_position(&state, &model);
        let step = constrained_ik_step(&state, &tip, &model, &[], &ControllerParams::default()).unwrap();
        assert!(step.converged);
        assert_eq!(step.delta_q, DVector::zeros(7));
        let tracked = track_waypoint(&state, &tip, &model, &[], &ControllerParams::default()).unwrap();
        assert_eq!(tracked.iterations, 0);
    }

    #[test]
    fn unpenalized_step_is_the_dls_step() {
        let model = RobotModel::two_segment();
        let state = sample_state();
        let params = ControllerParams {
            penalty_mu: 0.0,
            ..ControllerParams::default()
        };
        let tip = tip_position(&state, &model);
        let target = tip + Vector3::new(0.6, -0.4, 0.3);
        let step = constrained_ik_step(&state, &target, &model, &[], &params).unwrap();
        let expected = dls_step(
            &(drive_tip_jacobian(&state, &model) * params.rho),
            &DVector::from_column_slice((target - tip).as_slice()),
            &params,
        )
        .unwrap();
        assert_abs_diff_eq!(step.delta_q, expected, epsilon = 1e-12);
    }

    #[test]
    fn step_is_capped_per_component() {
        let model = RobotModel::two_segment();
        let state = sample_state();
        let params = ControllerParams::default();
        let target = tip_position(&state, &model) + Vector3::new(80.0, 0.0, -50.0);
        let step = constrained_ik_step(&state, &target, &model, &[], &params).unwrap();
        let z = step.delta_q.len() - 1;
        assert!(step.delta_q.rows(0, z).amax() <= params.max_step_norm + 1e-9);
        assert!(step.delta_q[z].abs() <= params.max_base_step + 1e-9);
        assert!(step.objective_value <= step.initial_objective);
    }

    #[test]
    fn unreachable_target_reports_not_converged() {
        let model = RobotModel::two_segment();
        let params = ControllerParams {
            max_inner_iterations: 30,
            ..ControllerParams::default()
        };
        let target = Vector3::new(0.0, 0.0, 2000.0);
        match track_waypoint(&sample_state(), &target, &model, &[], &params) {
            Err(ControlError::NotConverged { tip_error, .. }) => assert!(tip_error > 1000.0),
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn configuration_space_increment_moves_toward_desired() {
        let model = RobotModel::two_segment();
        let state = sample_state();
        let mut desired = state.clone();
        desired.segments[0].theta += 0.01;
        // small enough to be unbiased, large enough to keep the two
        // mean-cable directions well conditioned
        let params = ControllerParams {
            damping_lambda: 1e-4,
            ..ControllerParams::default()
        };
        let dq = configuration_space_increment(&state, &desired, &model, &params).unwrap();
        let jac = crate::pcc::robot_jacobian(&state, &model);
        // first segment cables move along the theta column
        let expected = jac.column(0) * 0.01;
        for i in 0..3 {
            assert_abs_diff_eq!(dq[i], expected[i], epsilon = 1e-6);
        }
    }
}
