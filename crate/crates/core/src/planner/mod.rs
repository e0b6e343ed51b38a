//! Tip-space RRT and RRT* with safety-constrained steering.
//!
//! Every vertex of the tree carries a robot configuration reaching its tip
//! position. A vertex is only added when the straight tip edge from its
//! nearest neighbour is clear at both ends of the current time window and
//! the constrained IK, started from that neighbour's configuration, reaches
//! the new position with the whole body clear.

mod executor;
mod spline;

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{track_waypoint, ControllerParams, InvalidParameter};
use crate::pcc::{tip_position, RobotModel, RobotState};
use crate::world::{edge_is_safe, snapshot, state_is_safe, DynamicSphere, SafetyCheck, Sphere, Workspace};

pub use executor::{execute_dynamic, ExecutionError, ExecutionLog, FailureReason, StepRecord};
pub use spline::{path_length, smooth_path};

/// Consecutive rejected draws after which sampling gives up.
pub const MAX_SAMPLE_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rrt,
    RrtStar,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Rrt => "rrt",
            Method::RrtStar => "rrt_star",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rrt" => Ok(Method::Rrt),
            "rrt_star" | "rrt*" => Ok(Method::RrtStar),
            other => Err(format!("unknown method `{other}` (expected rrt or rrt_star)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerParams {
    pub max_iterations: usize,
    /// Longest tip edge (mm).
    pub step_size: f64,
    pub goal_bias: f64,
    /// Distance at which a vertex counts as the goal (mm).
    pub goal_tolerance: f64,
    pub rewire_radius: f64,
    /// Set by the scenario, not read from its planner section.
    #[serde(skip)]
    pub rng_seed: u64,
    pub method: Method,
    /// Spacing of tip-edge collision samples (mm).
    pub edge_resolution: f64,
    /// Spacing of the smoothed path handed to the tracker (mm).
    pub smoothing_spacing: f64,
    /// Step budget of the dynamic executor.
    pub max_execution_steps: usize,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            step_size: 40.0,
            goal_bias: 0.05,
            goal_tolerance: 10.0,
            rewire_radius: 80.0,
            rng_seed: 0,
            method: Method::RrtStar,
            edge_resolution: crate::world::DEFAULT_EDGE_RESOLUTION,
            smoothing_spacing: 10.0,
            max_execution_steps: 300,
        }
    }
}

impl PlannerParams {
    pub fn validate(&self) -> Result<(), InvalidParameter> {
        if self.max_iterations == 0 {
            return Err(InvalidParameter::new("max_iterations", "must be at least 1"));
        }
        if !(self.step_size > 0.0) {
            return Err(InvalidParameter::new("step_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.goal_bias) {
            return Err(InvalidParameter::new("goal_bias", "must lie in [0, 1]"));
        }
        if !(self.goal_tolerance >= 0.0) {
            return Err(InvalidParameter::new("goal_tolerance", "must be non-negative"));
        }
        if !(self.rewire_radius >= 0.0) {
            return Err(InvalidParameter::new("rewire_radius", "must be non-negative"));
        }
        if !(self.edge_resolution > 0.0) {
            return Err(InvalidParameter::new("edge_resolution", "must be positive"));
        }
        if !(self.smoothing_spacing > 0.0) {
            return Err(InvalidParameter::new("smoothing_spacing", "must be positive"));
        }
        if self.max_execution_steps == 0 {
            return Err(InvalidParameter::new("max_execution_steps", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("start configuration is not collision-free")]
    StartUnsafe,
    #[error("no free sample after {0} draws")]
    SamplingExhausted(usize),
    #[error("goal not connected after {iterations} iterations")]
    PlanFailed { iterations: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanNode {
    pub position: Vector3<f64>,
    pub parent: Option<usize>,
    /// Path length from the root (mm).
    pub cost: f64,
    pub config: RobotState,
}

/// Tree of tip positions rooted at the start.
#[derive(Debug, Clone)]
pub struct PlanTree {
    nodes: Vec<PlanNode>,
    children: Vec<Vec<usize>>,
}

impl PlanTree {
    pub fn new(root: Vector3<f64>, config: RobotState) -> Self {
        Self {
            nodes: vec![PlanNode {
                position: root,
                parent: None,
                cost: 0.0,
                config,
            }],
            children: vec![Vec::new()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: usize) -> &PlanNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[PlanNode] {
        &self.nodes
    }

    /// Exact Euclidean nearest vertex; ties go to the lowest id.
    pub fn nearest(&self, p: &Vector3<f64>) -> usize {
        nearest_node(self.nodes.iter().map(|n| &n.position), p)
    }

    /// Ids of vertices within `radius` of `p`, ascending.
    pub fn near(&self, p: &Vector3<f64>, radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| (n.position - p).norm_squared() <= r2)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn add(&mut self, parent: usize, position: Vector3<f64>, config: RobotState) -> usize {
        let cost = self.nodes[parent].cost + (position - self.nodes[parent].position).norm();
        let id = self.nodes.len();
        self.nodes.push(PlanNode {
            position,
            parent: Some(parent),
            cost,
            config,
        });
        self.children.push(Vec::new());
        self.children[parent].push(id);
        id
    }

    /// Moves `id` under `new_parent` and refreshes the costs of its subtree.
    pub fn reparent(&mut self, id: usize, new_parent: usize) {
        if let Some(old) = self.nodes[id].parent {
            self.children[old].retain(|&c| c != id);
        }
        self.nodes[id].parent = Some(new_parent);
        self.children[new_parent].push(id);
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            let parent = self.nodes[n].parent.expect("non-root has a parent");
            self.nodes[n].cost =
                self.nodes[parent].cost + (self.nodes[n].position - self.nodes[parent].position).norm();
            stack.extend(self.children[n].iter().copied());
        }
    }

    pub fn set_config(&mut self, id: usize, config: RobotState) {
        self.nodes[id].config = config;
    }

    /// Vertex ids from the root to `id`.
    pub fn branch(&self, id: usize) -> Vec<usize> {
        let mut ids = vec![id];
        let mut current = id;
        while let Some(p) = self.nodes[current].parent {
            ids.push(p);
            current = p;
        }
        ids.reverse();
        ids
    }

    /// True iff every vertex reaches the root through parent links.
    pub fn is_acyclic(&self) -> bool {
        (0..self.nodes.len()).all(|start| {
            let mut current = start;
            for _ in 0..self.nodes.len() {
                match self.nodes[current].parent {
                    None => return current == 0,
                    Some(p) => current = p,
                }
            }
            false
        })
    }

    /// Largest deviation of any cost from parent cost plus edge length.
    pub fn max_cost_defect(&self) -> f64 {
        self.nodes
            .iter()
            .map(|n| match n.parent {
                None => n.cost.abs(),
                Some(p) => {
                    let expected = self.nodes[p].cost + (n.position - self.nodes[p].position).norm();
                    (n.cost - expected).abs()
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Index of the point nearest to `p`; ties go to the lowest index.
pub fn nearest_node<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>, p: &Vector3<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, q) in points.into_iter().enumerate() {
        let d = (q - p).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Point at most `step_size` from `from` along the ray toward `to`.
pub fn steer(from: &Vector3<f64>, to: &Vector3<f64>, step_size: f64) -> Vector3<f64> {
    let delta = to - from;
    let dist = delta.norm();
    if dist <= step_size {
        *to
    } else {
        from + delta * (step_size / dist)
    }
}

/// Goal with probability `goal_bias`, otherwise a uniform workspace point
/// at least `margin` from every sphere surface.
pub fn sample_free<R: Rng>(
    workspace: &Workspace,
    goal: &Vector3<f64>,
    goal_bias: f64,
    spheres: &[Sphere],
    margin: f64,
    rng: &mut R,
) -> Result<Vector3<f64>, PlanError> {
    if rng.gen::<f64>() < goal_bias {
        return Ok(*goal);
    }
    for _ in 0..MAX_SAMPLE_REJECTIONS {
        let p = Vector3::from_fn(|i, _| rng.gen_range(workspace.min[i]..=workspace.max[i]));
        if spheres.iter().all(|s| s.surface_distance(&p) >= margin) {
            return Ok(p);
        }
    }
    Err(PlanError::SamplingExhausted(MAX_SAMPLE_REJECTIONS))
}

/// Everything a single planning query needs.
#[derive(Debug, Clone, Copy)]
pub struct PlanningProblem<'a> {
    pub model: &'a RobotModel,
    pub workspace: &'a Workspace,
    pub obstacles: &'a [DynamicSphere],
    pub start: &'a RobotState,
    pub goal: Vector3<f64>,
    /// Obstacles are checked at both ends of `[t_now, t_next]`.
    pub t_now: f64,
    pub t_next: f64,
}

impl PlanningProblem<'_> {
    pub fn window(&self) -> (f64, f64) {
        (self.t_now, self.t_next)
    }

    pub fn safety_check<'b>(&'b self, controller: &ControllerParams) -> SafetyCheck<'b> {
        SafetyCheck {
            model: self.model,
            workspace: self.workspace,
            points_per_segment: controller.points_per_segment(self.model),
            margin: controller.clearance_margin(self.model),
        }
    }

    /// Body check at both window ends. Obstacles are ignored when the
    /// controller runs without the safety penalty; the workspace never is.
    pub fn state_ok(&self, state: &RobotState, controller: &ControllerParams) -> bool {
        let check = self.safety_check(controller);
        if controller.safety_enabled() {
            state_is_safe(state, self.obstacles, self.t_now, &check)
                && state_is_safe(state, self.obstacles, self.t_next, &check)
        } else {
            state_is_safe(state, &[], self.t_now, &check)
        }
    }

    pub fn edge_ok(
        &self,
        from: &Vector3<f64>,
        to: &Vector3<f64>,
        params: &PlannerParams,
        controller: &ControllerParams,
    ) -> bool {
        edge_is_safe(
            from,
            to,
            self.obstacles,
            self.window(),
            params.edge_resolution,
            controller.clearance_margin(self.model),
        )
    }

    /// Obstacle snapshots the IK avoids; empty without the safety penalty.
    pub fn ik_spheres(&self, controller: &ControllerParams) -> Vec<Sphere> {
        if controller.safety_enabled() {
            snapshot(self.obstacles, &[self.t_now, self.t_next])
        } else {
            Vec::new()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    /// Tip waypoints from the start tip to the goal vertex.
    pub path: Vec<Vector3<f64>>,
    /// Configuration reaching each waypoint.
    pub configurations: Vec<RobotState>,
    pub iterations_used: usize,
    pub wall_time: f64,
    pub success: bool,
    pub tree_size: usize,
}

impl PlanResult {
    pub fn length(&self) -> f64 {
        path_length(&self.path)
    }
}

/// Grows a tree from the start configuration until a vertex lies within
/// the goal tolerance.
pub fn plan(
    problem: &PlanningProblem,
    params: &PlannerParams,
    controller: &ControllerParams,
) -> Result<PlanResult, PlanError> {
    let started = Instant::now();
    if !problem.state_ok(problem.start, controller) {
        return Err(PlanError::StartUnsafe);
    }
    let model = problem.model;
    let start_tip = tip_position(problem.start, model);
    let mut tree = PlanTree::new(start_tip, problem.start.clone());
    let finish = |tree: &PlanTree, goal_id: usize, iterations: usize| {
        let ids = tree.branch(goal_id);
        PlanResult {
            path: ids.iter().map(|&i| tree.node(i).position).collect(),
            configurations: ids.iter().map(|&i| tree.node(i).config.clone()).collect(),
            iterations_used: iterations,
            wall_time: started.elapsed().as_secs_f64(),
            success: true,
            tree_size: tree.len(),
        }
    };
    if (start_tip - problem.goal).norm() <= params.goal_tolerance {
        return Ok(finish(&tree, 0, 0));
    }

    let margin = controller.clearance_margin(model);
    let sample_spheres = snapshot(problem.obstacles, &[problem.t_now, problem.t_next]);
    let ik_spheres = problem.ik_spheres(controller);
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);

    for iteration in 1..=params.max_iterations {
        let sample = sample_free(
            problem.workspace,
            &problem.goal,
            params.goal_bias,
            &sample_spheres,
            margin,
            &mut rng,
        )?;
        let nearest = tree.nearest(&sample);
        let from = tree.node(nearest).position;
        let new_pos = steer(&from, &sample, params.step_size);
        if (new_pos - from).norm() < 1e-9 || !problem.edge_ok(&from, &new_pos, params, controller) {
            continue;
        }
        // Configuration reached by the constrained IK from vertex `from_id`,
        // provided the whole body is clear there.
        let reach = |tree: &PlanTree, from_id: usize, target: &Vector3<f64>| {
            track_waypoint(&tree.node(from_id).config, target, model, &ik_spheres, controller)
                .ok()
                .map(|t| t.state)
                .filter(|s| problem.state_ok(s, controller))
        };
        let Some(config) = reach(&tree, nearest, &new_pos) else {
            continue;
        };

        let id = match params.method {
            Method::Rrt => tree.add(nearest, new_pos, config),
            Method::RrtStar => {
                let neighbours = tree.near(&new_pos, params.rewire_radius);
                // Cheapest parent first; a vertex's configuration is always
                // the one tracked from its own parent.
                let mut candidates: Vec<(f64, usize)> = neighbours
                    .iter()
                    .filter(|&&n| n != nearest)
                    .map(|&n| (tree.node(n).cost + (new_pos - tree.node(n).position).norm(), n))
                    .collect();
                candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let mut parent = nearest;
                let mut best_cost = tree.node(nearest).cost + (new_pos - from).norm();
                let mut config = config;
                for &(cost, n) in &candidates {
                    if cost >= best_cost {
                        break;
                    }
                    if !problem.edge_ok(&tree.node(n).position, &new_pos, params, controller) {
                        continue;
                    }
                    if let Some(c) = reach(&tree, n, &new_pos) {
                        parent = n;
                        best_cost = cost;
                        config = c;
                        break;
                    }
                }
                let id = tree.add(parent, new_pos, config);
                for &n in &neighbours {
                    if n == parent {
                        continue;
                    }
                    let node = tree.node(n);
                    let via_new = best_cost + (node.position - new_pos).norm();
                    if via_new + 1e-12 < node.cost && problem.edge_ok(&new_pos, &node.position, params, controller) {
                        let target = node.position;
                        if let Some(c) = reach(&tree, id, &target) {
                            tree.reparent(n, id);
                            tree.set_config(n, c);
                        }
                    }
                }
                id
            }
        };

        if (new_pos - problem.goal).norm() <= params.goal_tolerance {
            return Ok(finish(&tree, id, iteration));
        }
    }
    Err(PlanError::PlanFailed {
        iterations: params.max_iterations,
    })
}

/// Finds a collision-free configuration whose tip reaches `tip`.
///
/// Tries a fixed, deterministic set of initial guesses ordered by how close
/// their tips already are, and returns the first one the constrained IK
/// carries to the target with the body clear.
pub fn initial_state(
    problem: &PlanningProblem,
    tip: &Vector3<f64>,
    controller: &ControllerParams,
) -> Option<RobotState> {
    let model = problem.model;
    let n = model.segment_count();
    let ik_spheres = problem.ik_spheres(controller);
    let (z_lo, z_hi) = model.base_z_limits;

    let mut guesses = vec![RobotState::straight(n, z_lo)];
    let free = ControllerParams {
        penalty_mu: 0.0,
        ..controller.clone()
    };
    if let Ok(t) = track_waypoint(&guesses[0], tip, model, &[], &free) {
        guesses.push(t.state);
    }
    let thetas = [0.3, 0.8, 1.4];
    let phis: Vec<f64> = (0..8)
        .map(|i| -std::f64::consts::PI + (i as f64 + 1.0) * std::f64::consts::FRAC_PI_4)
        .collect();
    let mut grid = vec![RobotState::straight(n, z_lo)];
    for _ in 0..n {
        let mut next = Vec::new();
        for partial in &grid {
            for &theta in &thetas {
                for &phi in &phis {
                    let mut s = partial.clone();
                    let k = s.segments.iter().position(|c| c.theta == 0.0).unwrap_or(0);
                    s.segments[k] = crate::pcc::SegmentConfig::new(theta, phi);
                    next.push(s);
                }
            }
        }
        grid = next;
    }
    let mut extended = Vec::with_capacity(grid.len() * 3);
    for s in grid {
        for z in [z_lo, 0.5 * (z_lo + z_hi), z_hi] {
            extended.push(RobotState { base_z: z, ..s.clone() });
        }
    }
    extended.sort_by(|a, b| {
        let da = (tip_position(a, model) - tip).norm();
        let db = (tip_position(b, model) - tip).norm();
        da.total_cmp(&db)
    });
    guesses.extend(extended);

    guesses.into_iter().find_map(|guess| {
        if !problem.state_ok(&guess, controller) {
            return None;
        }
        let tracked = track_waypoint(&guess, tip, model, &ik_spheres, controller).ok()?;
        problem.state_ok(&tracked.state, controller).then_some(tracked.state)
    })
}
