//! Safety-constrained motion planning for multi-segment cable-driven
//! continuum robots among moving spherical obstacles.
//!
//! - [`pcc`]: constant-curvature kinematics, cable maps and Jacobians.
//! - [`control`]: damped-least-squares tip control with a clearance penalty.
//! - [`world`]: time-varying obstacles and collision queries.
//! - [`planner`]: RRT/RRT* over tip positions, smoothing and dynamic execution.
//! - [`scenario`]: experiment descriptions and their strict JSON format.
//! - [`bench`]: randomized RRT vs RRT* trials and their summary.

pub mod bench;
pub mod control;
pub mod pcc;
pub mod planner;
pub mod scenario;
pub mod world;
