//! Sparse nonlinear least squares over rig poses and map points.
//!
//! Two residual kinds are supported: three-component reprojection errors
//! (u, v, u_r) tying a rig pose, a camera of the rig, and a map point, and
//! six-component relative-pose errors between rig poses. Reprojection
//! Jacobians are analytic and certified against central finite differences;
//! see [`finite_diff_check`].
//!
//! The solver is Levenberg-Marquardt with Schur elimination of the point
//! block. Rig poses are perturbed on the left: T <- exp(dxi) * T.

mod ba;
mod pose_graph;
mod reprojection;

pub use ba::{pose_only_ba, PoseOnlyMatch, PoseOnlyOutcome};
pub use pose_graph::pose_graph_solve;
pub use reprojection::{
    finite_diff_check, jacobian_point, jacobian_pose, residual, EdgeFdReport, FdReport,
};

use crate::camera::MultiCamRig;
use crate::geometry::SE3Pose;
use nalgebra::{Matrix3, Matrix6, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Chi-square 95% quantile with 3 degrees of freedom; the inlier gate for
/// 3-component reprojection residuals and the square of the Huber delta.
pub const CHI2_3DOF_95: f64 = 7.815;

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("edge references unknown pose vertex {0}")]
    UnknownPose(u64),
    #[error("edge references unknown point vertex {0}")]
    UnknownPoint(u64),
    #[error("gauge not fixed: at least one pose vertex must be held constant")]
    GaugeNotFixed,
    #[error("no progress after {rejections} consecutive rejected steps (cost {cost})")]
    NoProgress { rejections: usize, cost: f64 },
    #[error("pose graph is disconnected; unreachable vertices: {0:?}")]
    Disconnected(Vec<u64>),
    #[error("need at least {needed} matches, got {got}")]
    TooFewMatches { needed: usize, got: usize },
    #[error("pose estimation kept only {inliers} inliers (minimum {minimum})")]
    TooFewInliers { inliers: usize, minimum: usize },
    #[error("relative-pose edge endpoints must differ (vertex {0})")]
    SelfEdge(u64),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// One (u, v, u_r) observation tying an MKF pose, a camera of the rig, and a
/// map point.
#[derive(Clone, Debug)]
pub struct ReprojectionEdge {
    pub mkf_id: u64,
    pub camera_index: usize,
    pub point_id: u64,
    pub observed: Vector3<f64>,
    pub information: Matrix3<f64>,
    /// Huber threshold in residual units; `None` disables the robust kernel.
    pub robust_delta: Option<f64>,
}

impl ReprojectionEdge {
    pub fn new(mkf_id: u64, camera_index: usize, point_id: u64, observed: Vector3<f64>) -> Self {
        Self {
            mkf_id,
            camera_index,
            point_id,
            observed,
            information: Matrix3::identity(),
            robust_delta: Some(CHI2_3DOF_95.sqrt()),
        }
    }
}

/// Relative-pose constraint: measured ~= T_from * T_to^-1.
#[derive(Clone, Debug)]
pub struct RelativePoseEdge {
    pub from_id: u64,
    pub to_id: u64,
    pub measured: SE3Pose,
    pub information: Matrix6<f64>,
}

impl RelativePoseEdge {
    pub fn new(from_id: u64, to_id: u64, measured: SE3Pose) -> Self {
        Self {
            from_id,
            to_id,
            measured,
            information: Matrix6::identity(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PoseVertex {
    pub pose: SE3Pose,
    pub fixed: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct PointVertex {
    pub position: Vector3<f64>,
    pub fixed: bool,
}

/// A bundle-adjustment problem: pose and point vertices plus reprojection
/// edges, tied to a rig for the camera model.
#[derive(Clone, Debug)]
pub struct Problem {
    pub rig: MultiCamRig,
    pub poses: BTreeMap<u64, PoseVertex>,
    pub points: BTreeMap<u64, PointVertex>,
    pub edges: Vec<ReprojectionEdge>,
}

impl Problem {
    pub fn new(rig: MultiCamRig) -> Self {
        Self {
            rig,
            poses: BTreeMap::new(),
            points: BTreeMap::new(),
            edges: Vec::new(),
        }
    }

    pub fn add_pose(&mut self, id: u64, pose: SE3Pose, fixed: bool) {
        self.poses.insert(id, PoseVertex { pose, fixed });
    }

    pub fn add_point(&mut self, id: u64, position: Vector3<f64>, fixed: bool) {
        self.points.insert(id, PointVertex { position, fixed });
    }

    pub fn add_edge(&mut self, edge: ReprojectionEdge) -> Result<(), OptimizeError> {
        if !self.poses.contains_key(&edge.mkf_id) {
            return Err(OptimizeError::UnknownPose(edge.mkf_id));
        }
        if !self.points.contains_key(&edge.point_id) {
            return Err(OptimizeError::UnknownPoint(edge.point_id));
        }
        self.edges.push(edge);
        Ok(())
    }

    pub fn solve(&mut self, config: &SolverConfig) -> Result<SolveReport, OptimizeError> {
        ba::solve(self, config)
    }
}

/// Levenberg-Marquardt settings shared by all solvers.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Initial damping as a fraction of the mean Hessian diagonal.
    pub initial_lambda_factor: f64,
    /// Terminate when an accepted step decreases cost by less than this
    /// relative amount.
    pub rel_decrease_tol: f64,
    /// Terminate when the gradient infinity norm falls below this.
    pub gradient_tol: f64,
    /// Give up after this many consecutive rejected steps.
    pub max_rejections: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            initial_lambda_factor: 1e-4,
            rel_decrease_tol: 1e-6,
            gradient_tol: 1e-8,
            max_rejections: 20,
        }
    }
}

impl SolverConfig {
    /// Budget used for local bundle adjustment.
    pub fn local() -> Self {
        Self {
            max_iterations: 10,
            ..Self::default()
        }
    }

    /// Budget used for global bundle adjustment and pose graphs.
    pub fn global() -> Self {
        Self::default()
    }

    pub fn with_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }
}

/// Outcome of a solve: cost is the robustified objective.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Edges skipped in the last evaluation because the point projected at
    /// non-positive depth.
    pub invalid_edges: usize,
}
