//! Levenberg-Marquardt bundle adjustment with Schur elimination of the
//! point block, plus the pose-only variant used during tracking.

use super::reprojection::{jacobian_point, jacobian_pose, residual};
use super::{
    OptimizeError, Problem, ReprojectionEdge, SolveReport, SolverConfig, CHI2_3DOF_95,
};
use crate::camera::MultiCamRig;
use crate::geometry::{compose, exp, SE3Pose, Twist};
use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x6, Matrix6, Matrix6x3, Vector3, Vector6};
use std::collections::BTreeMap;

/// Huber cost of a squared error, and the corresponding IRLS weight.
fn huber(chi2: f64, delta: Option<f64>) -> (f64, f64) {
    match delta {
        Some(d) if chi2 > d * d => {
            let r = chi2.sqrt();
            (2.0 * d * r - d * d, d / r)
        }
        _ => (chi2, 1.0),
    }
}

struct EdgeTerms {
    pose_idx: Option<usize>,
    point_idx: Option<usize>,
    j1: Matrix3x6<f64>,
    j2: Matrix3<f64>,
    weighted_info: Matrix3<f64>,
    error: Vector3<f64>,
}

struct State {
    poses: BTreeMap<u64, SE3Pose>,
    points: BTreeMap<u64, Vector3<f64>>,
}

impl State {
    fn cost(&self, problem: &Problem) -> (f64, usize) {
        let mut cost = 0.0;
        let mut invalid = 0;
        for edge in &problem.edges {
            match residual(
                &problem.rig,
                edge,
                &self.poses[&edge.mkf_id],
                &self.points[&edge.point_id],
            ) {
                Some(e) => {
                    let chi2 = (e.transpose() * edge.information * e)[(0, 0)];
                    cost += 0.5 * huber(chi2, edge.robust_delta).0;
                }
                None => invalid += 1,
            }
        }
        (cost, invalid)
    }
}

/// One damped Gauss-Newton step via the Schur complement. Returns `None`
/// when the reduced system is not positive definite.
#[allow(clippy::too_many_arguments)]
fn schur_step(
    terms: &[EdgeTerms],
    n_poses: usize,
    n_points: usize,
    lambda: f64,
) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
    let mut h_pp = DMatrix::<f64>::zeros(6 * n_poses, 6 * n_poses);
    let mut g_p = DVector::<f64>::zeros(6 * n_poses);
    let mut h_ll: Vec<Matrix3<f64>> = vec![Matrix3::zeros(); n_points];
    let mut g_l: Vec<Vector3<f64>> = vec![Vector3::zeros(); n_points];
    // Off-diagonal pose-point blocks, grouped by point for the reduction.
    let mut h_pl: Vec<Vec<(usize, Matrix6x3<f64>)>> = vec![Vec::new(); n_points];

    for t in terms {
        let w = t.weighted_info;
        if let Some(i) = t.pose_idx {
            let jtw = t.j1.transpose() * w;
            let block = jtw * t.j1;
            let mut view = h_pp.fixed_view_mut::<6, 6>(6 * i, 6 * i);
            view += block;
            let gi = jtw * t.error;
            for k in 0..6 {
                g_p[6 * i + k] += gi[k];
            }
        }
        if let Some(j) = t.point_idx {
            let jtw = t.j2.transpose() * w;
            h_ll[j] += jtw * t.j2;
            g_l[j] += jtw * t.error;
        }
        if let (Some(i), Some(j)) = (t.pose_idx, t.point_idx) {
            h_pl[j].push((i, t.j1.transpose() * w * t.j2));
        }
    }

    // Damping on every diagonal entry.
    for i in 0..6 * n_poses {
        h_pp[(i, i)] += lambda;
    }
    let h_ll_inv: Option<Vec<Matrix3<f64>>> = h_ll
        .iter()
        .map(|h| (h + Matrix3::identity() * lambda).try_inverse())
        .collect();
    let h_ll_inv = h_ll_inv?;

    // Reduced system S x = rhs.
    let mut s = h_pp;
    let mut rhs = -g_p;
    for j in 0..n_points {
        let inv = h_ll_inv[j];
        let coupled = &h_pl[j];
        for (i1, b1) in coupled {
            let b1_inv = b1 * inv;
            let r = b1_inv * g_l[j];
            for k in 0..6 {
                rhs[6 * i1 + k] += r[k];
            }
            for (i2, b2) in coupled {
                let block: Matrix6<f64> = b1_inv * b2.transpose();
                let mut view = s.fixed_view_mut::<6, 6>(6 * i1, 6 * i2);
                view -= block;
            }
        }
    }

    let chol = s.cholesky()?;
    let x = chol.solve(&rhs);

    let mut delta_points = Vec::with_capacity(n_points);
    for j in 0..n_points {
        let mut acc = -g_l[j];
        for (i, b) in &h_pl[j] {
            let xi = Vector6::new(
                x[6 * i],
                x[6 * i + 1],
                x[6 * i + 2],
                x[6 * i + 3],
                x[6 * i + 4],
                x[6 * i + 5],
            );
            acc -= b.transpose() * xi;
        }
        delta_points.push(h_ll_inv[j] * acc);
    }
    Some((x, delta_points))
}

fn gather_terms(
    problem: &Problem,
    state: &State,
    pose_index: &BTreeMap<u64, usize>,
    point_index: &BTreeMap<u64, usize>,
) -> Vec<EdgeTerms> {
    problem
        .edges
        .iter()
        .filter_map(|edge| {
            let pose = &state.poses[&edge.mkf_id];
            let point = &state.points[&edge.point_id];
            let e = residual(&problem.rig, edge, pose, point)?;
            let chi2 = (e.transpose() * edge.information * e)[(0, 0)];
            let (_, w) = huber(chi2, edge.robust_delta);
            Some(EdgeTerms {
                pose_idx: pose_index.get(&edge.mkf_id).copied(),
                point_idx: point_index.get(&edge.point_id).copied(),
                j1: jacobian_pose(&problem.rig, edge, pose, point)?,
                j2: jacobian_point(&problem.rig, edge, pose, point)?,
                weighted_info: edge.information * w,
                error: e,
            })
        })
        .collect()
}

fn gradient_inf_norm(terms: &[EdgeTerms], n_poses: usize, n_points: usize) -> f64 {
    let mut g_p = DVector::<f64>::zeros(6 * n_poses);
    let mut g_l: Vec<Vector3<f64>> = vec![Vector3::zeros(); n_points];
    for t in terms {
        if let Some(i) = t.pose_idx {
            let gi = t.j1.transpose() * t.weighted_info * t.error;
            for k in 0..6 {
                g_p[6 * i + k] += gi[k];
            }
        }
        if let Some(j) = t.point_idx {
            g_l[j] += t.j2.transpose() * t.weighted_info * t.error;
        }
    }
    let mut norm = g_p.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    for g in &g_l {
        norm = norm.max(g.amax());
    }
    norm
}

fn mean_hessian_diagonal(terms: &[EdgeTerms]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in terms {
        if t.pose_idx.is_some() {
            let block = t.j1.transpose() * t.weighted_info * t.j1;
            sum += block.diagonal().sum();
            count += 6;
        }
        if t.point_idx.is_some() {
            let block = t.j2.transpose() * t.weighted_info * t.j2;
            sum += block.diagonal().sum();
            count += 3;
        }
    }
    if count == 0 {
        1.0
    } else {
        sum / count as f64
    }
}

pub(super) fn solve(problem: &mut Problem, config: &SolverConfig) -> Result<SolveReport, OptimizeError> {
    if !problem.poses.values().any(|p| p.fixed) {
        return Err(OptimizeError::GaugeNotFixed);
    }
    for edge in &problem.edges {
        if !problem.poses.contains_key(&edge.mkf_id) {
            return Err(OptimizeError::UnknownPose(edge.mkf_id));
        }
        if !problem.points.contains_key(&edge.point_id) {
            return Err(OptimizeError::UnknownPoint(edge.point_id));
        }
    }

    let pose_index: BTreeMap<u64, usize> = problem
        .poses
        .iter()
        .filter(|(_, v)| !v.fixed)
        .enumerate()
        .map(|(i, (id, _))| (*id, i))
        .collect();
    let point_index: BTreeMap<u64, usize> = problem
        .points
        .iter()
        .filter(|(_, v)| !v.fixed)
        .enumerate()
        .map(|(i, (id, _))| (*id, i))
        .collect();
    let n_poses = pose_index.len();
    let n_points = point_index.len();

    let mut state = State {
        poses: problem.poses.iter().map(|(k, v)| (*k, v.pose)).collect(),
        points: problem
            .points
            .iter()
            .map(|(k, v)| (*k, v.position))
            .collect(),
    };

    let (initial_cost, mut invalid) = state.cost(problem);
    let mut current_cost = initial_cost;
    let mut iterations = 0usize;
    let mut lambda = 0.0;
    let mut rejections = 0usize;

    if n_poses + n_points > 0 {
        loop {
            let terms = gather_terms(problem, &state, &pose_index, &point_index);
            if gradient_inf_norm(&terms, n_poses, n_points) < config.gradient_tol {
                break;
            }
            if iterations >= config.max_iterations {
                break;
            }
            if lambda == 0.0 {
                lambda = config.initial_lambda_factor * mean_hessian_diagonal(&terms);
            }

            let mut accepted = false;
            while rejections < config.max_rejections {
                let Some((dx, dl)) = schur_step(&terms, n_poses, n_points, lambda) else {
                    lambda = (lambda * 10.0).max(1e-12);
                    rejections += 1;
                    continue;
                };
                let mut candidate = State {
                    poses: state.poses.clone(),
                    points: state.points.clone(),
                };
                for (id, idx) in &pose_index {
                    let xi = Twist::from_slice(&[
                        dx[6 * idx],
                        dx[6 * idx + 1],
                        dx[6 * idx + 2],
                        dx[6 * idx + 3],
                        dx[6 * idx + 4],
                        dx[6 * idx + 5],
                    ]);
                    let pose = candidate.poses.get_mut(id).unwrap();
                    *pose = compose(&exp(&xi), pose);
                }
                for (id, idx) in &point_index {
                    *candidate.points.get_mut(id).unwrap() += dl[*idx];
                }
                let (new_cost, new_invalid) = candidate.cost(problem);
                if new_cost < current_cost {
                    let decrease = (current_cost - new_cost) / current_cost.max(1e-300);
                    state = candidate;
                    current_cost = new_cost;
                    invalid = new_invalid;
                    lambda = (lambda * 0.5).max(1e-15);
                    rejections = 0;
                    iterations += 1;
                    accepted = true;
                    if decrease < config.rel_decrease_tol {
                        // Converged; signal the outer loop to stop.
                        iterations = iterations.max(config.max_iterations);
                    }
                    break;
                }
                lambda *= 10.0;
                rejections += 1;
            }
            if !accepted {
                if rejections >= config.max_rejections {
                    return Err(OptimizeError::NoProgress {
                        rejections,
                        cost: current_cost,
                    });
                }
                break;
            }
        }
    }

    for (id, vertex) in problem.poses.iter_mut() {
        vertex.pose = state.poses[id];
    }
    for (id, vertex) in problem.points.iter_mut() {
        vertex.position = state.points[id];
    }
    Ok(SolveReport {
        initial_cost,
        final_cost: current_cost,
        iterations: iterations.min(config.max_iterations),
        invalid_edges: invalid,
    })
}

/// One 3D-2D(+stereo) match used by pose-only optimization.
#[derive(Clone, Debug)]
pub struct PoseOnlyMatch {
    pub camera_index: usize,
    pub observed: Vector3<f64>,
    pub point: Vector3<f64>,
    pub information: Matrix3<f64>,
}

#[derive(Clone, Debug)]
pub struct PoseOnlyOutcome {
    pub pose: SE3Pose,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
}

const POSE_ONLY_ROUNDS: usize = 4;
const POSE_ONLY_MIN_MATCHES: usize = 4;

/// Optimizes the rig pose against fixed 3D points: four rounds of
/// optimize-then-reclassify with the chi-square gate [`CHI2_3DOF_95`].
pub fn pose_only_ba(
    rig: &MultiCamRig,
    initial: &SE3Pose,
    matches: &[PoseOnlyMatch],
    config: &SolverConfig,
) -> Result<PoseOnlyOutcome, OptimizeError> {
    if matches.len() < POSE_ONLY_MIN_MATCHES {
        return Err(OptimizeError::TooFewMatches {
            needed: POSE_ONLY_MIN_MATCHES,
            got: matches.len(),
        });
    }
    // Reuse the edge-based residual/Jacobian path; point ids are match indices.
    let edges: Vec<ReprojectionEdge> = matches
        .iter()
        .enumerate()
        .map(|(i, m)| ReprojectionEdge {
            mkf_id: 0,
            camera_index: m.camera_index,
            point_id: i as u64,
            observed: m.observed,
            information: m.information,
            robust_delta: Some(CHI2_3DOF_95.sqrt()),
        })
        .collect();

    let mut pose = *initial;
    let mut inliers = vec![true; matches.len()];
    for _round in 0..POSE_ONLY_ROUNDS {
        if inliers.iter().filter(|i| **i).count() < POSE_ONLY_MIN_MATCHES {
            break;
        }
        pose = optimize_pose(rig, &pose, &edges, matches, &inliers, config);
        for (i, edge) in edges.iter().enumerate() {
            inliers[i] = match residual(rig, edge, &pose, &matches[i].point) {
                Some(e) => (e.transpose() * edge.information * e)[(0, 0)] <= CHI2_3DOF_95,
                None => false,
            };
        }
    }
    let inlier_count = inliers.iter().filter(|i| **i).count();
    if inlier_count < POSE_ONLY_MIN_MATCHES {
        return Err(OptimizeError::TooFewInliers {
            inliers: inlier_count,
            minimum: POSE_ONLY_MIN_MATCHES,
        });
    }
    Ok(PoseOnlyOutcome {
        pose,
        inliers,
        inlier_count,
    })
}

fn pose_cost(
    rig: &MultiCamRig,
    pose: &SE3Pose,
    edges: &[ReprojectionEdge],
    matches: &[PoseOnlyMatch],
    inliers: &[bool],
) -> f64 {
    edges
        .iter()
        .enumerate()
        .filter(|(i, _)| inliers[*i])
        .map(|(i, edge)| match residual(rig, edge, pose, &matches[i].point) {
            Some(e) => {
                let chi2 = (e.transpose() * edge.information * e)[(0, 0)];
                0.5 * huber(chi2, edge.robust_delta).0
            }
            None => 0.0,
        })
        .sum()
}

fn optimize_pose(
    rig: &MultiCamRig,
    initial: &SE3Pose,
    edges: &[ReprojectionEdge],
    matches: &[PoseOnlyMatch],
    inliers: &[bool],
    config: &SolverConfig,
) -> SE3Pose {
    let mut pose = *initial;
    let mut cost = pose_cost(rig, &pose, edges, matches, inliers);
    let mut lambda = 0.0;
    let mut rejections = 0usize;
    for _ in 0..config.max_iterations {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (i, edge) in edges.iter().enumerate() {
            if !inliers[i] {
                continue;
            }
            let Some(e) = residual(rig, edge, &pose, &matches[i].point) else {
                continue;
            };
            let Some(j1) = jacobian_pose(rig, edge, &pose, &matches[i].point) else {
                continue;
            };
            let chi2 = (e.transpose() * edge.information * e)[(0, 0)];
            let w = huber(chi2, edge.robust_delta).1;
            let jtw = j1.transpose() * (edge.information * w);
            h += jtw * j1;
            g += jtw * e;
        }
        if g.amax() < config.gradient_tol {
            break;
        }
        if lambda == 0.0 {
            lambda = config.initial_lambda_factor * h.diagonal().sum() / 6.0;
        }
        let mut stepped = false;
        while rejections < config.max_rejections {
            let damped = h + Matrix6::identity() * lambda;
            let Some(chol) = damped.cholesky() else {
                lambda = (lambda * 10.0).max(1e-12);
                rejections += 1;
                continue;
            };
            let dx = chol.solve(&-g);
            let xi = Twist::from_slice(&[dx[0], dx[1], dx[2], dx[3], dx[4], dx[5]]);
            let candidate = compose(&exp(&xi), &pose);
            let new_cost = pose_cost(rig, &candidate, edges, matches, inliers);
            if new_cost < cost {
                let decrease = (cost - new_cost) / cost.max(1e-300);
                pose = candidate;
                cost = new_cost;
                lambda = (lambda * 0.5).max(1e-15);
                rejections = 0;
                stepped = true;
                if decrease < config.rel_decrease_tol {
                    return pose;
                }
                break;
            }
            lambda *= 10.0;
            rejections += 1;
        }
        if !stepped {
            break;
        }
    }
    pose
}
