//! Reprojection residuals, their analytic Jacobians, and the
//! finite-difference certification harness.
//!
//! With e = observed - predicted and a left-multiplicative pose perturbation
//! T_sw <- exp(dxi) * T_sw, the chain rule factors as
//!
//!   J1 = de/dP_ci * R_cis * [-P_m^ | I]      (3x6, pose block)
//!   J2 = de/dP_ci * R_cis * R_sw             (3x3, point block)
//!
//! where P_m = T_sw * P_w is the point in the multi-camera frame, P_ci the
//! point in camera i, and de/dP_ci the projection derivative including the
//! virtual-stereo row with b_f = fx * b.

use super::{OptimizeError, Problem, ReprojectionEdge};
use crate::camera::{CameraIntrinsics, MultiCamRig};
use crate::geometry::{compose, exp, skew, transform_point, SE3Pose, Twist};
use nalgebra::{Matrix3, Matrix3x6, Vector3};
use serde::Serialize;

/// Residual e = observed - predicted. Returns `None` when the point sits at
/// non-positive depth in the camera (edge invalid for this iteration).
pub fn residual(
    rig: &MultiCamRig,
    edge: &ReprojectionEdge,
    t_sw: &SE3Pose,
    p_w: &Vector3<f64>,
) -> Option<Vector3<f64>> {
    let cam_pose = rig.camera_pose(edge.camera_index, t_sw).ok()?;
    let p_ci = transform_point(&cam_pose, p_w);
    if p_ci.z <= 0.0 {
        return None;
    }
    let predicted = rig
        .intrinsics(edge.camera_index)
        .ok()?
        .project_unchecked(&p_ci)
        .as_vector();
    Some(edge.observed - predicted)
}

/// Projection derivative de/dP_ci for e = observed - (u, v, u_r).
fn de_dpci(cam: &CameraIntrinsics, p_ci: &Vector3<f64>) -> Matrix3<f64> {
    let (x, y, z) = (p_ci.x, p_ci.y, p_ci.z);
    let z2 = z * z;
    let bf = cam.fx * cam.baseline;
    Matrix3::new(
        -cam.fx / z,
        0.0,
        cam.fx * x / z2,
        0.0,
        -cam.fy / z,
        cam.fy * y / z2,
        -cam.fx / z,
        0.0,
        (cam.fx * x - bf) / z2,
    )
}

/// Pose Jacobian J1 (3x6). `None` on non-positive depth.
pub fn jacobian_pose(
    rig: &MultiCamRig,
    edge: &ReprojectionEdge,
    t_sw: &SE3Pose,
    p_w: &Vector3<f64>,
) -> Option<Matrix3x6<f64>> {
    let cam = rig.intrinsics(edge.camera_index).ok()?;
    let extrinsic = rig.extrinsic(edge.camera_index).ok()?;
    let p_m = transform_point(t_sw, p_w);
    let p_ci = transform_point(extrinsic, &p_m);
    if p_ci.z <= 0.0 {
        return None;
    }
    let a = de_dpci(cam, &p_ci) * extrinsic.rotation();
    let mut point_motion = Matrix3x6::zeros();
    point_motion
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-skew(&p_m)));
    point_motion
        .fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&Matrix3::identity());
    Some(a * point_motion)
}

/// Point Jacobian J2 (3x3). `None` on non-positive depth.
pub fn jacobian_point(
    rig: &MultiCamRig,
    edge: &ReprojectionEdge,
    t_sw: &SE3Pose,
    p_w: &Vector3<f64>,
) -> Option<Matrix3<f64>> {
    let cam = rig.intrinsics(edge.camera_index).ok()?;
    let extrinsic = rig.extrinsic(edge.camera_index).ok()?;
    let p_m = transform_point(t_sw, p_w);
    let p_ci = transform_point(extrinsic, &p_m);
    if p_ci.z <= 0.0 {
        return None;
    }
    Some(de_dpci(cam, &p_ci) * extrinsic.rotation() * t_sw.rotation())
}

/// Finite-difference comparison for a single edge.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EdgeFdReport {
    pub mkf_id: u64,
    pub camera_index: usize,
    pub point_id: u64,
    pub pose_rel_error: f64,
    pub point_rel_error: f64,
}

/// Report of [`finite_diff_check`] over a whole problem.
#[derive(Clone, Debug, Serialize)]
pub struct FdReport {
    pub step: f64,
    pub tolerance: f64,
    pub edges_checked: usize,
    pub edges_skipped: usize,
    pub max_pose_rel_error: f64,
    pub max_point_rel_error: f64,
    pub pass: bool,
    /// Edges exceeding the tolerance, worst first (at most 16 reported).
    pub failures: Vec<EdgeFdReport>,
}

/// Compares the analytic J1/J2 of every edge against central finite
/// differences with step `h`, relative to max(1, ||J_fd||).
pub fn finite_diff_check(problem: &Problem, h: f64, tolerance: f64) -> Result<FdReport, OptimizeError> {
    let mut edge_reports: Vec<EdgeFdReport> = Vec::new();
    let mut skipped = 0usize;
    for edge in &problem.edges {
        let pose = problem
            .poses
            .get(&edge.mkf_id)
            .ok_or(OptimizeError::UnknownPose(edge.mkf_id))?
            .pose;
        let point = problem
            .points
            .get(&edge.point_id)
            .ok_or(OptimizeError::UnknownPoint(edge.point_id))?
            .position;

        let (Some(j1), Some(j2)) = (
            jacobian_pose(&problem.rig, edge, &pose, &point),
            jacobian_point(&problem.rig, edge, &pose, &point),
        ) else {
            skipped += 1;
            continue;
        };

        // Central differences on the pose, left-multiplicative perturbation.
        let mut j1_fd = Matrix3x6::zeros();
        let mut valid = true;
        for k in 0..6 {
            let mut delta = [0.0; 6];
            delta[k] = h;
            let plus = compose(&exp(&Twist::from_slice(&delta)), &pose);
            delta[k] = -h;
            let minus = compose(&exp(&Twist::from_slice(&delta)), &pose);
            match (
                residual(&problem.rig, edge, &plus, &point),
                residual(&problem.rig, edge, &minus, &point),
            ) {
                (Some(rp), Some(rm)) => j1_fd.set_column(k, &((rp - rm) / (2.0 * h))),
                _ => {
                    valid = false;
                    break;
                }
            }
        }
        let mut j2_fd = Matrix3::zeros();
        for k in 0..3 {
            let mut dp = Vector3::zeros();
            dp[k] = h;
            match (
                residual(&problem.rig, edge, &pose, &(point + dp)),
                residual(&problem.rig, edge, &pose, &(point - dp)),
            ) {
                (Some(rp), Some(rm)) => j2_fd.set_column(k, &((rp - rm) / (2.0 * h))),
                _ => {
                    valid = false;
                    break;
                }
            }
        }
        if !valid {
            skipped += 1;
            continue;
        }

        let pose_rel = rel_error(j1.iter(), j1_fd.iter());
        let point_rel = rel_error(j2.iter(), j2_fd.iter());
        edge_reports.push(EdgeFdReport {
            mkf_id: edge.mkf_id,
            camera_index: edge.camera_index,
            point_id: edge.point_id,
            pose_rel_error: pose_rel,
            point_rel_error: point_rel,
        });
    }

    let max_pose = edge_reports
        .iter()
        .fold(0.0_f64, |m, r| m.max(r.pose_rel_error));
    let max_point = edge_reports
        .iter()
        .fold(0.0_f64, |m, r| m.max(r.point_rel_error));
    let mut failures: Vec<EdgeFdReport> = edge_reports
        .iter()
        .filter(|r| r.pose_rel_error > tolerance || r.point_rel_error > tolerance)
        .copied()
        .collect();
    failures.sort_by(|a, b| {
        let wa = a.pose_rel_error.max(a.point_rel_error);
        let wb = b.pose_rel_error.max(b.point_rel_error);
        wb.partial_cmp(&wa).unwrap()
    });
    failures.truncate(16);

    Ok(FdReport {
        step: h,
        tolerance,
        edges_checked: edge_reports.len(),
        edges_skipped: skipped,
        max_pose_rel_error: max_pose,
        max_point_rel_error: max_point,
        pass: failures.is_empty(),
        failures,
    })
}

fn rel_error<'a>(
    analytic: impl Iterator<Item = &'a f64>,
    numeric: impl Iterator<Item = &'a f64> + Clone,
) -> f64 {
    let scale = numeric
        .clone()
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(1.0);
    analytic
        .zip(numeric)
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

/// Builds a random but well-posed problem: a rig of `n_cameras`, random
/// poses near the origin, and points placed in front of randomly chosen
/// cameras. Every edge has strictly positive depth at construction.
pub fn random_problem(
    seed: u64,
    n_cameras: usize,
    n_poses: usize,
    n_points_per_pose: usize,
) -> Problem {
    use crate::camera::RigCamera;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    let mut rng = StdRng::seed_from_u64(seed);
    let mut cameras = vec![RigCamera {
        intrinsics: random_intrinsics(&mut rng),
        extrinsic: SE3Pose::identity(),
    }];
    for _ in 1..n_cameras {
        let xi = Twist::from_slice(&[
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
        ]);
        cameras.push(RigCamera {
            intrinsics: random_intrinsics(&mut rng),
            extrinsic: exp(&xi),
        });
    }
    let rig = MultiCamRig::new(cameras).expect("valid random rig");

    let mut problem = Problem::new(rig.clone());
    let mut point_id = 0u64;
    for pose_id in 0..n_poses as u64 {
        let t_sw = exp(&Twist::from_slice(&[
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ]));
        problem.add_pose(pose_id, t_sw, pose_id == 0);
        for _ in 0..n_points_per_pose {
            let camera_index = rng.gen_range(0..rig.camera_count());
            // Choose the point in the camera frame so depth is positive,
            // then lift it to the world.
            let p_ci = Vector3::new(
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(0.8..6.0),
            );
            let cam_pose = rig.camera_pose(camera_index, &t_sw).expect("valid index");
            let p_w = transform_point(&crate::geometry::inverse(&cam_pose), &p_ci);
            problem.add_point(point_id, p_w, false);
            let predicted = rig
                .intrinsics(camera_index)
                .unwrap()
                .project_unchecked(&p_ci)
                .as_vector();
            let observed = predicted
                + Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
            problem
                .add_edge(ReprojectionEdge::new(pose_id, camera_index, point_id, observed))
                .expect("vertices exist");
            point_id += 1;
        }
    }
    problem
}

fn random_intrinsics<R: rand::Rng>(rng: &mut R) -> CameraIntrinsics {
    CameraIntrinsics {
        fx: rng.gen_range(350.0..700.0),
        fy: rng.gen_range(350.0..700.0),
        cx: rng.gen_range(300.0..340.0),
        cy: rng.gen_range(220.0..260.0),
        width: 640,
        height: 480,
        baseline: rng.gen_range(0.04..0.15),
        depth_min: 0.2,
        depth_max: 12.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn axis_problem() -> (Problem, ReprojectionEdge) {
        // Identity pose, main camera, point on the optical axis at depth Z.
        let cam = CameraIntrinsics {
            fx: 500.0,
            fy: 450.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
            baseline: 0.1,
            depth_min: 0.2,
            depth_max: 10.0,
        };
        let rig = MultiCamRig::single(cam).unwrap();
        let mut problem = Problem::new(rig);
        problem.add_pose(0, SE3Pose::identity(), true);
        problem.add_point(0, Vector3::new(0.0, 0.0, 2.0), false);
        let edge = ReprojectionEdge::new(0, 0, 0, Vector3::new(320.0, 240.0, 295.0));
        problem.add_edge(edge.clone()).unwrap();
        (problem, edge)
    }

    #[test]
    fn residual_zero_at_exact_prediction() {
        let (problem, mut edge) = axis_problem();
        let pose = problem.poses[&0].pose;
        let point = problem.points[&0].position;
        edge.observed = Vector3::new(320.0, 240.0, 320.0 - 500.0 * 0.1 / 2.0);
        let e = residual(&problem.rig, &edge, &pose, &point).unwrap();
        assert_abs_diff_eq!(e, Vector3::zeros(), epsilon = 1e-12);

        // A one-pixel u offset shows up in the first component only (u_r
        // shares u's offset through the observed vector, not the model).
        edge.observed += Vector3::new(1.0, 0.0, 0.0);
        let e = residual(&problem.rig, &edge, &pose, &point).unwrap();
        assert_abs_diff_eq!(e, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn residual_invalid_behind_camera() {
        let (problem, edge) = axis_problem();
        let pose = problem.poses[&0].pose;
        assert!(residual(&problem.rig, &edge, &pose, &Vector3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn jacobian_pose_axis_point_symbolic() {
        // For the main camera (R_cis = I) and P on the optical axis at depth
        // Z, translation column x of J1 is du/dtx = -fx/Z.
        let (problem, edge) = axis_problem();
        let pose = problem.poses[&0].pose;
        let point = problem.points[&0].position;
        let j1 = jacobian_pose(&problem.rig, &edge, &pose, &point).unwrap();
        let fx = 500.0;
        let z = 2.0;
        assert_abs_diff_eq!(j1[(0, 3)], -fx / z, epsilon = 1e-12);
        assert_abs_diff_eq!(j1[(1, 4)], -450.0 / z, epsilon = 1e-12);
        // Rotation about z moves the axis point nowhere radially: du/dwz = 0.
        assert_abs_diff_eq!(j1[(0, 2)], 0.0, epsilon = 1e-12);

        // Row 3 minus row 1 differs only in the depth column, by
        // d(u_r - u)/dz = d(-fx b / z)/dz = fx*b/z^2 (sign flipped by e = obs - pred).
        let diff = j1.row(2) - j1.row(0);
        for k in 0..5 {
            assert_abs_diff_eq!(diff[k], 0.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(diff[5], -fx * 0.1 / (z * z), epsilon = 1e-12);
    }

    #[test]
    fn jacobian_point_identity_pose_equals_projection_derivative() {
        let (problem, edge) = axis_problem();
        let pose = problem.poses[&0].pose;
        let point = problem.points[&0].position;
        let j2 = jacobian_point(&problem.rig, &edge, &pose, &point).unwrap();
        let expected = de_dpci(problem.rig.intrinsics(0).unwrap(), &point);
        assert_abs_diff_eq!(j2, expected, epsilon = 1e-14);
    }

    #[test]
    fn jacobian_point_equivariant_under_world_rotation() {
        let problem = random_problem(3, 2, 2, 5);
        let rot = SE3Pose::from_axis_angle(
            &Vector3::new(0.3, -0.5, 0.8).normalize(),
            0.7,
            Vector3::zeros(),
        );
        for edge in &problem.edges {
            let pose = problem.poses[&edge.mkf_id].pose;
            let point = problem.points[&edge.point_id].position;
            let j2 = jacobian_point(&problem.rig, edge, &pose, &point).unwrap();
            // Rotate the world frame: T' = T * R, P' = R^T P keeps the
            // camera-frame point identical, and J2' = J2 * R.
            let pose_r = compose(&pose, &rot);
            let point_r = transform_point(&crate::geometry::inverse(&rot), &point);
            let j2_r = jacobian_point(&problem.rig, edge, &pose_r, &point_r).unwrap();
            assert_abs_diff_eq!(j2_r, j2 * rot.rotation(), epsilon = 1e-9);
        }
    }

    #[test]
    fn finite_difference_certifies_analytic_jacobians() {
        // 1000 random configurations over rigs of 1 to 4 cameras.
        let mut checked = 0;
        for seed in 0..25u64 {
            let n_cams = 1 + (seed as usize % 4);
            let problem = random_problem(seed, n_cams, 4, 10);
            let report = finite_diff_check(&problem, 1e-6, 1e-5).unwrap();
            assert!(
                report.pass,
                "seed {seed}: max pose err {:.2e}, max point err {:.2e}",
                report.max_pose_rel_error, report.max_point_rel_error
            );
            checked += report.edges_checked;
        }
        assert!(checked >= 1000);
    }

    #[test]
    fn finite_difference_flags_corrupted_jacobian() {
        // Sanity of the checker: a sign flip in de/dP_ci must blow past any
        // reasonable tolerance (relative error ~2 on the dominant entries).
        let (problem, edge) = axis_problem();
        let pose = problem.poses[&0].pose;
        let point = problem.points[&0].position;
        let j1 = jacobian_pose(&problem.rig, &edge, &pose, &point).unwrap();
        let j1_corrupt = -j1;

        let mut j1_fd = Matrix3x6::zeros();
        let h = 1e-6;
        for k in 0..6 {
            let mut delta = [0.0; 6];
            delta[k] = h;
            let plus = compose(&exp(&Twist::from_slice(&delta)), &pose);
            delta[k] = -h;
            let minus = compose(&exp(&Twist::from_slice(&delta)), &pose);
            let rp = residual(&problem.rig, &edge, &plus, &point).unwrap();
            let rm = residual(&problem.rig, &edge, &minus, &point).unwrap();
            j1_fd.set_column(k, &((rp - rm) / (2.0 * h)));
        }
        let err = rel_error(j1_corrupt.iter(), j1_fd.iter());
        assert!(err > 1.0, "sign flip only produced error {err}");
        let ok = rel_error(j1.iter(), j1_fd.iter());
        assert!(ok <= 1e-5);
    }
}
