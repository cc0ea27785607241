//! EPnP: camera pose from n >= 4 world-point / pixel correspondences.
//!
//! The world points are expressed as barycentric combinations of four
//! control points; the camera-frame control points live in the null space
//! of the projection constraint matrix. Betas for the one-, two-, and
//! three-vector null-space cases are solved from the inter-control-point
//! distances, and the final pose comes from rigid alignment of the world
//! and camera point clouds. The winner is the case with the lowest
//! reprojection error.

use crate::calibration::icp_align;
use crate::camera::CameraIntrinsics;
use crate::geometry::SE3Pose;
use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector3};

/// Solves for the world-to-camera transform. Returns `None` on degenerate
/// input (fewer than 4 points, collinear geometry, or no valid beta case).
pub fn epnp_solve(
    cam: &CameraIntrinsics,
    world: &[Vector3<f64>],
    pixels: &[(f64, f64)],
) -> Option<SE3Pose> {
    let n = world.len();
    if n < 4 || pixels.len() != n {
        return None;
    }

    // Control points: centroid plus principal directions of the cloud.
    let centroid: Vector3<f64> = world.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::<f64>::zeros();
    for p in world {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n as f64;
    let eig = cov.symmetric_eigen();
    // Reject near-degenerate clouds (planar or collinear).
    let max_eig = eig.eigenvalues.amax();
    if max_eig <= 0.0 || eig.eigenvalues.min() < 1e-8 * max_eig {
        return None;
    }
    let mut control_w = [centroid; 4];
    for k in 0..3 {
        let axis = eig.eigenvectors.column(k) * eig.eigenvalues[k].sqrt();
        control_w[k + 1] = centroid + axis;
    }

    // Barycentric coordinates of every world point.
    let basis = Matrix3::from_columns(&[
        control_w[1] - control_w[0],
        control_w[2] - control_w[0],
        control_w[3] - control_w[0],
    ]);
    let basis_inv = basis.try_inverse()?;
    let alphas: Vec<[f64; 4]> = world
        .iter()
        .map(|p| {
            let a = basis_inv * (p - centroid);
            [1.0 - a.x - a.y - a.z, a.x, a.y, a.z]
        })
        .collect();

    // Constraint matrix M (2n x 12).
    let mut m = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, ((u, v), a)) in pixels.iter().zip(&alphas).enumerate() {
        for j in 0..4 {
            m[(2 * i, 3 * j)] = a[j] * cam.fx;
            m[(2 * i, 3 * j + 2)] = a[j] * (cam.cx - u);
            m[(2 * i + 1, 3 * j + 1)] = a[j] * cam.fy;
            m[(2 * i + 1, 3 * j + 2)] = a[j] * (cam.cy - v);
        }
    }
    let mtm = SMatrix::<f64, 12, 12>::from_iterator(
        (m.transpose() * &m).iter().copied(),
    );
    let eig = mtm.symmetric_eigen();
    // Columns sorted by ascending eigenvalue.
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .expect("finite eigenvalues")
    });
    let null: Vec<SVector<f64, 12>> = order
        .iter()
        .take(4)
        .map(|&k| eig.eigenvectors.column(k).into_owned())
        .collect();

    // Squared distances between world control points (6 pairs).
    let pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
    let dist_w: Vec<f64> = pairs
        .iter()
        .map(|(a, b)| (control_w[*a] - control_w[*b]).norm())
        .collect();

    let segment = |v: &SVector<f64, 12>, j: usize| -> Vector3<f64> {
        Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2])
    };
    let diff = |v: &SVector<f64, 12>, a: usize, b: usize| segment(v, a) - segment(v, b);

    let mut best: Option<(f64, SE3Pose)> = None;
    let mut consider = |betas: [f64; 4]| {
        let mut control_c = [Vector3::<f64>::zeros(); 4];
        for j in 0..4 {
            for (k, b) in betas.iter().enumerate() {
                control_c[j] += segment(&null[k], j) * *b;
            }
        }
        // Camera-frame points; flip if the cloud sits behind the camera.
        let mut cam_points: Vec<Vector3<f64>> = alphas
            .iter()
            .map(|a| {
                (0..4)
                    .map(|j| control_c[j] * a[j])
                    .sum::<Vector3<f64>>()
            })
            .collect();
        let mean_z: f64 = cam_points.iter().map(|p| p.z).sum::<f64>() / n as f64;
        if mean_z < 0.0 {
            for p in cam_points.iter_mut() {
                *p = -*p;
            }
        }
        if cam_points.iter().any(|p| p.z <= 0.0) {
            return;
        }
        let aligned: Vec<(Vector3<f64>, Vector3<f64>)> = cam_points
            .iter()
            .zip(world.iter())
            .map(|(c, w)| (*c, *w))
            .collect();
        let Ok(pose) = icp_align(&aligned) else {
            return;
        };
        let mut err = 0.0;
        for (p_w, (u, v)) in world.iter().zip(pixels.iter()) {
            let p_c = crate::geometry::transform_point(&pose, p_w);
            if p_c.z <= 0.0 {
                return;
            }
            let du = cam.fx * p_c.x / p_c.z + cam.cx - u;
            let dv = cam.fy * p_c.y / p_c.z + cam.cy - v;
            err += du * du + dv * dv;
        }
        if best.is_none() || err < best.as_ref().unwrap().0 {
            best = Some((err, pose));
        }
    };

    // Case N = 1: scale of the first null vector from the distance ratios.
    {
        let mut num = 0.0;
        let mut den = 0.0;
        for ((a, b), dw) in pairs.iter().zip(&dist_w) {
            let dc = diff(&null[0], *a, *b).norm();
            num += dc * dw;
            den += dc * dc;
        }
        if den > 0.0 {
            consider([num / den, 0.0, 0.0, 0.0]);
        }
    }

    // Case N = 2: unknowns (b11, b12, b22) from a 6x3 least squares.
    {
        let mut l = DMatrix::<f64>::zeros(6, 3);
        let mut rho = DMatrix::<f64>::zeros(6, 1);
        for (row, ((a, b), dw)) in pairs.iter().zip(&dist_w).enumerate() {
            let d1 = diff(&null[0], *a, *b);
            let d2 = diff(&null[1], *a, *b);
            l[(row, 0)] = d1.dot(&d1);
            l[(row, 1)] = 2.0 * d1.dot(&d2);
            l[(row, 2)] = d2.dot(&d2);
            rho[(row, 0)] = dw * dw;
        }
        if let Some(sol) = l.svd(true, true).solve(&rho, 1e-12).ok() {
            let (b11, b12, b22) = (sol[(0, 0)], sol[(1, 0)], sol[(2, 0)]);
            if b11 > 0.0 {
                let beta1 = b11.sqrt();
                let beta2 = if b12 >= 0.0 { 1.0 } else { -1.0 } * b22.abs().sqrt();
                consider([beta1, beta2, 0.0, 0.0]);
            }
        }
    }

    // Case N = 3: unknowns (b11, b12, b13, b22, b23, b33) from a 6x6 system.
    {
        let mut l = DMatrix::<f64>::zeros(6, 6);
        let mut rho = DMatrix::<f64>::zeros(6, 1);
        for (row, ((a, b), dw)) in pairs.iter().zip(&dist_w).enumerate() {
            let d1 = diff(&null[0], *a, *b);
            let d2 = diff(&null[1], *a, *b);
            let d3 = diff(&null[2], *a, *b);
            l[(row, 0)] = d1.dot(&d1);
            l[(row, 1)] = 2.0 * d1.dot(&d2);
            l[(row, 2)] = 2.0 * d1.dot(&d3);
            l[(row, 3)] = d2.dot(&d2);
            l[(row, 4)] = 2.0 * d2.dot(&d3);
            l[(row, 5)] = d3.dot(&d3);
            rho[(row, 0)] = dw * dw;
        }
        if let Some(sol) = l.svd(true, true).solve(&rho, 1e-12).ok() {
            let b11 = sol[(0, 0)];
            if b11 > 0.0 {
                let beta1 = b11.sqrt();
                let beta2 = sol[(1, 0)] / beta1;
                let beta3 = sol[(2, 0)] / beta1;
                consider([beta1, beta2, beta3, 0.0]);
            }
        }
    }

    best.map(|(_, pose)| pose)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{compose, exp, inverse, log, transform_point, Twist};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 500.0,
            fy: 480.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
            baseline: 0.1,
            depth_min: 0.2,
            depth_max: 10.0,
        }
    }

    fn random_pose(rng: &mut StdRng) -> SE3Pose {
        exp(&Twist::from_slice(&[
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ]))
    }

    /// Exact correspondences: pose recovered to high precision.
    #[test]
    fn exact_case_recovers_pose() {
        let cam = cam();
        let mut rng = StdRng::seed_from_u64(1);
        for trial in 0..50 {
            let truth = random_pose(&mut rng);
            let inv = inverse(&truth);
            let mut world = Vec::new();
            let mut pixels = Vec::new();
            for _ in 0..12 {
                let p_c = Vector3::new(
                    rng.gen_range(-0.6..0.6),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(1.0..6.0),
                );
                world.push(transform_point(&inv, &p_c));
                pixels.push((
                    cam.fx * p_c.x / p_c.z + cam.cx,
                    cam.fy * p_c.y / p_c.z + cam.cy,
                ));
            }
            let est = epnp_solve(&cam, &world, &pixels).expect("solvable");
            let err = log(&compose(&est, &inverse(&truth))).unwrap().norm();
            assert!(err < 1e-6, "trial {trial}: pose error {err}");
        }
    }

    #[test]
    fn noisy_case_stays_close() {
        let cam = cam();
        let mut rng = StdRng::seed_from_u64(2);
        let truth = random_pose(&mut rng);
        let inv = inverse(&truth);
        let mut world = Vec::new();
        let mut pixels = Vec::new();
        for _ in 0..40 {
            let p_c = Vector3::new(
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(1.0..6.0),
            );
            world.push(transform_point(&inv, &p_c));
            pixels.push((
                cam.fx * p_c.x / p_c.z + cam.cx + rng.gen_range(-0.5..0.5),
                cam.fy * p_c.y / p_c.z + cam.cy + rng.gen_range(-0.5..0.5),
            ));
        }
        let est = epnp_solve(&cam, &world, &pixels).expect("solvable");
        let err = log(&compose(&est, &inverse(&truth))).unwrap();
        assert!(err.rotation.norm() < 0.02, "rotation {}", err.rotation.norm());
        assert!(err.translation.norm() < 0.05, "translation {}", err.translation.norm());
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let cam = cam();
        // Too few points.
        assert!(epnp_solve(&cam, &[Vector3::zeros(); 3], &[(0.0, 0.0); 3]).is_none());
        // Collinear world points.
        let world: Vec<Vector3<f64>> = (0..8)
            .map(|i| Vector3::new(i as f64 * 0.1, 0.0, 2.0))
            .collect();
        let pixels: Vec<(f64, f64)> = world
            .iter()
            .map(|p| (cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy))
            .collect();
        assert!(epnp_solve(&cam, &world, &pixels).is_none());
    }
}
