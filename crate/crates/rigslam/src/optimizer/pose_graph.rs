//! Relative-pose graph optimization over SE(3).
//!
//! Minimizes sum ||log(measured^-1 * T_from * T_to^-1)||^2_Omega over the
//! free vertices. Edge Jacobians are computed by central differences on the
//! exact log residual; the reprojection Jacobians stay analytic, this graph
//! term is plumbing around them.

use super::{OptimizeError, RelativePoseEdge, SolveReport, SolverConfig};
use crate::geometry::{compose, exp, inverse, log, SE3Pose, Twist};
use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

const FD_STEP: f64 = 1e-6;

fn edge_residual(
    edge: &RelativePoseEdge,
    from: &SE3Pose,
    to: &SE3Pose,
) -> Result<Vector6<f64>, OptimizeError> {
    let err = compose(&compose(&inverse(&edge.measured), from), &inverse(to));
    let xi = log(&err)?;
    let a = xi.as_array();
    Ok(Vector6::from_row_slice(&a))
}

fn graph_cost(
    vertices: &BTreeMap<u64, SE3Pose>,
    edges: &[RelativePoseEdge],
) -> Result<f64, OptimizeError> {
    let mut cost = 0.0;
    for edge in edges {
        let r = edge_residual(edge, &vertices[&edge.from_id], &vertices[&edge.to_id])?;
        cost += 0.5 * (r.transpose() * edge.information * r)[(0, 0)];
    }
    Ok(cost)
}

/// Central-difference Jacobians of the residual with respect to
/// left-multiplicative perturbations of the two endpoint vertices.
fn edge_jacobians(
    edge: &RelativePoseEdge,
    from: &SE3Pose,
    to: &SE3Pose,
) -> Result<(Matrix6<f64>, Matrix6<f64>), OptimizeError> {
    let mut j_from = Matrix6::zeros();
    let mut j_to = Matrix6::zeros();
    for k in 0..6 {
        let mut d = [0.0; 6];
        d[k] = FD_STEP;
        let plus = exp(&Twist::from_slice(&d));
        d[k] = -FD_STEP;
        let minus = exp(&Twist::from_slice(&d));

        let rp = edge_residual(edge, &compose(&plus, from), to)?;
        let rm = edge_residual(edge, &compose(&minus, from), to)?;
        j_from.set_column(k, &((rp - rm) / (2.0 * FD_STEP)));

        let rp = edge_residual(edge, from, &compose(&plus, to))?;
        let rm = edge_residual(edge, from, &compose(&minus, to))?;
        j_to.set_column(k, &((rp - rm) / (2.0 * FD_STEP)));
    }
    Ok((j_from, j_to))
}

/// Optimizes the free vertices of a relative-pose graph. `fixed` vertices are
/// held constant and every free vertex must be reachable from a fixed one.
pub fn pose_graph_solve(
    vertices: &BTreeMap<u64, SE3Pose>,
    edges: &[RelativePoseEdge],
    fixed: &BTreeSet<u64>,
    config: &SolverConfig,
) -> Result<(BTreeMap<u64, SE3Pose>, SolveReport), OptimizeError> {
    if fixed.is_empty() || !fixed.iter().any(|f| vertices.contains_key(f)) {
        return Err(OptimizeError::GaugeNotFixed);
    }
    let mut adjacency: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for edge in edges {
        if edge.from_id == edge.to_id {
            return Err(OptimizeError::SelfEdge(edge.from_id));
        }
        for id in [edge.from_id, edge.to_id] {
            if !vertices.contains_key(&id) {
                return Err(OptimizeError::UnknownPose(id));
            }
        }
        adjacency.entry(edge.from_id).or_default().push(edge.to_id);
        adjacency.entry(edge.to_id).or_default().push(edge.from_id);
    }
    // Reachability from the fixed set.
    let mut visited: BTreeSet<u64> = fixed
        .iter()
        .filter(|f| vertices.contains_key(f))
        .copied()
        .collect();
    let mut queue: VecDeque<u64> = visited.iter().copied().collect();
    while let Some(v) = queue.pop_front() {
        for next in adjacency.get(&v).into_iter().flatten() {
            if visited.insert(*next) {
                queue.push_back(*next);
            }
        }
    }
    let unreachable: Vec<u64> = vertices
        .keys()
        .filter(|id| !visited.contains(id))
        .copied()
        .collect();
    if !unreachable.is_empty() {
        return Err(OptimizeError::Disconnected(unreachable));
    }

    let free_index: BTreeMap<u64, usize> = vertices
        .keys()
        .filter(|id| !fixed.contains(id))
        .enumerate()
        .map(|(i, id)| (*id, i))
        .collect();
    let n = free_index.len();
    let mut state = vertices.clone();
    let initial_cost = graph_cost(&state, edges)?;
    let mut current_cost = initial_cost;
    let mut iterations = 0usize;
    let mut lambda = 0.0;
    let mut rejections = 0usize;

    if n > 0 {
        loop {
            // Assemble the damped normal equations.
            let mut h = DMatrix::<f64>::zeros(6 * n, 6 * n);
            let mut g = DVector::<f64>::zeros(6 * n);
            for edge in edges {
                let from = state[&edge.from_id];
                let to = state[&edge.to_id];
                let r = edge_residual(edge, &from, &to)?;
                let (j_from, j_to) = edge_jacobians(edge, &from, &to)?;
                let fi = free_index.get(&edge.from_id).copied();
                let ti = free_index.get(&edge.to_id).copied();
                let omega = edge.information;
                if let Some(i) = fi {
                    add_block(&mut h, 6 * i, 6 * i, &(j_from.transpose() * omega * j_from));
                    add_vec(&mut g, 6 * i, &(j_from.transpose() * omega * r));
                }
                if let Some(j) = ti {
                    add_block(&mut h, 6 * j, 6 * j, &(j_to.transpose() * omega * j_to));
                    add_vec(&mut g, 6 * j, &(j_to.transpose() * omega * r));
                }
                if let (Some(i), Some(j)) = (fi, ti) {
                    let cross = j_from.transpose() * omega * j_to;
                    add_block(&mut h, 6 * i, 6 * j, &cross);
                    add_block(&mut h, 6 * j, 6 * i, &cross.transpose());
                }
            }
            if g.iter().fold(0.0_f64, |m, v| m.max(v.abs())) < config.gradient_tol {
                break;
            }
            if iterations >= config.max_iterations {
                break;
            }
            if lambda == 0.0 {
                let mean_diag = h.diagonal().sum() / (6 * n) as f64;
                lambda = config.initial_lambda_factor * mean_diag.max(1e-12);
            }

            let mut accepted = false;
            while rejections < config.max_rejections {
                let mut damped = h.clone();
                for i in 0..6 * n {
                    damped[(i, i)] += lambda;
                }
                let Some(chol) = damped.cholesky() else {
                    lambda = (lambda * 10.0).max(1e-12);
                    rejections += 1;
                    continue;
                };
                let dx = chol.solve(&(-&g));
                let mut candidate = state.clone();
                for (id, idx) in &free_index {
                    let xi = Twist::from_slice(&[
                        dx[6 * idx],
                        dx[6 * idx + 1],
                        dx[6 * idx + 2],
                        dx[6 * idx + 3],
                        dx[6 * idx + 4],
                        dx[6 * idx + 5],
                    ]);
                    let pose = candidate.get_mut(id).unwrap();
                    *pose = compose(&exp(&xi), pose);
                }
                let new_cost = graph_cost(&candidate, edges)?;
                if new_cost < current_cost {
                    let decrease = (current_cost - new_cost) / current_cost.max(1e-300);
                    state = candidate;
                    current_cost = new_cost;
                    lambda = (lambda * 0.5).max(1e-15);
                    rejections = 0;
                    iterations += 1;
                    accepted = true;
                    if decrease < config.rel_decrease_tol {
                        iterations = iterations.max(config.max_iterations);
                    }
                    break;
                }
                lambda *= 10.0;
                rejections += 1;
            }
            if !accepted {
                if rejections >= config.max_rejections && current_cost > 1e-18 {
                    return Err(OptimizeError::NoProgress {
                        rejections,
                        cost: current_cost,
                    });
                }
                break;
            }
        }
    }

    Ok((
        state,
        SolveReport {
            initial_cost,
            final_cost: current_cost,
            iterations: iterations.min(config.max_iterations),
            invalid_edges: 0,
        },
    ))
}

fn add_block(h: &mut DMatrix<f64>, row: usize, col: usize, block: &Matrix6<f64>) {
    let mut view = h.fixed_view_mut::<6, 6>(row, col);
    view += block;
}

fn add_vec(g: &mut DVector<f64>, row: usize, v: &Vector6<f64>) {
    for k in 0..6 {
        g[row + k] += v[k];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::transform_point;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_pose(rng: &mut StdRng, scale: f64) -> SE3Pose {
        exp(&Twist::from_slice(&[
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ]))
    }

    fn pose_distance(a: &SE3Pose, b: &SE3Pose) -> f64 {
        log(&compose(a, &inverse(b))).unwrap().norm()
    }

    #[test]
    fn consistent_chain_zero_cost() {
        let mut rng = StdRng::seed_from_u64(1);
        let truth: Vec<SE3Pose> = (0..6).map(|_| random_pose(&mut rng, 0.8)).collect();
        let mut vertices: BTreeMap<u64, SE3Pose> = BTreeMap::new();
        let mut edges = Vec::new();
        for (i, pose) in truth.iter().enumerate() {
            // Initialize every free vertex away from the truth.
            let init = if i == 0 {
                *pose
            } else {
                compose(&random_pose(&mut rng, 0.05), pose)
            };
            vertices.insert(i as u64, init);
        }
        for i in 0..truth.len() - 1 {
            let measured = compose(&truth[i], &inverse(&truth[i + 1]));
            edges.push(RelativePoseEdge::new(i as u64, i as u64 + 1, measured));
        }
        let fixed: BTreeSet<u64> = [0].into_iter().collect();
        // Tightened termination: the defaults stop at the 1e-8 gradient
        // threshold, well short of the noise-free floor probed here.
        let tight = SolverConfig {
            max_iterations: 100,
            gradient_tol: 1e-14,
            rel_decrease_tol: 1e-14,
            ..SolverConfig::default()
        };
        let (solved, report) = pose_graph_solve(&vertices, &edges, &fixed, &tight).unwrap();
        assert!(report.final_cost < 1e-18, "cost {}", report.final_cost);
        for (i, pose) in truth.iter().enumerate() {
            assert!(
                pose_distance(&solved[&(i as u64)], pose) < 1e-9,
                "vertex {i} off by {}",
                pose_distance(&solved[&(i as u64)], pose)
            );
        }
    }

    #[test]
    fn consistent_loop_machine_precision() {
        let mut rng = StdRng::seed_from_u64(2);
        let truth: Vec<SE3Pose> = (0..4).map(|_| random_pose(&mut rng, 0.7)).collect();
        let mut vertices = BTreeMap::new();
        let mut edges = Vec::new();
        for (i, pose) in truth.iter().enumerate() {
            let init = if i == 0 {
                *pose
            } else {
                compose(&random_pose(&mut rng, 0.08), pose)
            };
            vertices.insert(i as u64, init);
        }
        for i in 0..4 {
            let j = (i + 1) % 4; // includes the loop edge 3 -> 0
            let measured = compose(&truth[i], &inverse(&truth[j]));
            edges.push(RelativePoseEdge::new(i as u64, j as u64, measured));
        }
        let fixed: BTreeSet<u64> = [0].into_iter().collect();
        let tight = SolverConfig {
            max_iterations: 100,
            gradient_tol: 1e-14,
            rel_decrease_tol: 1e-14,
            ..SolverConfig::default()
        };
        let (solved, report) = pose_graph_solve(&vertices, &edges, &fixed, &tight).unwrap();
        assert!(report.final_cost < 1e-18, "cost {}", report.final_cost);
        for (i, pose) in truth.iter().enumerate() {
            assert!(
                pose_distance(&solved[&(i as u64)], pose) < 1e-9,
                "vertex {i} off by {}",
                pose_distance(&solved[&(i as u64)], pose)
            );
        }
    }

    #[test]
    fn inconsistent_loop_matches_scalar_oracle() {
        // Planar rotation graph: vertices rotate about z, all edges weight 1.
        // Chain 0-1-2-3 measures steps of `delta`; the loop edge 0-3 is
        // inconsistent by `eps`. With angles x_i (x0 = 0 fixed), the cost is
        //   1/2 [ (x1-d)^2 + (x2-x1-d)^2 + (x3-x2-d)^2 + (x3-(3d+e))^2 ]
        // a 1-DoF-per-vertex linear least squares solved exactly below.
        let delta = 0.3;
        let eps = 0.12;
        let rz = |a: f64| SE3Pose::from_axis_angle(&Vector3::z(), a, Vector3::zeros());

        let mut vertices = BTreeMap::new();
        for i in 0..4u64 {
            vertices.insert(i, rz(delta * i as f64));
        }
        let mut edges = Vec::new();
        for i in 0..3u64 {
            // measured = T_from * T_to^-1 = Rz(-delta)
            edges.push(RelativePoseEdge::new(i, i + 1, rz(-delta)));
        }
        edges.push(RelativePoseEdge::new(0, 3, rz(-(3.0 * delta + eps))));

        let fixed: BTreeSet<u64> = [0].into_iter().collect();
        let (solved, report) = pose_graph_solve(
            &vertices,
            &edges,
            &fixed,
            &SolverConfig::default().with_iterations(200),
        )
        .unwrap();

        // Scalar oracle: minimize over (x1, x2, x3). Normal equations:
        //   [2 -1 0; -1 2 -1; 0 -1 2] x = [0; 0; 3d+e + ... ] worked out:
        // residuals r1 = x1 - d, r2 = x2-x1-d, r3 = x3-x2-d, r4 = x3-(3d+e).
        let a = nalgebra::Matrix3::new(2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0);
        let b = Vector3::new(0.0, 0.0, 3.0 * delta + eps + delta - delta);
        // b = [d - d, d - d, d + (3d+e)] - careful: grad = A x - c with
        // c = (r terms): c1 = d + (x2 part), derive directly instead:
        // dC/dx1 = (x1-d) - (x2-x1-d) = 2x1 - x2 - 0
        // dC/dx2 = (x2-x1-d) - (x3-x2-d) = 2x2 - x1 - x3
        // dC/dx3 = (x3-x2-d) + (x3-(3d+e)) = 2x3 - x2 - (4d+e)
        let c = Vector3::new(0.0, 0.0, 4.0 * delta + eps);
        let x = a.lu().solve(&c).unwrap();
        let _ = b;
        let oracle_cost = 0.5
            * ((x[0] - delta).powi(2)
                + (x[1] - x[0] - delta).powi(2)
                + (x[2] - x[1] - delta).powi(2)
                + (x[2] - (3.0 * delta + eps)).powi(2));
        assert_abs_diff_eq!(report.final_cost, oracle_cost, epsilon = 1e-10);
        for (i, expected) in [x[0], x[1], x[2]].iter().enumerate() {
            let got = solved[&(i as u64 + 1)].rotation_angle();
            assert_abs_diff_eq!(got, *expected, epsilon = 1e-7);
        }
    }

    #[test]
    fn disconnected_graph_names_unreachable_vertices() {
        let mut vertices = BTreeMap::new();
        for i in 0..4u64 {
            vertices.insert(i, SE3Pose::identity());
        }
        let edges = vec![RelativePoseEdge::new(0, 1, SE3Pose::identity())];
        let fixed: BTreeSet<u64> = [0].into_iter().collect();
        match pose_graph_solve(&vertices, &edges, &fixed, &SolverConfig::default()) {
            Err(OptimizeError::Disconnected(ids)) => assert_eq!(ids, vec![2, 3]),
            other => panic!("expected Disconnected, got {other:?}"),
        }
    }

    #[test]
    fn gauge_and_edge_validation() {
        let mut vertices = BTreeMap::new();
        vertices.insert(0u64, SE3Pose::identity());
        vertices.insert(1u64, SE3Pose::identity());
        let edges = vec![RelativePoseEdge::new(0, 1, SE3Pose::identity())];
        assert!(matches!(
            pose_graph_solve(&vertices, &edges, &BTreeSet::new(), &SolverConfig::default()),
            Err(OptimizeError::GaugeNotFixed)
        ));
        let bad = vec![RelativePoseEdge::new(0, 0, SE3Pose::identity())];
        let fixed: BTreeSet<u64> = [0].into_iter().collect();
        assert!(matches!(
            pose_graph_solve(&vertices, &bad, &fixed, &SolverConfig::default()),
            Err(OptimizeError::SelfEdge(0))
        ));
        let unknown = vec![RelativePoseEdge::new(0, 7, SE3Pose::identity())];
        assert!(matches!(
            pose_graph_solve(&vertices, &unknown, &fixed, &SolverConfig::default()),
            Err(OptimizeError::UnknownPose(7))
        ));
    }

    #[test]
    fn noisy_graph_reduces_cost_and_respects_fixed() {
        let mut rng = StdRng::seed_from_u64(9);
        let truth: Vec<SE3Pose> = (0..10).map(|_| random_pose(&mut rng, 0.5)).collect();
        let mut vertices = BTreeMap::new();
        for (i, pose) in truth.iter().enumerate() {
            vertices.insert(i as u64, compose(&random_pose(&mut rng, 0.03), pose));
        }
        vertices.insert(0, truth[0]);
        let mut edges = Vec::new();
        for i in 0..9 {
            let noise = exp(&Twist::from_slice(&[
                rng.gen_range(-0.01..0.01),
                rng.gen_range(-0.01..0.01),
                rng.gen_range(-0.01..0.01),
                rng.gen_range(-0.02..0.02),
                rng.gen_range(-0.02..0.02),
                rng.gen_range(-0.02..0.02),
            ]));
            let measured = compose(&noise, &compose(&truth[i], &inverse(&truth[i + 1])));
            edges.push(RelativePoseEdge::new(i as u64, i as u64 + 1, measured));
        }
        // A few extra skip edges to over-constrain.
        for i in 0..7 {
            let measured = compose(&truth[i], &inverse(&truth[i + 2]));
            edges.push(RelativePoseEdge::new(i as u64, i as u64 + 2, measured));
        }
        let fixed: BTreeSet<u64> = [0].into_iter().collect();
        let before = graph_cost(&vertices, &edges).unwrap();
        let (solved, report) =
            pose_graph_solve(&vertices, &edges, &fixed, &SolverConfig::default()).unwrap();
        assert!(report.final_cost < before);
        assert_eq!(solved[&0], truth[0]);
        // Solution should be closer to the truth than the initialization.
        let err_before: f64 = truth
            .iter()
            .enumerate()
            .map(|(i, t)| pose_distance(&vertices[&(i as u64)], t))
            .sum();
        let err_after: f64 = truth
            .iter()
            .enumerate()
            .map(|(i, t)| pose_distance(&solved[&(i as u64)], t))
            .sum();
        assert!(err_after < err_before);
        let _ = transform_point(&truth[0], &Vector3::zeros());
    }
}

