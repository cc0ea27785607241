//! The local-mapping stage: point culling, new-point creation (depth
//! back-projection preferred, midpoint triangulation otherwise), duplicate
//! fusion, local bundle adjustment, and keyframe culling.

use super::{PipelineConfig, PipelineError};
use crate::features::{hamming, match_descriptors, BinaryDescriptor};
use crate::geometry::{compose, inverse, transform_point, SE3Pose};
use crate::map::{CulledKeyFrame, SlamMap};
use crate::optimizer::{Problem, ReprojectionEdge};
use nalgebra::{Matrix3, Vector3};
use std::collections::{BTreeMap, BTreeSet};

pub struct LocalMapper {
    config: PipelineConfig,
}

/// Builds the (u, v, u_r) observation vector and its information matrix for
/// a stored feature: depthless features carry no virtual-stereo row.
pub fn feature_observation(
    map: &SlamMap,
    mkf_id: u64,
    camera: usize,
    index: usize,
) -> Option<(Vector3<f64>, Matrix3<f64>)> {
    let mkf = map.keyframe(mkf_id).ok()?;
    let feat = mkf.feature(camera, index);
    let cam = map.rig.intrinsics(camera).ok()?;
    Some(match feat.depth {
        Some(z) => (
            Vector3::new(feat.u, feat.v, feat.u - cam.fx * cam.baseline / z),
            Matrix3::identity(),
        ),
        None => (
            Vector3::new(feat.u, feat.v, 0.0),
            Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)),
        ),
    })
}

impl LocalMapper {
    pub fn new(config: PipelineConfig) -> Self {
        Self { config }
    }

    /// Full processing of a freshly inserted MKF. Returns the culled
    /// keyframes for trajectory re-anchoring.
    pub fn process_new_mkf(
        &self,
        map: &mut SlamMap,
        mkf_id: u64,
    ) -> Result<Vec<CulledKeyFrame>, PipelineError> {
        map.cull_recent_points();

        let neighbors = map.neighbors(mkf_id, map.config.neighbor_k)?;
        self.fuse_local_points(map, mkf_id, &neighbors)?;
        self.create_points(map, mkf_id, &neighbors)?;
        self.local_bundle_adjustment(map, mkf_id, &neighbors)?;
        let culled = map.cull_redundant_keyframes(&neighbors);
        Ok(culled)
    }

    /// Projects the neighbors' points into the new MKF and binds unmatched
    /// features to existing points instead of letting duplicates form.
    fn fuse_local_points(
        &self,
        map: &mut SlamMap,
        mkf_id: u64,
        neighbors: &[u64],
    ) -> Result<(), PipelineError> {
        let mut local_points: BTreeSet<u64> = BTreeSet::new();
        for n in neighbors {
            if let Ok(mkf) = map.keyframe(*n) {
                local_points.extend(mkf.matched().map(|(_, _, pid)| pid));
            }
        }
        let pose = map.keyframe(mkf_id)?.pose;
        let camera_count = map.rig.camera_count();
        let mut touched = Vec::new();
        for pid in local_points {
            let Ok(point) = map.point(pid) else { continue };
            if point.observations.contains_key(&mkf_id) {
                continue;
            }
            let view = point.view();
            let descriptor = point.descriptor;
            let mut best: Option<(usize, usize, u32)> = None;
            for camera in 0..camera_count {
                let Some(pix) = map.rig.in_frustum(camera, &pose, &view) else {
                    continue;
                };
                let mkf = map.keyframe(mkf_id)?;
                for (fi, feat) in mkf.features[camera].iter().enumerate() {
                    if mkf.matched_points[camera][fi].is_some() {
                        continue;
                    }
                    if (feat.u - pix.u).abs() > self.config.local_search_radius_px
                        || (feat.v - pix.v).abs() > self.config.local_search_radius_px
                    {
                        continue;
                    }
                    let d = hamming(&descriptor, &feat.descriptor);
                    if d <= self.config.match_max_hamming
                        && best.map_or(true, |(_, _, bd)| d < bd)
                    {
                        best = Some((camera, fi, d));
                    }
                }
            }
            if let Some((camera, fi, _)) = best {
                map.add_observation(pid, mkf_id, camera, fi)?;
                touched.push(pid);
            }
        }
        for pid in touched {
            let _ = map.update_point_stats(pid);
        }
        Ok(())
    }

    /// New map points: depth back-projection for depth-valid features,
    /// midpoint triangulation against neighbor keyframes (any camera pair,
    /// including pairs within this MKF) for the rest.
    fn create_points(
        &self,
        map: &mut SlamMap,
        mkf_id: u64,
        neighbors: &[u64],
    ) -> Result<(), PipelineError> {
        let pose = map.keyframe(mkf_id)?.pose;
        let camera_count = map.rig.camera_count();

        // Depth path.
        for camera in 0..camera_count {
            let unbound: Vec<usize> = {
                let mkf = map.keyframe(mkf_id)?;
                (0..mkf.features[camera].len())
                    .filter(|i| mkf.matched_points[camera][*i].is_none())
                    .collect()
            };
            for fi in unbound {
                let (u, v, depth, descriptor) = {
                    let feat = map.keyframe(mkf_id)?.feature(camera, fi);
                    (feat.u, feat.v, feat.depth, feat.descriptor)
                };
                let Some(z) = depth else { continue };
                let Ok(p_w) = map.rig.pixel_to_world(camera, &pose, u, v, z) else {
                    continue;
                };
                map.create_point(p_w, descriptor, mkf_id, camera, fi)?;
            }
        }

        // Triangulation path for depthless leftovers.
        let mut partners: Vec<u64> = vec![mkf_id];
        partners.extend_from_slice(neighbors);
        for camera in 0..camera_count {
            let unbound: Vec<usize> = {
                let mkf = map.keyframe(mkf_id)?;
                (0..mkf.features[camera].len())
                    .filter(|i| {
                        mkf.matched_points[camera][*i].is_none()
                            && mkf.features[camera][*i].depth.is_none()
                    })
                    .collect()
            };
            if unbound.is_empty() {
                continue;
            }
            let descriptors: Vec<BinaryDescriptor> = {
                let mkf = map.keyframe(mkf_id)?;
                unbound
                    .iter()
                    .map(|i| mkf.features[camera][*i].descriptor)
                    .collect()
            };
            for &partner in &partners {
                for other_cam in 0..camera_count {
                    if partner == mkf_id && other_cam == camera {
                        continue;
                    }
                    self.triangulate_pair(
                        map,
                        (mkf_id, camera, &unbound, &descriptors),
                        (partner, other_cam),
                    )?;
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn triangulate_pair(
        &self,
        map: &mut SlamMap,
        (mkf_id, camera, unbound, descriptors): (u64, usize, &[usize], &[BinaryDescriptor]),
        (partner, other_cam): (u64, usize),
    ) -> Result<(), PipelineError> {
        if !map.has_keyframe(partner) {
            return Ok(());
        }
        // Unbound partner features (any depth state; their geometry comes
        // from the two-view construction).
        let partner_unbound: Vec<usize> = {
            let other = map.keyframe(partner)?;
            (0..other.features[other_cam].len())
                .filter(|i| other.matched_points[other_cam][*i].is_none())
                .collect()
        };
        if partner_unbound.is_empty() {
            return Ok(());
        }
        let partner_descs: Vec<BinaryDescriptor> = {
            let other = map.keyframe(partner)?;
            partner_unbound
                .iter()
                .map(|i| other.features[other_cam][*i].descriptor)
                .collect()
        };
        let pairs = match_descriptors(
            descriptors,
            &partner_descs,
            self.config.match_max_hamming,
            self.config.match_ratio,
        );
        if pairs.is_empty() {
            return Ok(());
        }

        let pose_a = map.keyframe(mkf_id)?.pose;
        let pose_b = map.keyframe(partner)?.pose;
        let cam_a = compose(map.rig.extrinsic(camera)?, &pose_a);
        let cam_b = compose(map.rig.extrinsic(other_cam)?, &pose_b);
        let center_a = *inverse(&cam_a).translation();
        let center_b = *inverse(&cam_b).translation();
        let intr_a = *map.rig.intrinsics(camera)?;
        let intr_b = *map.rig.intrinsics(other_cam)?;

        for (ia, ib) in pairs {
            let (fa_idx, fb_idx) = (unbound[ia], partner_unbound[ib]);
            // Both slots may have been bound by an earlier pair.
            if map.keyframe(mkf_id)?.matched_points[camera][fa_idx].is_some()
                || map.keyframe(partner)?.matched_points[other_cam][fb_idx].is_some()
            {
                continue;
            }
            let (ua, va, descriptor) = {
                let f = map.keyframe(mkf_id)?.feature(camera, fa_idx);
                (f.u, f.v, f.descriptor)
            };
            let (ub, vb) = {
                let f = map.keyframe(partner)?.feature(other_cam, fb_idx);
                (f.u, f.v)
            };
            // World-frame rays through both pixels.
            let dir_a = transform_point(
                &inverse(&cam_a),
                &Vector3::new((ua - intr_a.cx) / intr_a.fx, (va - intr_a.cy) / intr_a.fy, 1.0),
            ) - center_a;
            let dir_b = transform_point(
                &inverse(&cam_b),
                &Vector3::new((ub - intr_b.cx) / intr_b.fx, (vb - intr_b.cy) / intr_b.fy, 1.0),
            ) - center_b;
            let Some(p_w) = midpoint(center_a, dir_a, center_b, dir_b) else {
                continue;
            };
            // Positive depth and a tight reprojection check in both views.
            let pa = transform_point(&cam_a, &p_w);
            let pb = transform_point(&cam_b, &p_w);
            if pa.z <= 0.0 || pb.z <= 0.0 {
                continue;
            }
            let ra = intr_a.project_unchecked(&pa);
            let rb = intr_b.project_unchecked(&pb);
            let max_reproj = self.config.triangulation_max_reproj_px;
            if (ra.u - ua).hypot(ra.v - va) >= max_reproj
                || (rb.u - ub).hypot(rb.v - vb) >= max_reproj
            {
                continue;
            }
            let pid = map.create_point(p_w, descriptor, mkf_id, camera, fa_idx)?;
            map.add_observation(pid, partner, other_cam, fb_idx)?;
            let _ = map.update_point_stats(pid);
        }
        Ok(())
    }

    /// Local BA over the new MKF, its neighbors, and their points, with
    /// boundary observers (and the initial MKF) held fixed.
    fn local_bundle_adjustment(
        &self,
        map: &mut SlamMap,
        mkf_id: u64,
        neighbors: &[u64],
    ) -> Result<(), PipelineError> {
        let extraction = extract_local_problem(map, mkf_id, neighbors)?;
        let Some(mut extraction) = extraction else {
            return Ok(());
        };
        extraction.problem.solve(&self.config.solver_local)?;
        apply_problem_results(map, &extraction.problem);
        Ok(())
    }
}

pub struct LocalProblem {
    pub problem: Problem,
}

/// Builds the local BA problem. Returns `None` when there is nothing to
/// optimize (fewer than two keyframes).
pub fn extract_local_problem(
    map: &SlamMap,
    mkf_id: u64,
    neighbors: &[u64],
) -> Result<Option<LocalProblem>, PipelineError> {
    let mut local: BTreeSet<u64> = neighbors.iter().copied().collect();
    local.insert(mkf_id);
    if local.len() < 2 {
        return Ok(None);
    }
    let mut points: BTreeSet<u64> = BTreeSet::new();
    for id in &local {
        points.extend(map.keyframe(*id)?.matched().map(|(_, _, pid)| pid));
    }
    // Boundary: non-local observers of local points are fixed anchors.
    let mut boundary: BTreeSet<u64> = BTreeSet::new();
    for pid in &points {
        if let Ok(point) = map.point(*pid) {
            for observer in point.observations.keys() {
                if !local.contains(observer) {
                    boundary.insert(*observer);
                }
            }
        }
    }

    let mut problem = Problem::new(map.rig.clone());
    let initial = map.initial_mkf();
    for id in local.iter().chain(boundary.iter()) {
        let fixed = boundary.contains(id) || Some(*id) == initial;
        problem.add_pose(*id, map.keyframe(*id)?.pose, fixed);
    }
    // Gauge: if nothing ended up fixed, pin the oldest pose.
    if !problem.poses.values().any(|p| p.fixed) {
        let first = *local.iter().next().expect("non-empty local set");
        let pose = problem.poses[&first].pose;
        problem.add_pose(first, pose, true);
    }
    for pid in &points {
        let Ok(point) = map.point(*pid) else { continue };
        problem.add_point(*pid, point.position, false);
        for (observer, (camera, index)) in point.observations.iter() {
            if !problem.poses.contains_key(observer) {
                continue;
            }
            let Some((observed, information)) =
                feature_observation(map, *observer, *camera, *index)
            else {
                continue;
            };
            let mut edge = ReprojectionEdge::new(*observer, *camera, *pid, observed);
            edge.information = information;
            problem.add_edge(edge)?;
        }
    }
    Ok(Some(LocalProblem { problem }))
}

/// Writes optimized poses and points back into the map, skipping entities
/// removed in the meantime (threaded mode).
pub fn apply_problem_results(map: &mut SlamMap, problem: &Problem) {
    for (id, vertex) in &problem.poses {
        if vertex.fixed {
            continue;
        }
        if let Ok(mkf) = map.keyframe_mut(*id) {
            mkf.pose = vertex.pose;
        }
    }
    for (id, vertex) in &problem.points {
        if vertex.fixed {
            continue;
        }
        if let Ok(point) = map.point_mut(*id) {
            point.position = vertex.position;
        }
    }
}

/// Shortest-segment midpoint between two rays. `None` for near-parallel
/// rays or intersections behind either origin.
fn midpoint(
    origin_a: Vector3<f64>,
    dir_a: Vector3<f64>,
    origin_b: Vector3<f64>,
    dir_b: Vector3<f64>,
) -> Option<Vector3<f64>> {
    let da = dir_a.normalize();
    let db = dir_b.normalize();
    let cross = da.cross(&db);
    let denom = cross.norm_squared();
    if denom < 1e-12 {
        return None;
    }
    let diff = origin_b - origin_a;
    let t_a = diff.cross(&db).dot(&cross) / denom;
    let t_b = diff.cross(&da).dot(&cross) / denom;
    if t_a <= 0.0 || t_b <= 0.0 {
        return None;
    }
    Some(0.5 * ((origin_a + da * t_a) + (origin_b + db * t_b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn midpoint_intersecting_rays() {
        let target = Vector3::new(1.0, 2.0, 5.0);
        let o1 = Vector3::zeros();
        let o2 = Vector3::new(2.0, 0.0, 0.0);
        let p = midpoint(o1, target - o1, o2, target - o2).unwrap();
        assert_abs_diff_eq!(p, target, epsilon = 1e-12);
    }

    #[test]
    fn midpoint_rejects_parallel_and_behind() {
        let d = Vector3::new(0.0, 0.0, 1.0);
        assert!(midpoint(Vector3::zeros(), d, Vector3::new(1.0, 0.0, 0.0), d).is_none());
        // Intersection behind the first origin.
        let target = Vector3::new(0.0, 0.0, -3.0);
        let o2 = Vector3::new(1.0, 0.0, 0.0);
        assert!(midpoint(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), o2, target - o2).is_none());
    }
}
