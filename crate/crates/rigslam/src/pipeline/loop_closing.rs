//! The loop-closing stage: bag-of-words detection with temporal
//! consistency, rigid 3D-3D loop alignment, pose correction, duplicate
//! fusion, essential-graph optimization, and global bundle adjustment.

use super::mapping::{apply_problem_results, feature_observation};
use super::tracking::PoseCorrection;
use super::{PipelineConfig, PipelineError};
use crate::calibration::icp_align;
use crate::features::{bow_similarity, hamming, match_descriptors, BinaryDescriptor};
use crate::geometry::{compose, inverse, transform_point, SE3Pose};
use crate::map::SlamMap;
use crate::optimizer::{
    pose_graph_solve, Problem, RelativePoseEdge, ReprojectionEdge, SolverConfig,
};
use nalgebra::Vector3;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::collections::{BTreeMap, BTreeSet};

pub struct LoopCloser {
    config: PipelineConfig,
    /// Candidate covisibility groups with their consecutive-detection counts.
    consistency: Vec<(BTreeSet<u64>, usize)>,
    rng: StdRng,
}

impl LoopCloser {
    pub fn new(config: PipelineConfig) -> Self {
        Self {
            config,
            consistency: Vec::new(),
            rng: StdRng::seed_from_u64(0x100c),
        }
    }

    /// Bag-of-words candidates scoring at least as well as the worst
    /// covisible neighbor, filtered for temporal consistency over
    /// consecutive MKFs.
    pub fn detect_loop(&mut self, map: &SlamMap, mkf_id: u64) -> Option<u64> {
        if map.keyframe_count() < self.config.loop_min_mkfs {
            return None;
        }
        let mkf = map.keyframe(mkf_id).ok()?;
        let neighbors = map.covisible_neighbors(mkf_id);
        if neighbors.is_empty() {
            return None;
        }
        let s_min = neighbors
            .iter()
            .filter_map(|(id, _)| map.keyframe(*id).ok())
            .map(|n| bow_similarity(&mkf.bow, &n.bow))
            .fold(f64::INFINITY, f64::min);
        let excluded: BTreeSet<u64> = neighbors
            .iter()
            .map(|(id, _)| *id)
            .chain([mkf_id])
            .collect();

        let mut candidates: Vec<(u64, f64)> = map
            .keyframes()
            .filter(|k| !excluded.contains(&k.id))
            .map(|k| (k.id, bow_similarity(&mkf.bow, &k.bow)))
            .filter(|(_, s)| *s >= s_min)
            .collect();
        candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

        // Temporal consistency: a candidate's covisibility group must chain
        // with groups seen in the previous consecutive detections.
        let mut accepted: Option<u64> = None;
        let mut new_state: Vec<(BTreeSet<u64>, usize)> = Vec::new();
        for (candidate, _) in &candidates {
            let mut group: BTreeSet<u64> = map
                .covisible_neighbors(*candidate)
                .into_iter()
                .map(|(id, _)| id)
                .collect();
            group.insert(*candidate);
            let count = self
                .consistency
                .iter()
                .filter(|(prev, _)| !prev.is_disjoint(&group))
                .map(|(_, c)| *c)
                .max()
                .map(|c| c + 1)
                .unwrap_or(1);
            if count >= self.config.loop_consistency && accepted.is_none() {
                accepted = Some(*candidate);
            }
            new_state.push((group, count));
        }
        self.consistency = new_state;
        accepted
    }

    /// Rigid loop alignment and the full correction cascade. Returns the
    /// tracker pose correction on success, `None` when the candidate fails
    /// the inlier gate.
    pub fn close_loop(
        &mut self,
        map: &mut SlamMap,
        mkf_id: u64,
        candidate: u64,
    ) -> Result<Option<PoseCorrection>, PipelineError> {
        let Some((t_rel, pairs)) = self.align_loop(map, mkf_id, candidate)? else {
            return Ok(None);
        };
        let _ = pairs;

        // Corrected pose of the current MKF through the candidate's frame.
        let t_old = map.keyframe(mkf_id)?.pose;
        let t_corr = compose(&t_rel, &map.keyframe(candidate)?.pose);

        // Snapshot of all poses before any correction: essential-graph edge
        // measurements come from these.
        let pre_poses: BTreeMap<u64, SE3Pose> =
            map.keyframes().map(|k| (k.id, k.pose)).collect();

        // Rigidly correct the current MKF and its covisible neighborhood,
        // then the points they anchor.
        let mut local: BTreeSet<u64> = map
            .covisible_neighbors(mkf_id)
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        local.insert(mkf_id);
        let delta = compose(&inverse(&t_old), &t_corr);
        let mut corrected_points: BTreeSet<u64> = BTreeSet::new();
        for id in &local {
            let old = map.keyframe(*id)?.pose;
            let new = compose(&old, &delta);
            map.keyframe_mut(*id)?.pose = new;
            let pids: Vec<u64> = map.keyframe(*id)?.matched().map(|(_, _, p)| p).collect();
            for pid in pids {
                if !corrected_points.insert(pid) {
                    continue;
                }
                if let Ok(point) = map.point_mut(pid) {
                    let p_new =
                        transform_point(&inverse(&new), &transform_point(&old, &point.position));
                    point.position = p_new;
                }
            }
        }

        // Fuse duplicated geometry between the loop sides.
        self.fuse_loop_points(map, &local, candidate)?;

        map.add_loop_edge(mkf_id, candidate);

        // Essential-graph optimization: measurements from the pre-correction
        // relative poses, except the loop edge which carries the ICP result.
        let essential_cost_before;
        {
            let vertices: BTreeMap<u64, SE3Pose> =
                map.keyframes().map(|k| (k.id, k.pose)).collect();
            let mut edges: Vec<RelativePoseEdge> = Vec::new();
            for (a, b) in map.essential_edges() {
                if (a, b) == (mkf_id.min(candidate), mkf_id.max(candidate)) {
                    continue;
                }
                let (Some(pa), Some(pb)) = (pre_poses.get(&a), pre_poses.get(&b)) else {
                    continue;
                };
                edges.push(RelativePoseEdge::new(a, b, compose(pa, &inverse(pb))));
            }
            edges.push(RelativePoseEdge::new(mkf_id, candidate, t_rel));

            essential_cost_before = essential_cost(&vertices, &edges);
            let mut fixed: BTreeSet<u64> = BTreeSet::new();
            fixed.insert(candidate);
            if let Some(initial) = map.initial_mkf() {
                fixed.insert(initial);
            }
            let before_graph: BTreeMap<u64, SE3Pose> = vertices.clone();
            let (solved, report) = pose_graph_solve(
                &vertices,
                &edges,
                &fixed,
                &SolverConfig::global(),
            )?;
            debug_assert!(report.final_cost <= essential_cost_before + 1e-9);

            // Move keyframes and re-express points through their anchor
            // observer.
            for (id, pose) in &solved {
                if let Ok(mkf) = map.keyframe_mut(*id) {
                    mkf.pose = *pose;
                }
            }
            let pids: Vec<u64> = map.point_ids().collect();
            for pid in pids {
                let Ok(point) = map.point(pid) else { continue };
                let Some(anchor) = point.observations.keys().next().copied() else {
                    continue;
                };
                let (Some(before), Some(after)) = (before_graph.get(&anchor), solved.get(&anchor))
                else {
                    continue;
                };
                let position = point.position;
                let p_new = transform_point(&inverse(after), &transform_point(before, &position));
                map.point_mut(pid)?.position = p_new;
            }
        }

        // Global bundle adjustment over every keyframe and point.
        self.global_bundle_adjustment(map)?;

        let post = map.keyframe(mkf_id)?.pose;
        Ok(Some(PoseCorrection {
            pre: t_old,
            post,
        }))
    }

    /// Descriptor-based 3D-3D matching between the loop sides plus a rigid
    /// RANSAC alignment (scale fixed to 1: RGB-D supplies metric scale).
    /// Returns the transform carrying candidate-frame points into
    /// current-frame points.
    #[allow(clippy::type_complexity)]
    fn align_loop(
        &mut self,
        map: &SlamMap,
        mkf_id: u64,
        candidate: u64,
    ) -> Result<Option<(SE3Pose, Vec<(u64, u64)>)>, PipelineError> {
        let current_points = side_points(map, mkf_id);
        let mut old_side: BTreeSet<u64> = map
            .covisible_neighbors(candidate)
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        old_side.insert(candidate);
        let mut old_points: BTreeSet<u64> = BTreeSet::new();
        for id in &old_side {
            old_points.extend(side_points(map, *id));
        }
        old_points.retain(|pid| !current_points.contains(pid));

        let current: Vec<(u64, Vector3<f64>, BinaryDescriptor)> = current_points
            .iter()
            .filter_map(|pid| {
                let p = map.point(*pid).ok()?;
                Some((*pid, p.position, p.descriptor))
            })
            .collect();
        let old: Vec<(u64, Vector3<f64>, BinaryDescriptor)> = old_points
            .iter()
            .filter_map(|pid| {
                let p = map.point(*pid).ok()?;
                Some((*pid, p.position, p.descriptor))
            })
            .collect();
        if current.len() < self.config.loop_min_pairs || old.len() < self.config.loop_min_pairs {
            return Ok(None);
        }
        let matches = match_descriptors(
            &current.iter().map(|(_, _, d)| *d).collect::<Vec<_>>(),
            &old.iter().map(|(_, _, d)| *d).collect::<Vec<_>>(),
            self.config.match_max_hamming,
            self.config.match_ratio,
        );
        if matches.len() < self.config.loop_min_pairs {
            return Ok(None);
        }

        // Pairs expressed in the two rig frames, where drift cancels.
        let t_cur = map.keyframe(mkf_id)?.pose;
        let t_cand = map.keyframe(candidate)?.pose;
        let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = matches
            .iter()
            .map(|(i, j)| {
                (
                    transform_point(&t_cur, &current[*i].1),
                    transform_point(&t_cand, &old[*j].1),
                )
            })
            .collect();

        // RANSAC over minimal 4-point alignments.
        let mut best: Option<(usize, SE3Pose)> = None;
        for _ in 0..100 {
            let mut sample = BTreeSet::new();
            while sample.len() < 4 {
                sample.insert(self.rng.gen_range(0..pairs.len()));
            }
            let minimal: Vec<(Vector3<f64>, Vector3<f64>)> =
                sample.iter().map(|&i| pairs[i]).collect();
            let Ok(t) = icp_align(&minimal) else { continue };
            let inliers = pairs
                .iter()
                .filter(|(p, q)| (p - transform_point(&t, q)).norm() <= self.config.loop_inlier_dist)
                .count();
            if best.as_ref().map_or(true, |(b, _)| inliers > *b) {
                best = Some((inliers, t));
            }
        }
        let Some((count, rough)) = best else {
            return Ok(None);
        };
        if count < self.config.loop_min_pairs {
            return Ok(None);
        }
        let inlier_pairs: Vec<(Vector3<f64>, Vector3<f64>)> = pairs
            .iter()
            .filter(|(p, q)| (p - transform_point(&rough, q)).norm() <= self.config.loop_inlier_dist)
            .copied()
            .collect();
        let refined = icp_align(&inlier_pairs).unwrap_or(rough);
        let id_pairs: Vec<(u64, u64)> = matches
            .iter()
            .map(|(i, j)| (current[*i].0, old[*j].0))
            .collect();
        Ok(Some((refined, id_pairs)))
    }

    /// Projects old-side points into the corrected local keyframes; features
    /// bound to young duplicates are re-bound to the old points.
    fn fuse_loop_points(
        &self,
        map: &mut SlamMap,
        local: &BTreeSet<u64>,
        candidate: u64,
    ) -> Result<(), PipelineError> {
        let mut old_side: BTreeSet<u64> = map
            .covisible_neighbors(candidate)
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        old_side.insert(candidate);
        let mut old_points: BTreeSet<u64> = BTreeSet::new();
        for id in &old_side {
            old_points.extend(side_points(map, *id));
        }

        for mkf_id in local {
            let pose = map.keyframe(*mkf_id)?.pose;
            for pid in &old_points {
                let Ok(point) = map.point(*pid) else { continue };
                if point.observations.contains_key(mkf_id) {
                    continue;
                }
                let view = point.view();
                let descriptor = point.descriptor;
                let mut best: Option<(usize, usize, u32)> = None;
                for camera in 0..map.rig.camera_count() {
                    let Some(pix) = map.rig.in_frustum(camera, &pose, &view) else {
                        continue;
                    };
                    let mkf = map.keyframe(*mkf_id)?;
                    for (fi, feat) in mkf.features[camera].iter().enumerate() {
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
                let Some((camera, fi, _)) = best else { continue };
                let bound = map.keyframe(*mkf_id)?.matched_points[camera][fi];
                match bound {
                    Some(existing) if existing != *pid => {
                        // A young duplicate of old geometry: merge into the
                        // old point.
                        if !old_points.contains(&existing) {
                            map.replace_point(existing, *pid)?;
                        }
                    }
                    Some(_) => {}
                    None => {
                        map.add_observation(*pid, *mkf_id, camera, fi)?;
                        let _ = map.update_point_stats(*pid);
                    }
                }
            }
        }
        Ok(())
    }

    fn global_bundle_adjustment(&self, map: &mut SlamMap) -> Result<(), PipelineError> {
        let mut problem = Problem::new(map.rig.clone());
        let initial = map.initial_mkf();
        for mkf in map.keyframes() {
            problem.add_pose(mkf.id, mkf.pose, Some(mkf.id) == initial);
        }
        for point in map.points() {
            problem.add_point(point.id, point.position, false);
            for (observer, (camera, index)) in point.observations.iter() {
                let Some((observed, information)) =
                    feature_observation(map, *observer, *camera, *index)
                else {
                    continue;
                };
                let mut edge = ReprojectionEdge::new(*observer, *camera, point.id, observed);
                edge.information = information;
                problem.add_edge(edge)?;
            }
        }
        if problem.poses.is_empty() || problem.edges.is_empty() {
            return Ok(());
        }
        problem.solve(&self.config.solver_global)?;
        apply_problem_results(map, &problem);
        Ok(())
    }
}

fn side_points(map: &SlamMap, mkf_id: u64) -> BTreeSet<u64> {
    map.keyframe(mkf_id)
        .map(|k| k.matched().map(|(_, _, pid)| pid).collect())
        .unwrap_or_default()
}

/// Total squared residual of a relative-pose edge set; used to assert that
/// loop correction strictly decreases the essential-graph cost.
pub fn essential_cost(vertices: &BTreeMap<u64, SE3Pose>, edges: &[RelativePoseEdge]) -> f64 {
    edges
        .iter()
        .filter_map(|e| {
            let err = compose(
                &compose(&inverse(&e.measured), vertices.get(&e.from_id)?),
                &inverse(vertices.get(&e.to_id)?),
            );
            let xi = crate::geometry::log(&err).ok()?;
            let v = nalgebra::Vector6::from_row_slice(&xi.as_array());
            Some(0.5 * (v.transpose() * e.information * v)[(0, 0)])
        })
        .sum()
}
