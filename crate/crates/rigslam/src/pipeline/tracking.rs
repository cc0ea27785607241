//! The tracking stage: per-frame pose estimation against the map.
//!
//! Order of attempts: constant-velocity prediction with projection
//! matching, then bag-of-words matching against the reference MKF, then
//! relocalization. A successful initial pose is refined against the local
//! map. Tracking only reads the map; mutations (counter updates, keyframe
//! insertion) are returned to the caller.

use super::epnp::epnp_solve;
use super::{Frame, PipelineConfig, PipelineError, TrackingState, VelocityModel};
use crate::camera::MultiCamRig;
use crate::features::{hamming, BinaryDescriptor, Vocabulary};
use crate::geometry::{compose, inverse, transform_point, SE3Pose};
use crate::map::{MultiKeyFrame, SlamMap};
use crate::optimizer::{pose_only_ba, OptimizeError, PoseOnlyMatch};
use nalgebra::{Matrix3, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::collections::{BTreeMap, BTreeSet};

/// A frame feature matched to a map point.
#[derive(Clone, Copy, Debug)]
struct Match {
    camera: usize,
    feature: usize,
    point: u64,
}

/// Result of tracking one frame.
pub struct TrackOutcome {
    pub tracked: Option<TrackedFrame>,
    pub new_mkf: Option<MultiKeyFrame>,
    /// (point id, visible increment, found increment)
    pub counter_deltas: Vec<(u64, u32, u32)>,
    pub relocalized: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct TrackedFrame {
    pub pose: SE3Pose,
    pub ref_mkf: u64,
    pub rel_to_ref: SE3Pose,
}

/// Loop corrections move the world under the tracker; the tracker shifts its
/// cached poses by the same rigid change.
#[derive(Clone, Copy, Debug)]
pub struct PoseCorrection {
    pub pre: SE3Pose,
    pub post: SE3Pose,
}

struct LastFrame {
    pose: SE3Pose,
    matches: Vec<Match>,
}

/// Per-camera feature index sorted by u for radius queries.
struct FrameIndex {
    by_u: Vec<Vec<(f64, usize)>>,
}

impl FrameIndex {
    fn new(frame: &Frame) -> Self {
        let by_u = frame
            .features
            .iter()
            .map(|feats| {
                let mut v: Vec<(f64, usize)> =
                    feats.iter().enumerate().map(|(i, f)| (f.u, i)).collect();
                v.sort_by(|a, b| a.partial_cmp(b).expect("finite pixels"));
                v
            })
            .collect();
        Self { by_u }
    }

    /// Feature indices within a square window of half-size `radius` around
    /// (u, v), in ascending index order.
    fn window(&self, frame: &Frame, camera: usize, u: f64, v: f64, radius: f64) -> Vec<usize> {
        let list = &self.by_u[camera];
        let lo = list.partition_point(|(fu, _)| *fu < u - radius);
        let mut out: Vec<usize> = list[lo..]
            .iter()
            .take_while(|(fu, _)| *fu <= u + radius)
            .filter(|(_, i)| (frame.features[camera][*i].v - v).abs() <= radius)
            .map(|(_, i)| *i)
            .collect();
        out.sort_unstable();
        out
    }
}

pub struct Tracker {
    rig: MultiCamRig,
    vocab: Vocabulary,
    config: PipelineConfig,
    rng: StdRng,
    state: TrackingState,
    velocity: VelocityModel,
    last: Option<LastFrame>,
    last_frame_tracked: bool,
    reference_mkf: Option<u64>,
    frames_since_mkf: usize,
    next_mkf_id: u64,
    last_timestamp: f64,
}

impl Tracker {
    pub fn new(rig: MultiCamRig, vocab: Vocabulary, config: PipelineConfig, seed: u64) -> Self {
        Self {
            rig,
            vocab,
            config,
            rng: StdRng::seed_from_u64(seed),
            state: TrackingState::Uninitialized,
            velocity: VelocityModel::default(),
            last: None,
            last_frame_tracked: false,
            reference_mkf: None,
            frames_since_mkf: 0,
            next_mkf_id: 0,
            last_timestamp: f64::NEG_INFINITY,
        }
    }

    pub fn state(&self) -> TrackingState {
        self.state
    }

    pub fn on_keyframe_culled(&mut self, id: u64) {
        if self.reference_mkf == Some(id) {
            self.reference_mkf = None;
        }
    }

    pub fn apply_correction(&mut self, correction: &PoseCorrection) {
        let delta = compose(&inverse(&correction.pre), &correction.post);
        if let Some(last) = self.last.as_mut() {
            last.pose = compose(&last.pose, &delta);
        }
    }

    pub fn handle_frame(
        &mut self,
        map: &SlamMap,
        frame: &Frame,
    ) -> Result<TrackOutcome, PipelineError> {
        if frame.timestamp <= self.last_timestamp {
            return Err(PipelineError::BadFrame {
                index: 0,
                reason: format!("timestamp {} not increasing", frame.timestamp),
            });
        }
        self.last_timestamp = frame.timestamp;
        match self.state {
            TrackingState::Uninitialized => Ok(self.try_initialize(frame)),
            TrackingState::Tracking | TrackingState::Lost => self.track(map, frame),
        }
    }

    /// RGB-D initialization: enough depth-valid features make the first
    /// multi-keyframe at the identity pose. Map points are back-projected by
    /// the mapping stage from the inserted MKF's depth features.
    fn try_initialize(&mut self, frame: &Frame) -> TrackOutcome {
        let depth_valid: usize = frame
            .features
            .iter()
            .flatten()
            .filter(|f| f.depth.is_some())
            .count();
        if depth_valid < self.config.min_init_features {
            return TrackOutcome {
                tracked: None,
                new_mkf: None,
                counter_deltas: Vec::new(),
                relocalized: false,
            };
        }
        let mkf = MultiKeyFrame::new(
            self.next_mkf_id,
            frame.timestamp,
            SE3Pose::identity(),
            frame.features.clone(),
            &self.vocab,
        );
        let mkf_id = self.next_mkf_id;
        self.next_mkf_id += 1;
        self.state = TrackingState::Tracking;
        self.reference_mkf = Some(mkf_id);
        self.frames_since_mkf = 0;
        self.velocity = VelocityModel::default();
        self.last = Some(LastFrame {
            pose: SE3Pose::identity(),
            matches: Vec::new(),
        });
        self.last_frame_tracked = true;
        TrackOutcome {
            tracked: Some(TrackedFrame {
                pose: SE3Pose::identity(),
                ref_mkf: mkf_id,
                rel_to_ref: SE3Pose::identity(),
            }),
            new_mkf: Some(mkf),
            counter_deltas: Vec::new(),
            relocalized: false,
        }
    }

    fn track(&mut self, map: &SlamMap, frame: &Frame) -> Result<TrackOutcome, PipelineError> {
        let index = FrameIndex::new(frame);
        let mut relocalized = false;

        // Initial pose: motion model, then reference MKF, then relocalize.
        let mut initial: Option<(SE3Pose, Vec<Match>)> = None;
        if self.state == TrackingState::Tracking {
            initial = self.track_with_motion_model(map, frame, &index);
            if initial.is_none() {
                initial = self.track_reference(map, frame);
            }
        }
        if initial.is_none() {
            initial = self.relocalize(map, frame);
            relocalized = initial.is_some();
        }

        let Some((pose, matches)) = initial else {
            self.state = TrackingState::Lost;
            self.last_frame_tracked = false;
            self.velocity.valid = false;
            return Ok(TrackOutcome {
                tracked: None,
                new_mkf: None,
                counter_deltas: Vec::new(),
                relocalized: false,
            });
        };

        // Local-map refinement.
        let local = self.track_local_map(map, frame, &index, pose, matches)?;
        let Some(local) = local else {
            self.state = TrackingState::Lost;
            self.last_frame_tracked = false;
            self.velocity.valid = false;
            return Ok(TrackOutcome {
                tracked: None,
                new_mkf: None,
                counter_deltas: Vec::new(),
                relocalized: false,
            });
        };
        let LocalTrack {
            pose,
            matches,
            counter_deltas,
            reference,
        } = local;

        self.state = TrackingState::Tracking;
        self.reference_mkf = Some(reference);

        // Velocity model needs two consecutive tracked frames.
        if self.last_frame_tracked {
            if let Some(last) = &self.last {
                self.velocity = VelocityModel {
                    step: compose(&pose, &inverse(&last.pose)),
                    valid: true,
                };
            }
        } else {
            self.velocity.valid = false;
        }
        self.last = Some(LastFrame {
            pose,
            matches: matches.clone(),
        });
        self.last_frame_tracked = true;
        self.frames_since_mkf += 1;

        let new_mkf = if self.need_new_mkf(map, &matches, reference) {
            self.frames_since_mkf = 0;
            let mut mkf = MultiKeyFrame::new(
                self.next_mkf_id,
                frame.timestamp,
                pose,
                frame.features.clone(),
                &self.vocab,
            );
            for m in &matches {
                mkf.matched_points[m.camera][m.feature] = Some(m.point);
            }
            self.next_mkf_id += 1;
            Some(mkf)
        } else {
            None
        };

        let ref_pose = map
            .keyframe(reference)
            .map(|k| k.pose)
            .unwrap_or_else(|_| SE3Pose::identity());
        Ok(TrackOutcome {
            tracked: Some(TrackedFrame {
                pose,
                ref_mkf: reference,
                rel_to_ref: compose(&pose, &inverse(&ref_pose)),
            }),
            new_mkf,
            counter_deltas,
            relocalized,
        })
    }

    /// Projects the previous frame's points at the constant-velocity
    /// prediction and matches within a pixel window.
    fn track_with_motion_model(
        &mut self,
        map: &SlamMap,
        frame: &Frame,
        index: &FrameIndex,
    ) -> Option<(SE3Pose, Vec<Match>)> {
        let last = self.last.as_ref()?;
        if !self.velocity.valid || last.matches.is_empty() {
            return None;
        }
        let predicted = compose(&self.velocity.step, &last.pose);
        let mut used_features: BTreeSet<(usize, usize)> = BTreeSet::new();
        let mut matches = Vec::new();
        for m in &last.matches {
            let Ok(point) = map.point(m.point) else {
                continue;
            };
            let Ok(pix) = self.rig.world_to_pixel(m.camera, &predicted, &point.position) else {
                continue;
            };
            if let Some(feature) = self.best_feature_in_window(
                frame,
                index,
                m.camera,
                pix.u,
                pix.v,
                self.config.motion_search_radius_px,
                &point.descriptor,
                &used_features,
            ) {
                used_features.insert((m.camera, feature));
                matches.push(Match {
                    camera: m.camera,
                    feature,
                    point: m.point,
                });
            }
        }
        if matches.len() < self.config.min_motion_matches {
            return None;
        }
        self.optimize_matches(map, frame, predicted, matches)
    }

    /// Bag-of-words bucketed matching against the reference MKF's points.
    fn track_reference(&mut self, map: &SlamMap, frame: &Frame) -> Option<(SE3Pose, Vec<Match>)> {
        let reference = self
            .reference_mkf
            .filter(|id| map.has_keyframe(*id))
            .or(map.last_inserted())?;
        let mkf = map.keyframe(reference).ok()?;

        // Word buckets over the reference MKF's point-bearing features.
        let mut buckets: BTreeMap<u32, Vec<(u64, BinaryDescriptor)>> = BTreeMap::new();
        for (cam, idx, pid) in mkf.matched() {
            if map.point(pid).is_err() {
                continue;
            }
            let descriptor = mkf.feature(cam, idx).descriptor;
            buckets
                .entry(self.vocab.quantize(&descriptor))
                .or_default()
                .push((pid, descriptor));
        }
        if buckets.is_empty() {
            return None;
        }

        let mut best_for_point: BTreeMap<u64, (u32, usize, usize)> = BTreeMap::new();
        for (camera, feats) in frame.features.iter().enumerate() {
            for (fi, feat) in feats.iter().enumerate() {
                let word = self.vocab.quantize(&feat.descriptor);
                let Some(candidates) = buckets.get(&word) else {
                    continue;
                };
                let mut best: Option<(u64, u32)> = None;
                let mut second = u32::MAX;
                for (pid, desc) in candidates {
                    let d = hamming(&feat.descriptor, desc);
                    match best {
                        Some((_, bd)) if d < bd => {
                            second = bd;
                            best = Some((*pid, d));
                        }
                        Some(_) => second = second.min(d),
                        None => best = Some((*pid, d)),
                    }
                }
                let (pid, d) = best?;
                if d > self.config.match_max_hamming
                    || (d as f64) >= self.config.match_ratio * second as f64
                {
                    continue;
                }
                let entry = best_for_point.entry(pid).or_insert((u32::MAX, 0, 0));
                if d < entry.0 {
                    *entry = (d, camera, fi);
                }
            }
        }
        let mut used_features: BTreeSet<(usize, usize)> = BTreeSet::new();
        let matches: Vec<Match> = best_for_point
            .iter()
            .filter_map(|(pid, (_, camera, feature))| {
                used_features
                    .insert((*camera, *feature))
                    .then_some(Match {
                        camera: *camera,
                        feature: *feature,
                        point: *pid,
                    })
            })
            .collect();
        if matches.len() < self.config.min_reference_matches {
            return None;
        }
        let start = self.last.as_ref().map(|l| l.pose).unwrap_or(mkf.pose);
        self.optimize_matches(map, frame, start, matches)
    }

    /// Shared pose-only optimization: returns the refined pose and the
    /// inlier subset, or `None` when the solver rejects the configuration.
    fn optimize_matches(
        &self,
        map: &SlamMap,
        frame: &Frame,
        start: SE3Pose,
        matches: Vec<Match>,
    ) -> Option<(SE3Pose, Vec<Match>)> {
        let inputs: Vec<PoseOnlyMatch> = matches
            .iter()
            .map(|m| self.pose_match(map, frame, m))
            .collect::<Option<Vec<_>>>()?;
        match pose_only_ba(&self.rig, &start, &inputs, &self.config.solver_local) {
            Ok(out) => {
                let kept: Vec<Match> = matches
                    .into_iter()
                    .zip(out.inliers.iter())
                    .filter(|(_, inlier)| **inlier)
                    .map(|(m, _)| m)
                    .collect();
                if kept.len() < 10 {
                    None
                } else {
                    Some((out.pose, kept))
                }
            }
            Err(OptimizeError::TooFewMatches { .. } | OptimizeError::TooFewInliers { .. }) => None,
            Err(_) => None,
        }
    }

    fn pose_match(&self, map: &SlamMap, frame: &Frame, m: &Match) -> Option<PoseOnlyMatch> {
        let point = map.point(m.point).ok()?;
        let feat = &frame.features[m.camera][m.feature];
        let cam = self.rig.intrinsics(m.camera).ok()?;
        let (observed, information) = match feat.depth {
            Some(z) => (
                Vector3::new(feat.u, feat.v, feat.u - cam.fx * cam.baseline / z),
                Matrix3::identity(),
            ),
            // No depth: the virtual-stereo row carries no information.
            None => (
                Vector3::new(feat.u, feat.v, 0.0),
                Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)),
            ),
        };
        Some(PoseOnlyMatch {
            camera_index: m.camera,
            observed,
            point: point.position,
            information,
        })
    }

    fn best_feature_in_window(
        &self,
        frame: &Frame,
        index: &FrameIndex,
        camera: usize,
        u: f64,
        v: f64,
        radius: f64,
        descriptor: &BinaryDescriptor,
        used: &BTreeSet<(usize, usize)>,
    ) -> Option<usize> {
        let mut best: Option<(usize, u32)> = None;
        for fi in index.window(frame, camera, u, v, radius) {
            if used.contains(&(camera, fi)) {
                continue;
            }
            let d = hamming(descriptor, &frame.features[camera][fi].descriptor);
            if d <= self.config.match_max_hamming && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((fi, d));
            }
        }
        best.map(|(fi, _)| fi)
    }

    fn track_local_map(
        &mut self,
        map: &SlamMap,
        frame: &Frame,
        index: &FrameIndex,
        pose: SE3Pose,
        matches: Vec<Match>,
    ) -> Result<Option<LocalTrack>, PipelineError> {
        // Reference: the MKF sharing the most current points.
        let mut shared: BTreeMap<u64, u32> = BTreeMap::new();
        for m in &matches {
            if let Ok(point) = map.point(m.point) {
                for mkf_id in point.observations.keys() {
                    *shared.entry(*mkf_id).or_insert(0) += 1;
                }
            }
        }
        let reference = shared
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(id, _)| *id)
            .or(self.reference_mkf)
            .or(map.last_inserted());
        let Some(reference) = reference else {
            return Ok(None);
        };

        // Local map: points of the reference and its neighbors.
        let mut local_points: BTreeSet<u64> = BTreeSet::new();
        let mut local_mkfs = vec![reference];
        if let Ok(neigh) = map.neighbors(reference, map.config.neighbor_k) {
            local_mkfs.extend(neigh);
        }
        for mkf_id in &local_mkfs {
            if let Ok(mkf) = map.keyframe(*mkf_id) {
                local_points.extend(mkf.matched().map(|(_, _, pid)| pid));
            }
        }
        if local_points.is_empty() {
            return Ok(None);
        }

        let mut matched_points: BTreeSet<u64> = matches.iter().map(|m| m.point).collect();
        let mut used_features: BTreeSet<(usize, usize)> =
            matches.iter().map(|m| (m.camera, m.feature)).collect();
        let mut all_matches = matches;
        let mut visible: BTreeSet<u64> = matched_points.clone();

        let mut search = |pose: &SE3Pose,
                          radius: f64,
                          matched_points: &mut BTreeSet<u64>,
                          used_features: &mut BTreeSet<(usize, usize)>,
                          all_matches: &mut Vec<Match>,
                          visible: &mut BTreeSet<u64>| {
            for pid in local_points.iter() {
                if matched_points.contains(pid) {
                    continue;
                }
                let Ok(point) = map.point(*pid) else {
                    continue;
                };
                let view = point.view();
                let mut seen = false;
                for camera in 0..self.rig.camera_count() {
                    let Some(pix) = self.rig.in_frustum(camera, pose, &view) else {
                        continue;
                    };
                    seen = true;
                    if let Some(feature) = self.best_feature_in_window(
                        frame,
                        index,
                        camera,
                        pix.u,
                        pix.v,
                        radius,
                        &point.descriptor,
                        used_features,
                    ) {
                        used_features.insert((camera, feature));
                        matched_points.insert(*pid);
                        all_matches.push(Match {
                            camera,
                            feature,
                            point: *pid,
                        });
                        break;
                    }
                }
                if seen {
                    visible.insert(*pid);
                }
            }
        };

        // First pass at the wide radius, refine, then a tight re-search.
        search(
            &pose,
            self.config.local_search_radius_px,
            &mut matched_points,
            &mut used_features,
            &mut all_matches,
            &mut visible,
        );
        let Some((refined, kept)) = self.optimize_matches(map, frame, pose, all_matches.clone())
        else {
            return Ok(None);
        };
        all_matches = kept;
        matched_points = all_matches.iter().map(|m| m.point).collect();
        used_features = all_matches.iter().map(|m| (m.camera, m.feature)).collect();

        search(
            &refined,
            self.config.refine_search_radius_px,
            &mut matched_points,
            &mut used_features,
            &mut all_matches,
            &mut visible,
        );
        let Some((final_pose, final_matches)) =
            self.optimize_matches(map, frame, refined, all_matches)
        else {
            return Ok(None);
        };

        if final_matches.len() < self.config.track_inlier_gate {
            return Ok(None);
        }

        let inlier_points: BTreeSet<u64> = final_matches.iter().map(|m| m.point).collect();
        let counter_deltas: Vec<(u64, u32, u32)> = visible
            .iter()
            .map(|pid| {
                let found = u32::from(inlier_points.contains(pid));
                (*pid, 1, found)
            })
            .collect();

        Ok(Some(LocalTrack {
            pose: final_pose,
            matches: final_matches,
            counter_deltas,
            reference,
        }))
    }

    fn need_new_mkf(&self, map: &SlamMap, matches: &[Match], reference: u64) -> bool {
        let mut per_camera = vec![0usize; self.rig.camera_count()];
        for m in matches {
            per_camera[m.camera] += 1;
        }
        let total: usize = per_camera.iter().sum();
        let all_cameras_starved = per_camera
            .iter()
            .all(|c| *c < self.config.min_inliers_per_camera);
        let multi_total_starved =
            self.rig.camera_count() > 1 && total < self.config.min_inliers_total;

        let ref_count = map
            .keyframe(reference)
            .map(|k| k.matched_count())
            .unwrap_or(0);
        let ratio = if ref_count > 0 {
            total as f64 / ref_count as f64
        } else {
            0.0
        };
        let stale = self.frames_since_mkf >= self.config.min_frames_between_mkf
            && ratio < self.config.ref_tracked_ratio;
        stale || all_cameras_starved || multi_total_starved
    }

    /// Place recognition over all MKFs plus minimal-solver RANSAC.
    fn relocalize(&mut self, map: &SlamMap, frame: &Frame) -> Option<(SE3Pose, Vec<Match>)> {
        if map.keyframe_count() == 0 {
            return None;
        }
        let descriptors: Vec<BinaryDescriptor> = frame
            .features
            .iter()
            .flatten()
            .map(|f| f.descriptor)
            .collect();
        let frame_bow = self.vocab.bow_vector(&descriptors);
        let mut ranked: Vec<(u64, f64)> = map
            .keyframes()
            .map(|k| (k.id, crate::features::bow_similarity(&frame_bow, &k.bow)))
            .filter(|(_, s)| *s > 0.0)
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

        for (candidate, _) in ranked.into_iter().take(5) {
            if let Some(result) = self.relocalize_against(map, frame, candidate) {
                return Some(result);
            }
        }
        None
    }

    fn relocalize_against(
        &mut self,
        map: &SlamMap,
        frame: &Frame,
        candidate: u64,
    ) -> Option<(SE3Pose, Vec<Match>)> {
        let mkf = map.keyframe(candidate).ok()?;
        let mut buckets: BTreeMap<u32, Vec<(u64, BinaryDescriptor)>> = BTreeMap::new();
        for (cam, idx, pid) in mkf.matched() {
            if map.point(pid).is_err() {
                continue;
            }
            let descriptor = mkf.feature(cam, idx).descriptor;
            buckets
                .entry(self.vocab.quantize(&descriptor))
                .or_default()
                .push((pid, descriptor));
        }

        let mut best_for_point: BTreeMap<u64, (u32, usize, usize)> = BTreeMap::new();
        for (camera, feats) in frame.features.iter().enumerate() {
            for (fi, feat) in feats.iter().enumerate() {
                let word = self.vocab.quantize(&feat.descriptor);
                let Some(candidates) = buckets.get(&word) else {
                    continue;
                };
                let mut best: Option<(u64, u32)> = None;
                let mut second = u32::MAX;
                for (pid, desc) in candidates {
                    let d = hamming(&feat.descriptor, desc);
                    match best {
                        Some((_, bd)) if d < bd => {
                            second = bd;
                            best = Some((*pid, d));
                        }
                        Some(_) => second = second.min(d),
                        None => best = Some((*pid, d)),
                    }
                }
                let (pid, d) = best?;
                if d > self.config.match_max_hamming
                    || (d as f64) >= self.config.match_ratio * second as f64
                {
                    continue;
                }
                let entry = best_for_point.entry(pid).or_insert((u32::MAX, 0, 0));
                if d < entry.0 {
                    *entry = (d, camera, fi);
                }
            }
        }
        let mut used: BTreeSet<(usize, usize)> = BTreeSet::new();
        let matches: Vec<Match> = best_for_point
            .iter()
            .filter_map(|(pid, (_, camera, feature))| {
                used.insert((*camera, *feature)).then_some(Match {
                    camera: *camera,
                    feature: *feature,
                    point: *pid,
                })
            })
            .collect();
        if matches.len() < self.config.reloc_min_inliers {
            return None;
        }

        // Per-camera match lists for the minimal solvers.
        let mut per_camera: Vec<Vec<usize>> = vec![Vec::new(); self.rig.camera_count()];
        for (i, m) in matches.iter().enumerate() {
            per_camera[m.camera].push(i);
        }
        let eligible: Vec<usize> = (0..self.rig.camera_count())
            .filter(|c| per_camera[*c].len() >= 6)
            .collect();
        if eligible.is_empty() {
            return None;
        }

        let positions: Vec<Vector3<f64>> = matches
            .iter()
            .map(|m| map.point(m.point).map(|p| p.position).unwrap_or_default())
            .collect();

        let mut best_hypothesis: Option<(usize, SE3Pose)> = None;
        for iter in 0..self.config.ransac_iterations {
            let camera = eligible[iter % eligible.len()];
            let pool = &per_camera[camera];
            let cam = self.rig.intrinsics(camera).ok()?;
            let extrinsic = self.rig.extrinsic(camera).ok()?;

            let hypothesis = if iter % 2 == 1 {
                // 3D-3D closed form on four depth-valid matches.
                let with_depth: Vec<usize> = pool
                    .iter()
                    .copied()
                    .filter(|i| frame.features[camera][matches[*i].feature].depth.is_some())
                    .collect();
                if with_depth.len() < 4 {
                    continue;
                }
                let sample = sample_indices(&mut self.rng, &with_depth, 4);
                let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = sample
                    .iter()
                    .map(|&i| {
                        let feat = &frame.features[camera][matches[i].feature];
                        let p_cam = cam
                            .back_project(feat.u, feat.v, feat.depth.expect("filtered"))
                            .expect("depth in range");
                        (p_cam, positions[i])
                    })
                    .collect();
                crate::calibration::icp_align(&pairs).ok()
            } else {
                let sample = sample_indices(&mut self.rng, pool, 6);
                let world: Vec<Vector3<f64>> = sample.iter().map(|&i| positions[i]).collect();
                let pixels: Vec<(f64, f64)> = sample
                    .iter()
                    .map(|&i| {
                        let feat = &frame.features[camera][matches[i].feature];
                        (feat.u, feat.v)
                    })
                    .collect();
                epnp_solve(cam, &world, &pixels)
            };
            let Some(t_ci) = hypothesis else {
                continue;
            };
            // Rig pose from the camera hypothesis: T_sw = T_cis^-1 * T_ci.
            let t_sw = compose(&inverse(extrinsic), &t_ci);

            // Count pixel inliers across all cameras.
            let mut inliers = 0usize;
            for (m, p_w) in matches.iter().zip(&positions) {
                let Ok(cam_pose) = self.rig.camera_pose(m.camera, &t_sw) else {
                    continue;
                };
                let p_c = transform_point(&cam_pose, p_w);
                if p_c.z <= 0.0 {
                    continue;
                }
                let intr = self.rig.intrinsics(m.camera).expect("valid index");
                let pix = intr.project_unchecked(&p_c);
                let feat = &frame.features[m.camera][m.feature];
                let du = pix.u - feat.u;
                let dv = pix.v - feat.v;
                if du * du + dv * dv <= self.config.ransac_inlier_chi2 {
                    inliers += 1;
                }
            }
            if best_hypothesis
                .as_ref()
                .map_or(true, |(best, _)| inliers > *best)
            {
                best_hypothesis = Some((inliers, t_sw));
            }
        }

        let (count, t_sw) = best_hypothesis?;
        if count < self.config.reloc_min_inliers {
            return None;
        }
        let (pose, kept) = self.optimize_matches(map, frame, t_sw, matches)?;
        if kept.len() < self.config.reloc_min_inliers {
            return None;
        }
        Some((pose, kept))
    }
}

struct LocalTrack {
    pose: SE3Pose,
    matches: Vec<Match>,
    counter_deltas: Vec<(u64, u32, u32)>,
    reference: u64,
}

fn sample_indices(rng: &mut StdRng, pool: &[usize], k: usize) -> Vec<usize> {
    debug_assert!(pool.len() >= k);
    let mut chosen = BTreeSet::new();
    while chosen.len() < k {
        chosen.insert(pool[rng.gen_range(0..pool.len())]);
    }
    chosen.into_iter().collect()
}
