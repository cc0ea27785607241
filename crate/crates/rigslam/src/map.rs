//! The persistent world model: map points, multi-keyframes, and the
//! covisibility graph.
//!
//! A multi-keyframe (MKF) stores one feature set per rig camera plus a single
//! rig pose. Covisibility edges connect MKFs that share more than
//! `w_min` map points; a spanning tree plus loop edges plus strong edges
//! forms the essential graph used for loop correction.
//!
//! All containers are ordered (BTree) and ties break by ascending id so that
//! every operation is deterministic.

use crate::camera::{MultiCamRig, PointView};
use crate::features::{hamming, BinaryDescriptor, BowVector, FeatureObservation, Vocabulary};
use crate::geometry::{inverse, SE3Pose};
use nalgebra::Vector3;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("duplicate multi-keyframe id {0}")]
    DuplicateKeyFrame(u64),
    #[error("multi-keyframe timestamp {timestamp} not after previous {previous}")]
    NonMonotonicTimestamp { timestamp: f64, previous: f64 },
    #[error("multi-keyframe {0} not found")]
    UnknownKeyFrame(u64),
    #[error("map point {0} not found")]
    UnknownPoint(u64),
    #[error("map point {0} has no observations")]
    NoObservations(u64),
    #[error("feature list count {got} does not match rig camera count {expected}")]
    CameraCountMismatch { got: usize, expected: usize },
}

/// Thresholds for covisibility and culling. Defaults follow the keyframe-SLAM
/// lineage this engine belongs to.
#[derive(Clone, Copy, Debug, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MapConfig {
    /// Covisibility edges require strictly more shared points than this.
    pub w_min: u32,
    /// Edges at or above this weight join the essential graph.
    pub strong_edge_weight: u32,
    /// Default neighbor count returned by [`SlamMap::neighbors`].
    pub neighbor_k: usize,
    /// Points must be found in at least this fraction of the frames that
    /// predicted them visible.
    pub min_found_ratio: f64,
    /// After two MKFs have elapsed, points need at least this many observers.
    pub min_observers: usize,
    /// New points are subject to culling while fewer than this many MKFs
    /// have been inserted since their creation.
    pub recent_window: u64,
    /// Keyframes are redundant when this fraction of their points is seen by
    /// at least `min_observers` other MKFs.
    pub redundancy_ratio: f64,
    /// Margin factors applied to the min/max observation distances.
    pub d_min_factor: f64,
    pub d_max_factor: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            w_min: 20,
            strong_edge_weight: 100,
            neighbor_k: 20,
            min_found_ratio: 0.25,
            min_observers: 3,
            recent_window: 3,
            redundancy_ratio: 0.9,
            d_min_factor: 0.8,
            d_max_factor: 1.2,
        }
    }
}

/// A 3D landmark with its descriptor, observation-distance bounds, and mean
/// viewing direction.
#[derive(Clone, Debug)]
pub struct MapPoint {
    pub id: u64,
    pub position: Vector3<f64>,
    pub descriptor: BinaryDescriptor,
    pub d_min: f64,
    pub d_max: f64,
    pub normal: Vector3<f64>,
    /// MKF id -> (camera index, feature index). One observation per MKF.
    pub observations: BTreeMap<u64, (usize, usize)>,
    pub visible_count: u32,
    pub found_count: u32,
    /// Number of MKFs that existed when the point was created.
    pub created_seq: u64,
}

impl MapPoint {
    pub fn view(&self) -> PointView {
        PointView {
            position: self.position,
            normal: self.normal,
            d_min: self.d_min,
            d_max: self.d_max,
        }
    }

    pub fn found_ratio(&self) -> f64 {
        if self.visible_count == 0 {
            1.0
        } else {
            self.found_count as f64 / self.visible_count as f64
        }
    }
}

/// A keyframe of the rig: one pose, per-camera features, a bag-of-words
/// signature, and per-feature map-point associations.
#[derive(Clone, Debug)]
pub struct MultiKeyFrame {
    pub id: u64,
    pub timestamp: f64,
    pub pose: SE3Pose,
    pub features: Vec<Vec<FeatureObservation>>,
    pub bow: BowVector,
    pub matched_points: Vec<Vec<Option<u64>>>,
}

impl MultiKeyFrame {
    pub fn new(
        id: u64,
        timestamp: f64,
        pose: SE3Pose,
        features: Vec<Vec<FeatureObservation>>,
        vocab: &Vocabulary,
    ) -> Self {
        let all: Vec<BinaryDescriptor> = features
            .iter()
            .flat_map(|cam| cam.iter().map(|f| f.descriptor))
            .collect();
        let bow = vocab.bow_vector(&all);
        let matched_points = features.iter().map(|cam| vec![None; cam.len()]).collect();
        Self {
            id,
            timestamp,
            pose,
            features,
            bow,
            matched_points,
        }
    }

    pub fn feature(&self, camera: usize, index: usize) -> &FeatureObservation {
        &self.features[camera][index]
    }

    /// Iterator over (camera, feature index, point id) for associated features.
    pub fn matched(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.matched_points.iter().enumerate().flat_map(|(c, v)| {
            v.iter()
                .enumerate()
                .filter_map(move |(i, p)| p.map(|id| (c, i, id)))
        })
    }

    pub fn matched_count(&self) -> usize {
        self.matched().count()
    }
}

/// Record of a culled keyframe, used by the pipeline to re-anchor
/// trajectory segments onto the spanning-tree parent.
#[derive(Clone, Copy, Debug)]
pub struct CulledKeyFrame {
    pub id: u64,
    pub parent: u64,
    pub pose: SE3Pose,
    pub parent_pose: SE3Pose,
}

#[derive(Clone, Debug, Default)]
struct CovisibilityGraph {
    /// Shared-point counts for all node pairs with weight > 0.
    weights: BTreeMap<u64, BTreeMap<u64, u32>>,
    /// Spanning-tree parent (None for the root).
    parents: BTreeMap<u64, Option<u64>>,
    loop_edges: BTreeSet<(u64, u64)>,
}

impl CovisibilityGraph {
    fn add_node(&mut self, id: u64) {
        self.weights.entry(id).or_default();
        self.parents.entry(id).or_insert(None);
    }

    fn remove_node(&mut self, id: u64) {
        if let Some(neigh) = self.weights.remove(&id) {
            for other in neigh.keys() {
                if let Some(w) = self.weights.get_mut(other) {
                    w.remove(&id);
                }
            }
        }
        self.parents.remove(&id);
        self.loop_edges.retain(|(a, b)| *a != id && *b != id);
    }

    fn bump(&mut self, a: u64, b: u64, delta: i64) {
        if a == b {
            return;
        }
        for (x, y) in [(a, b), (b, a)] {
            let entry = self.weights.entry(x).or_default().entry(y).or_insert(0);
            let next = (*entry as i64 + delta).max(0) as u32;
            if next == 0 {
                self.weights.get_mut(&x).unwrap().remove(&y);
            } else {
                *entry = next;
            }
        }
    }

    fn weight(&self, a: u64, b: u64) -> u32 {
        self.weights
            .get(&a)
            .and_then(|m| m.get(&b))
            .copied()
            .unwrap_or(0)
    }
}

/// The shared world model.
#[derive(Clone, Debug)]
pub struct SlamMap {
    pub rig: MultiCamRig,
    pub config: MapConfig,
    points: BTreeMap<u64, MapPoint>,
    keyframes: BTreeMap<u64, MultiKeyFrame>,
    graph: CovisibilityGraph,
    next_point_id: u64,
    /// Total number of MKFs ever inserted (culling does not decrease it).
    inserted_seq: u64,
    initial_mkf: Option<u64>,
    last_inserted: Option<u64>,
}

impl SlamMap {
    pub fn new(rig: MultiCamRig, config: MapConfig) -> Self {
        Self {
            rig,
            config,
            points: BTreeMap::new(),
            keyframes: BTreeMap::new(),
            graph: CovisibilityGraph::default(),
            next_point_id: 0,
            inserted_seq: 0,
            initial_mkf: None,
            last_inserted: None,
        }
    }

    pub fn point_count(&self) -> usize {
        self.points.len()
    }

    pub fn keyframe_count(&self) -> usize {
        self.keyframes.len()
    }

    pub fn inserted_seq(&self) -> u64 {
        self.inserted_seq
    }

    pub fn initial_mkf(&self) -> Option<u64> {
        self.initial_mkf
    }

    pub fn last_inserted(&self) -> Option<u64> {
        self.last_inserted
    }

    pub fn point(&self, id: u64) -> Result<&MapPoint, MapError> {
        self.points.get(&id).ok_or(MapError::UnknownPoint(id))
    }

    pub fn point_mut(&mut self, id: u64) -> Result<&mut MapPoint, MapError> {
        self.points.get_mut(&id).ok_or(MapError::UnknownPoint(id))
    }

    pub fn keyframe(&self, id: u64) -> Result<&MultiKeyFrame, MapError> {
        self.keyframes.get(&id).ok_or(MapError::UnknownKeyFrame(id))
    }

    pub fn keyframe_mut(&mut self, id: u64) -> Result<&mut MultiKeyFrame, MapError> {
        self.keyframes
            .get_mut(&id)
            .ok_or(MapError::UnknownKeyFrame(id))
    }

    pub fn has_keyframe(&self, id: u64) -> bool {
        self.keyframes.contains_key(&id)
    }

    pub fn point_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.points.keys().copied()
    }

    pub fn keyframe_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.keyframes.keys().copied()
    }

    pub fn keyframes(&self) -> impl Iterator<Item = &MultiKeyFrame> {
        self.keyframes.values()
    }

    pub fn points(&self) -> impl Iterator<Item = &MapPoint> {
        self.points.values()
    }

    pub fn parent(&self, id: u64) -> Option<u64> {
        self.graph.parents.get(&id).copied().flatten()
    }

    pub fn covisibility_weight(&self, a: u64, b: u64) -> u32 {
        self.graph.weight(a, b)
    }

    pub fn add_loop_edge(&mut self, a: u64, b: u64) {
        let key = (a.min(b), a.max(b));
        self.graph.loop_edges.insert(key);
    }

    pub fn loop_edges(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.graph.loop_edges.iter().copied()
    }

    /// Inserts a new MKF, registering its pre-filled point associations and
    /// recomputing covisibility edges and the spanning-tree parent.
    pub fn insert_keyframe(&mut self, mut mkf: MultiKeyFrame) -> Result<(), MapError> {
        if self.keyframes.contains_key(&mkf.id) {
            return Err(MapError::DuplicateKeyFrame(mkf.id));
        }
        if let Some(last) = self.last_inserted {
            let previous = self.keyframes[&last].timestamp;
            if mkf.timestamp <= previous {
                return Err(MapError::NonMonotonicTimestamp {
                    timestamp: mkf.timestamp,
                    previous,
                });
            }
        }
        if mkf.features.len() != self.rig.camera_count() {
            return Err(MapError::CameraCountMismatch {
                got: mkf.features.len(),
                expected: self.rig.camera_count(),
            });
        }

        let id = mkf.id;
        // A point may be referenced at most once per MKF; keep the first
        // association in (camera, feature) order.
        let mut seen: BTreeSet<u64> = BTreeSet::new();
        let mut links: Vec<(usize, usize, u64)> = Vec::new();
        for (cam, slots) in mkf.matched_points.iter_mut().enumerate() {
            for (idx, slot) in slots.iter_mut().enumerate() {
                if let Some(pid) = *slot {
                    if !self.points.contains_key(&pid) || !seen.insert(pid) {
                        *slot = None;
                    } else {
                        links.push((cam, idx, pid));
                    }
                }
            }
        }

        self.graph.add_node(id);
        self.keyframes.insert(id, mkf);
        for (cam, idx, pid) in links {
            self.link_observation(pid, id, cam, idx);
        }

        // Spanning-tree parent: strongest covisible neighbor, falling back to
        // the previously inserted MKF.
        let parent = self
            .covisible_neighbors(id)
            .into_iter()
            .next()
            .map(|(other, _)| other)
            .or(self.last_inserted);
        self.graph.parents.insert(id, parent);

        if self.initial_mkf.is_none() {
            self.initial_mkf = Some(id);
        }
        self.last_inserted = Some(id);
        self.inserted_seq += 1;
        Ok(())
    }

    /// Registers an observation of `point` by feature (camera, idx) of MKF
    /// `mkf_id`, updating both directions and the covisibility weights.
    pub fn add_observation(
        &mut self,
        point_id: u64,
        mkf_id: u64,
        camera: usize,
        index: usize,
    ) -> Result<(), MapError> {
        if !self.points.contains_key(&point_id) {
            return Err(MapError::UnknownPoint(point_id));
        }
        if !self.keyframes.contains_key(&mkf_id) {
            return Err(MapError::UnknownKeyFrame(mkf_id));
        }
        if self.points[&point_id].observations.contains_key(&mkf_id) {
            return Ok(()); // already observed by this MKF
        }
        if let Some(old) = self.keyframes[&mkf_id].matched_points[camera][index] {
            if old != point_id {
                // The feature slot is being re-bound; drop the old link.
                self.unlink_observation(old, mkf_id);
            }
        }
        self.link_observation(point_id, mkf_id, camera, index);
        Ok(())
    }

    fn link_observation(&mut self, point_id: u64, mkf_id: u64, camera: usize, index: usize) {
        // Evict any other point bound to this feature slot.
        if let Some(mkf) = self.keyframes.get(&mkf_id) {
            if let Some(old) = mkf.matched_points[camera][index] {
                if old != point_id {
                    self.unlink_observation(old, mkf_id);
                }
            }
        }
        let point = self.points.get_mut(&point_id).expect("point exists");
        let others: Vec<u64> = point.observations.keys().copied().collect();
        point.observations.insert(mkf_id, (camera, index));
        if let Some(mkf) = self.keyframes.get_mut(&mkf_id) {
            mkf.matched_points[camera][index] = Some(point_id);
        }
        for other in others {
            self.graph.bump(mkf_id, other, 1);
        }
    }

    fn unlink_observation(&mut self, point_id: u64, mkf_id: u64) {
        let Some(point) = self.points.get_mut(&point_id) else {
            return;
        };
        let Some((camera, index)) = point.observations.remove(&mkf_id) else {
            return;
        };
        let others: Vec<u64> = point.observations.keys().copied().collect();
        if let Some(mkf) = self.keyframes.get_mut(&mkf_id) {
            if mkf.matched_points[camera][index] == Some(point_id) {
                mkf.matched_points[camera][index] = None;
            }
        }
        for other in others {
            self.graph.bump(mkf_id, other, -1);
        }
    }

    /// Creates a new map point observed by one feature. The viewing normal
    /// and distance bounds are derived from that observation.
    pub fn create_point(
        &mut self,
        position: Vector3<f64>,
        descriptor: BinaryDescriptor,
        mkf_id: u64,
        camera: usize,
        index: usize,
    ) -> Result<u64, MapError> {
        let mkf = self.keyframe(mkf_id)?;
        let center = self
            .rig
            .optical_center(camera, &mkf.pose)
            .expect("camera index validated by MKF");
        let ray = position - center;
        let dist = ray.norm().max(1e-12);
        let id = self.next_point_id;
        self.next_point_id += 1;
        let point = MapPoint {
            id,
            position,
            descriptor,
            d_min: dist * self.config.d_min_factor,
            d_max: dist * self.config.d_max_factor,
            normal: ray / dist,
            observations: BTreeMap::new(),
            visible_count: 1,
            found_count: 1,
            created_seq: self.inserted_seq,
        };
        self.points.insert(id, point);
        self.link_observation(id, mkf_id, camera, index);
        Ok(id)
    }

    /// Covisible neighbors of `id` (weight > w_min), strongest first, ties by
    /// ascending id.
    pub fn covisible_neighbors(&self, id: u64) -> Vec<(u64, u32)> {
        let mut out: Vec<(u64, u32)> = self
            .graph
            .weights
            .get(&id)
            .map(|m| {
                m.iter()
                    .filter(|(_, w)| **w > self.config.w_min)
                    .map(|(k, w)| (*k, *w))
                    .collect()
            })
            .unwrap_or_default();
        out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        out
    }

    /// Top-k covisible MKFs plus, per camera whose covisibility is otherwise
    /// unrepresented, the single partner sharing the most points through that
    /// camera.
    pub fn neighbors(&self, id: u64, k: usize) -> Result<Vec<u64>, MapError> {
        let mkf = self.keyframe(id)?;
        let ranked = self.covisible_neighbors(id);
        let mut selected: Vec<u64> = ranked.iter().take(k).map(|(id, _)| *id).collect();
        let selected_set: BTreeSet<u64> = selected.iter().copied().collect();
        let covisible_set: BTreeSet<u64> = ranked.iter().map(|(id, _)| *id).collect();

        for camera in 0..self.rig.camera_count() {
            // Shared-point counts through this camera of `mkf`.
            let mut per_cam: BTreeMap<u64, u32> = BTreeMap::new();
            for slot in mkf.matched_points[camera].iter() {
                let Some(pid) = slot else { continue };
                let Ok(point) = self.point(*pid) else { continue };
                for other in point.observations.keys() {
                    if *other != id && covisible_set.contains(other) {
                        *per_cam.entry(*other).or_insert(0) += 1;
                    }
                }
            }
            if per_cam.is_empty() || per_cam.keys().any(|m| selected_set.contains(m)) {
                continue;
            }
            let best = per_cam
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(id, _)| *id)
                .expect("non-empty");
            if !selected.contains(&best) {
                selected.push(best);
            }
        }
        Ok(selected)
    }

    /// Recomputes a point's representative descriptor, mean viewing direction,
    /// and distance bounds from its current observations.
    pub fn update_point_stats(&mut self, point_id: u64) -> Result<(), MapError> {
        let point = self.point(point_id)?;
        if point.observations.is_empty() {
            return Err(MapError::NoObservations(point_id));
        }
        let descriptors: Vec<BinaryDescriptor> = point
            .observations
            .iter()
            .map(|(mkf_id, (cam, idx))| self.keyframes[mkf_id].feature(*cam, *idx).descriptor)
            .collect();
        // Representative: minimum summed Hamming distance, ties to the first
        // (observations iterate by ascending MKF id).
        let mut best = (u64::MAX, 0usize);
        for (i, d) in descriptors.iter().enumerate() {
            let total: u64 = descriptors.iter().map(|o| hamming(d, o) as u64).sum();
            if total < best.0 {
                best = (total, i);
            }
        }
        let representative = descriptors[best.1];

        let position = point.position;
        let mut normal_sum = Vector3::zeros();
        let mut d_lo = f64::INFINITY;
        let mut d_hi = 0.0_f64;
        for (mkf_id, (cam, _)) in point.observations.iter() {
            let pose = self.keyframes[mkf_id].pose;
            let center = self
                .rig
                .optical_center(*cam, &pose)
                .expect("valid camera index");
            let ray = position - center;
            let dist = ray.norm();
            if dist > 0.0 {
                normal_sum += ray / dist;
                d_lo = d_lo.min(dist);
                d_hi = d_hi.max(dist);
            }
        }
        let point = self.points.get_mut(&point_id).expect("point exists");
        point.descriptor = representative;
        // Guard against opposing rays cancelling out; keep the previous
        // normal in that degenerate case.
        if normal_sum.norm() > 1e-9 {
            point.normal = normal_sum.normalize();
        }
        if d_lo.is_finite() && d_hi > 0.0 {
            point.d_min = d_lo * self.config.d_min_factor;
            point.d_max = d_hi * self.config.d_max_factor;
        }
        Ok(())
    }

    pub fn remove_point(&mut self, point_id: u64) {
        let Some(point) = self.points.get(&point_id) else {
            return;
        };
        let observers: Vec<u64> = point.observations.keys().copied().collect();
        for mkf_id in observers {
            self.unlink_observation(point_id, mkf_id);
        }
        self.points.remove(&point_id);
    }

    /// Removes recently created points failing the quality gates. Returns the
    /// removed ids.
    pub fn cull_recent_points(&mut self) -> Vec<u64> {
        let window = self.config.recent_window;
        let mut removed = Vec::new();
        let candidates: Vec<u64> = self
            .points
            .values()
            .filter(|p| self.inserted_seq - p.created_seq < window)
            .map(|p| p.id)
            .collect();
        for id in candidates {
            let point = &self.points[&id];
            let elapsed = self.inserted_seq - point.created_seq;
            let bad_ratio = point.found_ratio() < self.config.min_found_ratio;
            let too_few_observers =
                elapsed >= 2 && point.observations.len() < self.config.min_observers;
            if bad_ratio || too_few_observers {
                self.remove_point(id);
                removed.push(id);
            }
        }
        removed
    }

    /// Removes local MKFs whose matched points are overwhelmingly seen
    /// elsewhere. The initial MKF is never removed. Returns one record per
    /// culled keyframe for trajectory re-anchoring.
    pub fn cull_redundant_keyframes(&mut self, local: &[u64]) -> Vec<CulledKeyFrame> {
        let mut culled = Vec::new();
        for &id in local {
            if Some(id) == self.initial_mkf || !self.keyframes.contains_key(&id) {
                continue;
            }
            let mkf = &self.keyframes[&id];
            let matched: Vec<u64> = mkf.matched().map(|(_, _, pid)| pid).collect();
            if matched.is_empty() {
                continue;
            }
            let redundant = matched
                .iter()
                .filter(|pid| {
                    self.points
                        .get(pid)
                        .map(|p| {
                            p.observations.keys().filter(|o| **o != id).count()
                                >= self.config.min_observers
                        })
                        .unwrap_or(false)
                })
                .count();
            if (redundant as f64) < self.config.redundancy_ratio * matched.len() as f64 {
                continue;
            }
            if let Some(record) = self.remove_keyframe(id) {
                culled.push(record);
            }
        }
        culled
    }

    /// Detaches and deletes a keyframe: observations unlinked, orphaned
    /// points deleted, children re-parented onto this node's parent.
    fn remove_keyframe(&mut self, id: u64) -> Option<CulledKeyFrame> {
        let mkf = self.keyframes.get(&id)?;
        let pose = mkf.pose;
        let parent = self.parent(id)?; // the initial MKF (no parent) is never culled
        let parent_pose = self.keyframes[&parent].pose;
        let matched: Vec<u64> = mkf.matched().map(|(_, _, pid)| pid).collect();
        for pid in matched {
            self.unlink_observation(pid, id);
            if let Some(p) = self.points.get(&pid) {
                if p.observations.is_empty() {
                    self.points.remove(&pid);
                } else {
                    let _ = self.update_point_stats(pid);
                }
            }
        }
        let children: Vec<u64> = self
            .graph
            .parents
            .iter()
            .filter(|(_, p)| **p == Some(id))
            .map(|(c, _)| *c)
            .collect();
        for child in children {
            self.graph.parents.insert(child, Some(parent));
        }
        self.graph.remove_node(id);
        self.keyframes.remove(&id);
        if self.last_inserted == Some(id) {
            self.last_inserted = self.keyframes.keys().next_back().copied();
        }
        Some(CulledKeyFrame {
            id,
            parent,
            pose,
            parent_pose,
        })
    }

    /// Replaces point `from` with point `into`: observations are transferred
    /// (skipping MKFs that already observe `into`) and `from` is deleted.
    pub fn replace_point(&mut self, from: u64, into: u64) -> Result<(), MapError> {
        if from == into {
            return Ok(());
        }
        if !self.points.contains_key(&into) {
            return Err(MapError::UnknownPoint(into));
        }
        let point = self.point(from)?;
        let observations: Vec<(u64, (usize, usize))> =
            point.observations.iter().map(|(k, v)| (*k, *v)).collect();
        let (visible, found) = (point.visible_count, point.found_count);
        for (mkf_id, (cam, idx)) in observations {
            self.unlink_observation(from, mkf_id);
            if !self.points[&into].observations.contains_key(&mkf_id) {
                self.link_observation(into, mkf_id, cam, idx);
            }
        }
        self.points.remove(&from);
        let target = self.points.get_mut(&into).expect("target exists");
        target.visible_count += visible;
        target.found_count += found;
        self.update_point_stats(into)
    }

    /// Spanning tree + loop edges + strong covisibility edges, deduplicated,
    /// as (low id, high id) pairs.
    pub fn essential_edges(&self) -> BTreeSet<(u64, u64)> {
        let mut edges = BTreeSet::new();
        for (child, parent) in self.graph.parents.iter() {
            if let Some(p) = parent {
                edges.insert((*child.min(p), *child.max(p)));
            }
        }
        for e in &self.graph.loop_edges {
            edges.insert(*e);
        }
        for (a, m) in self.graph.weights.iter() {
            for (b, w) in m.iter() {
                if *w >= self.config.strong_edge_weight && a < b {
                    edges.insert((*a, *b));
                }
            }
        }
        edges
    }

    /// Brute-force covisibility recount from point observations; the stored
    /// graph must match this exactly.
    pub fn recompute_covisibility(&self) -> BTreeMap<(u64, u64), u32> {
        let mut counts: BTreeMap<(u64, u64), u32> = BTreeMap::new();
        for point in self.points.values() {
            let observers: Vec<u64> = point.observations.keys().copied().collect();
            for i in 0..observers.len() {
                for j in (i + 1)..observers.len() {
                    let key = (
                        observers[i].min(observers[j]),
                        observers[i].max(observers[j]),
                    );
                    *counts.entry(key).or_insert(0) += 1;
                }
            }
        }
        counts
    }

    pub fn stored_covisibility(&self) -> BTreeMap<(u64, u64), u32> {
        let mut counts = BTreeMap::new();
        for (a, m) in self.graph.weights.iter() {
            for (b, w) in m.iter() {
                if a < b && *w > 0 {
                    counts.insert((*a, *b), *w);
                }
            }
        }
        counts
    }

    /// Checks point->MKF and MKF->point reference agreement. Returns the
    /// offending descriptions, empty when consistent.
    pub fn consistency_errors(&self) -> Vec<String> {
        let mut errors = Vec::new();
        for point in self.points.values() {
            for (mkf_id, (cam, idx)) in point.observations.iter() {
                match self.keyframes.get(mkf_id) {
                    None => errors.push(format!(
                        "point {} observes missing MKF {}",
                        point.id, mkf_id
                    )),
                    Some(mkf) => {
                        if mkf.matched_points[*cam][*idx] != Some(point.id) {
                            errors.push(format!(
                                "point {} -> MKF {} cam {} idx {} not linked back",
                                point.id, mkf_id, cam, idx
                            ));
                        }
                    }
                }
            }
        }
        for mkf in self.keyframes.values() {
            for (cam, idx, pid) in mkf.matched() {
                match self.points.get(&pid) {
                    None => errors.push(format!("MKF {} references missing point {}", mkf.id, pid)),
                    Some(p) => {
                        if p.observations.get(&mkf.id) != Some(&(cam, idx)) {
                            errors.push(format!(
                                "MKF {} cam {} idx {} -> point {} not linked back",
                                mkf.id, cam, idx, pid
                            ));
                        }
                    }
                }
            }
        }
        errors
    }

    pub fn snapshot(&self) -> MapSnapshot {
        MapSnapshot {
            points: self
                .points
                .values()
                .map(|p| PointSnapshot {
                    id: p.id,
                    xyz: [p.position.x, p.position.y, p.position.z],
                    n: [p.normal.x, p.normal.y, p.normal.z],
                    d_min: p.d_min,
                    d_max: p.d_max,
                    observation_count: p.observations.len(),
                })
                .collect(),
            keyframes: self
                .keyframes
                .values()
                .map(|k| KeyFrameSnapshot {
                    id: k.id,
                    timestamp: k.timestamp,
                    pose: crate::geometry::PoseQuat::from(&k.pose),
                    per_camera_feature_counts: k.features.iter().map(|f| f.len()).collect(),
                })
                .collect(),
        }
    }

    /// World-frame optical center helper used by tracking and point stats.
    pub fn camera_center(&self, mkf_id: u64, camera: usize) -> Result<Vector3<f64>, MapError> {
        let pose = self.keyframe(mkf_id)?.pose;
        let cam_pose = self
            .rig
            .camera_pose(camera, &pose)
            .expect("valid camera index");
        Ok(*inverse(&cam_pose).translation())
    }
}

/// Diagnostic JSON export of the map.
#[derive(Clone, Debug, Serialize)]
pub struct MapSnapshot {
    pub points: Vec<PointSnapshot>,
    pub keyframes: Vec<KeyFrameSnapshot>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PointSnapshot {
    pub id: u64,
    pub xyz: [f64; 3],
    pub n: [f64; 3],
    pub d_min: f64,
    pub d_max: f64,
    pub observation_count: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct KeyFrameSnapshot {
    pub id: u64,
    pub timestamp: f64,
    pub pose: crate::geometry::PoseQuat,
    pub per_camera_feature_counts: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{CameraIntrinsics, RigCamera};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
            baseline: 0.1,
            depth_min: 0.2,
            depth_max: 10.0,
        }
    }

    fn rig(cameras: usize) -> MultiCamRig {
        let mut cams = vec![RigCamera {
            intrinsics: intrinsics(),
            extrinsic: SE3Pose::identity(),
        }];
        for i in 1..cameras {
            cams.push(RigCamera {
                intrinsics: intrinsics(),
                extrinsic: SE3Pose::from_axis_angle(
                    &Vector3::y(),
                    -std::f64::consts::FRAC_PI_2 * i as f64,
                    Vector3::zeros(),
                ),
            });
        }
        MultiCamRig::new(cams).unwrap()
    }

    fn feature(rng: &mut StdRng) -> FeatureObservation {
        FeatureObservation {
            camera_id: 0,
            u: rng.gen_range(0.0..640.0),
            v: rng.gen_range(0.0..480.0),
            depth: Some(rng.gen_range(0.5..5.0)),
            descriptor: BinaryDescriptor::random(rng),
            true_landmark_id: None,
        }
    }

    fn mkf_with_features(
        id: u64,
        rig_cams: usize,
        n_features: usize,
        vocab: &Vocabulary,
        rng: &mut StdRng,
    ) -> MultiKeyFrame {
        let features: Vec<Vec<FeatureObservation>> = (0..rig_cams)
            .map(|_| (0..n_features).map(|_| feature(rng)).collect())
            .collect();
        MultiKeyFrame::new(id, id as f64 * 0.05, SE3Pose::identity(), features, vocab)
    }

    /// Creates `count` points observed by both `a` (creator) and `b`, using
    /// feature slots starting at `start_idx` on camera `cam`.
    fn share_points(
        map: &mut SlamMap,
        a: u64,
        b: u64,
        count: usize,
        cam: usize,
        start_idx: usize,
        rng: &mut StdRng,
    ) -> Vec<u64> {
        let mut ids = Vec::new();
        for i in 0..count {
            let pos = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(2.0..4.0),
            );
            let d = BinaryDescriptor::random(rng);
            let pid = map.create_point(pos, d, a, cam, start_idx + i).unwrap();
            map.add_observation(pid, b, cam, start_idx + i).unwrap();
            ids.push(pid);
        }
        ids
    }

    #[test]
    fn first_keyframe_single_node() {
        let vocab = Vocabulary::new(1);
        let mut rng = StdRng::seed_from_u64(1);
        let mut map = SlamMap::new(rig(2), MapConfig::default());
        let mkf = mkf_with_features(0, 2, 30, &vocab, &mut rng);
        map.insert_keyframe(mkf).unwrap();
        assert_eq!(map.keyframe_count(), 1);
        assert!(map.covisible_neighbors(0).is_empty());
        assert_eq!(map.parent(0), None);
        assert_eq!(map.initial_mkf(), Some(0));
    }

    #[test]
    fn duplicate_id_and_bad_timestamp_rejected() {
        let vocab = Vocabulary::new(1);
        let mut rng = StdRng::seed_from_u64(2);
        let mut map = SlamMap::new(rig(1), MapConfig::default());
        map.insert_keyframe(mkf_with_features(0, 1, 10, &vocab, &mut rng))
            .unwrap();
        let dup = mkf_with_features(0, 1, 10, &vocab, &mut rng);
        assert!(matches!(
            map.insert_keyframe(dup),
            Err(MapError::DuplicateKeyFrame(0))
        ));
        let mut stale = mkf_with_features(1, 1, 10, &vocab, &mut rng);
        stale.timestamp = -1.0;
        assert!(matches!(
            map.insert_keyframe(stale),
            Err(MapError::NonMonotonicTimestamp { .. })
        ));
    }

    #[test]
    fn covisibility_threshold_is_strict() {
        let vocab = Vocabulary::new(1);
        let mut rng = StdRng::seed_from_u64(3);
        let mut map = SlamMap::new(rig(1), MapConfig::default());
        map.insert_keyframe(mkf_with_features(0, 1, 60, &vocab, &mut rng))
            .unwrap();
        map.insert_keyframe(mkf_with_features(1, 1, 60, &vocab, &mut rng))
            .unwrap();
        // Exactly 20 shared points: no edge (threshold is strict).
        share_points(&mut map, 0, 1, 20, 0, 0, &mut rng);
        assert_eq!(map.covisibility_weight(0, 1), 20);
        assert!(map.covisible_neighbors(0).is_empty());
        // 25 shared: edge with weight 25, matching brute force.
        share_points(&mut map, 0, 1, 5, 0, 20, &mut rng);
        assert_eq!(map.covisibility_weight(0, 1), 25);
        assert_eq!(map.covisible_neighbors(0), vec![(1, 25)]);
        assert_eq!(map.recompute_covisibility(), map.stored_covisibility());
    }

    #[test]
    fn neighbors_appends_per_camera_partner() {
        let vocab = Vocabulary::new(1);
        let mut rng = StdRng::seed_from_u64(4);
        let mut map = SlamMap::new(rig(2), MapConfig::default());
        // MKF 0 is the query; MKFs 1..=25 share points through camera 0 with
        // decreasing weights; MKF 23 is camera 1's only partner.
        let n = 26;
        for id in 0..n {
            map.insert_keyframe(mkf_with_features(id, 2, 1400, &vocab, &mut rng))
                .unwrap();
        }
        // Total weights 78, 76, ... for ids 1..=25, except MKF 23 whose
        // weight comes mostly through camera 1 and totals 34, placing it
        // 23rd overall (between id 22 at 36 and id 24 at 32).
        let mut slot = 0;
        for other in 1..n {
            if other == 23 {
                continue;
            }
            let w = (80 - 2 * other as i64) as usize;
            share_points(&mut map, 0, other, w, 0, slot, &mut rng);
            slot += w;
        }
        share_points(&mut map, 0, 23, 8, 0, slot, &mut rng);
        // Camera 1 covisibility exists only with MKF 23.
        share_points(&mut map, 0, 23, 26, 1, 0, &mut rng);
        assert_eq!(map.covisibility_weight(0, 23), 34);

        let neigh = map.neighbors(0, 20).unwrap();
        assert_eq!(neigh.len(), 21);
        for id in 1..=20u64 {
            assert!(neigh.contains(&id), "missing top-20 neighbor {id}");
        }
        assert_eq!(*neigh.last().unwrap(), 23);
        assert!(neigh.len() <= 20 + map.rig.camera_count());
    }

    #[test]
    fn neighbors_isolated_node_is_empty() {
        let vocab = Vocabulary::new(1);
        let mut rng = StdRng::seed_from_u64(5);
        let mut map = SlamMap::new(rig(1), MapConfig::default());
        map.insert_keyframe(mkf_with_features(0, 1, 10, &vocab, &mut rng))
            .unwrap();
        assert!(map.neighbors(0, 20).unwrap().is_empty());
        assert!(map.neighbors(99, 20).is_err());
    }

    #[test]
    fn small_graph_returns_all_covisible() {
        let vocab = Vocabulary::new(1);
        let mut rng = StdRng::seed_from_u64(14);
        let mut map = SlamMap::new(rig(1), MapConfig::default());
        for id in 0..3 {
            map.insert_keyframe(mkf_with_features(id, 1, 120, &vocab, &mut rng))
                .unwrap();
        }
        // All three mutually covisible.
        for i in 0..30 {
            let d = BinaryDescriptor::random(&mut rng);
            let pid = map
                .create_point(Vector3::new(0.0, 0.0, 2.0), d, 0, 0, i)
                .unwrap();
            map.add_observation(pid, 1, 0, i).unwrap();
            map.add_observation(pid, 2, 0, i).unwrap();
        }
        let neigh = map.neighbors(0, 20).unwrap();
        assert_eq!(neigh.len(), 2);
        assert!(neigh.contains(&1) && neigh.contains(&2));
    }

    #[test]
    fn update_point_stats_majority_descriptor() {
        let vocab = Vocabulary::new(1);
        let mut rng = StdRng::seed_from_u64(6);
        let mut map = SlamMap::new(rig(1), MapConfig::default());
        for id in 0..3 {
            map.insert_keyframe(mkf_with_features(id, 1, 10, &vocab, &mut rng))
                .unwrap();
        }
        let a = BinaryDescriptor::random(&mut rng);
        let mut b = a;
        for bit in 0..40 {
            b.flip_bit(bit);
        }
        // Observation descriptors {A, A, B}: representative must be A.
        for (mkf, desc) in [(0u64, a), (1, a), (2, b)] {
            map.keyframe_mut(mkf).unwrap().features[0][0].descriptor = desc;
        }
        let pid = map
            .create_point(Vector3::new(0.0, 0.0, 2.0), b, 0, 0, 0)
            .unwrap();
        map.add_observation(pid, 1, 0, 0).unwrap();
        map.add_observation(pid, 2, 0, 0).unwrap();
        map.update_point_stats(pid).unwrap();
        assert_eq!(map.point(pid).unwrap().descriptor, a);
        // Identity poses, single camera: normal along +z, bounds scale the
        // 2 m distance by the margin factors.
        let p = map.point(pid).unwrap();
        approx::assert_abs_diff_eq!(p.normal, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
        approx::assert_abs_diff_eq!(p.d_min, 1.6, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(p.d_max, 2.4, epsilon = 1e-12);
    }

    #[test]
    fn update_point_stats_single_observation_and_degenerate_normal() {
        let vocab = Vocabulary::new(1);
        let mut rng = StdRng::seed_from_u64(7);
        let mut map = SlamMap::new(rig(1), MapConfig::default());
        map.insert_keyframe(mkf_with_features(0, 1, 10, &vocab, &mut rng))
            .unwrap();
        let d = BinaryDescriptor::random(&mut rng);
        let pid = map
            .create_point(Vector3::new(0.0, 0.0, 3.0), d, 0, 0, 0)
            .unwrap();
        map.keyframe_mut(0).unwrap().features[0][0].descriptor = d;
        map.update_point_stats(pid).unwrap();
        let p = map.point(pid).unwrap();
        assert_eq!(p.descriptor, d);
        approx::assert_abs_diff_eq!(p.d_min, 2.4, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(p.d_max, 3.6, epsilon = 1e-12);

        // Opposite viewing rays: the mean direction vanishes; the previous
        // normal must be kept.
        let mut behind = mkf_with_features(1, 1, 10, &vocab, &mut rng);
        behind.pose = SE3Pose::from_axis_angle(
            &Vector3::y(),
            std::f64::consts::PI,
            Vector3::new(0.0, 0.0, 6.0),
        );
        map.insert_keyframe(behind).unwrap();
        let before = map.point(pid).unwrap().normal;
        map.add_observation(pid, 1, 0, 0).unwrap();
        map.update_point_stats(pid).unwrap();
        approx::assert_abs_diff_eq!(map.point(pid).unwrap().normal, before, epsilon = 1e-9);

        // Zero observations is an error.
        map.remove_point(pid);
        assert!(map.update_point_stats(pid).is_err());
    }

    #[test]
    fn cull_recent_points_gates() {
        let vocab = Vocabulary::new(1);
        let mut rng = StdRng::seed_from_u64(8);
        let mut map = SlamMap::new(rig(1), MapConfig::default());
        map.insert_keyframe(mkf_with_features(0, 1, 30, &vocab, &mut rng))
            .unwrap();
        let d = BinaryDescriptor::random(&mut rng);

        // Found 1 of 10 frames: ratio 0.1 < 0.25, removed.
        let low_ratio = map
            .create_point(Vector3::new(0.0, 0.0, 2.0), d, 0, 0, 0)
            .unwrap();
        {
            let p = map.point_mut(low_ratio).unwrap();
            p.visible_count = 10;
            p.found_count = 1;
        }
        // Created this MKF with a single observation: kept (grace window).
        let fresh = map
            .create_point(Vector3::new(0.1, 0.0, 2.0), d, 0, 0, 1)
            .unwrap();
        let removed = map.cull_recent_points();
        assert!(removed.contains(&low_ratio));
        assert!(!removed.contains(&fresh));

        map.insert_keyframe(mkf_with_features(1, 1, 30, &vocab, &mut rng))
            .unwrap();
        let lonely = map
            .create_point(Vector3::new(0.2, 0.0, 2.0), d, 1, 0, 2)
            .unwrap();
        map.add_observation(fresh, 1, 0, 1).unwrap();
        map.insert_keyframe(mkf_with_features(2, 1, 30, &vocab, &mut rng))
            .unwrap();
        map.add_observation(fresh, 2, 0, 1).unwrap();
        {
            let p = map.point_mut(fresh).unwrap();
            p.visible_count = 10;
            p.found_count = 5;
        }
        // One MKF elapsed since `lonely` was created: still in grace.
        let removed = map.cull_recent_points();
        assert!(!removed.contains(&fresh), "3 observers, ratio 0.5: kept");
        assert!(!removed.contains(&lonely), "grace window after 1 MKF");

        map.insert_keyframe(mkf_with_features(3, 1, 30, &vocab, &mut rng))
            .unwrap();
        let removed = map.cull_recent_points();
        assert!(removed.contains(&lonely), "1 observer after 2 MKFs: removed");
        assert!(!removed.contains(&fresh));
        assert!(map.consistency_errors().is_empty());
    }

    #[test]
    fn cull_redundant_keyframes_rules() {
        let vocab = Vocabulary::new(1);
        let mut rng = StdRng::seed_from_u64(9);
        let mut map = SlamMap::new(rig(1), MapConfig::default());
        for id in 0..5 {
            map.insert_keyframe(mkf_with_features(id, 1, 150, &vocab, &mut rng))
                .unwrap();
        }
        // 40 points observed by MKFs 1..=4 (every point has >= 3 others).
        for i in 0..40 {
            let pos = Vector3::new(0.0, 0.0, 2.0 + i as f64 * 0.01);
            let d = BinaryDescriptor::random(&mut rng);
            let pid = map.create_point(pos, d, 1, 0, i).unwrap();
            for mkf in 2..5u64 {
                map.add_observation(pid, mkf, 0, i).unwrap();
            }
        }
        // MKF 2 is fully redundant; cull it.
        let culled = map.cull_redundant_keyframes(&[2]);
        assert_eq!(culled.len(), 1);
        assert_eq!(culled[0].id, 2);
        assert!(!map.has_keyframe(2));
        assert!(map.consistency_errors().is_empty());
        assert_eq!(map.recompute_covisibility(), map.stored_covisibility());

        // MKF 3 now has a uniquely observed cluster (> 10% unique): kept.
        for i in 40..52 {
            let d = BinaryDescriptor::random(&mut rng);
            map.create_point(Vector3::new(0.0, 0.0, 3.0), d, 3, 0, i)
                .unwrap();
        }
        assert!(map.cull_redundant_keyframes(&[3]).is_empty());

        // The initial MKF is never culled even when fully redundant.
        for i in 0..40 {
            let pid = map.keyframe(1).unwrap().matched_points[0][i].unwrap();
            map.add_observation(pid, 0, 0, i).unwrap();
        }
        assert!(map.cull_redundant_keyframes(&[0]).is_empty());
        assert!(map.has_keyframe(0));
    }

    #[test]
    fn replace_point_transfers_observations() {
        let vocab = Vocabulary::new(1);
        let mut rng = StdRng::seed_from_u64(10);
        let mut map = SlamMap::new(rig(1), MapConfig::default());
        for id in 0..3 {
            map.insert_keyframe(mkf_with_features(id, 1, 20, &vocab, &mut rng))
                .unwrap();
        }
        let d = BinaryDescriptor::random(&mut rng);
        let keep = map
            .create_point(Vector3::new(0.0, 0.0, 2.0), d, 0, 0, 0)
            .unwrap();
        let dup = map
            .create_point(Vector3::new(0.0, 0.0, 2.01), d, 1, 0, 0)
            .unwrap();
        map.add_observation(dup, 2, 0, 0).unwrap();
        map.replace_point(dup, keep).unwrap();
        assert!(map.point(dup).is_err());
        let obs = &map.point(keep).unwrap().observations;
        assert_eq!(obs.len(), 3);
        assert!(map.consistency_errors().is_empty());
        assert_eq!(map.recompute_covisibility(), map.stored_covisibility());
    }

    #[test]
    fn covisibility_matches_brute_force_after_random_ops() {
        let vocab = Vocabulary::new(1);
        let mut rng = StdRng::seed_from_u64(11);
        let mut map = SlamMap::new(rig(2), MapConfig::default());
        for id in 0..8 {
            map.insert_keyframe(mkf_with_features(id, 2, 80, &vocab, &mut rng))
                .unwrap();
        }
        let mut pids = Vec::new();
        for i in 0..60 {
            let a = rng.gen_range(0..8u64);
            let cam = rng.gen_range(0..2usize);
            let d = BinaryDescriptor::random(&mut rng);
            let pid = map
                .create_point(Vector3::new(0.0, 0.0, 2.0), d, a, cam, i % 80)
                .unwrap();
            for b in 0..8u64 {
                if b != a && rng.gen_bool(0.4) {
                    map.add_observation(pid, b, cam, i % 80).unwrap();
                }
            }
            pids.push(pid);
        }
        for pid in pids.iter().take(20) {
            map.remove_point(*pid);
        }
        map.cull_redundant_keyframes(&[3, 5]);
        assert_eq!(map.recompute_covisibility(), map.stored_covisibility());
        assert!(map.consistency_errors().is_empty());
    }

    #[test]
    fn bow_matches_recomputed_vector() {
        let vocab = Vocabulary::new(9);
        let mut rng = StdRng::seed_from_u64(12);
        let mkf = mkf_with_features(0, 2, 40, &vocab, &mut rng);
        let all: Vec<BinaryDescriptor> = mkf
            .features
            .iter()
            .flat_map(|cam| cam.iter().map(|f| f.descriptor))
            .collect();
        assert_eq!(mkf.bow, vocab.bow_vector(&all));
    }

    #[test]
    fn snapshot_is_serializable_and_sorted() {
        let vocab = Vocabulary::new(1);
        let mut rng = StdRng::seed_from_u64(13);
        let mut map = SlamMap::new(rig(1), MapConfig::default());
        for id in 0..3 {
            map.insert_keyframe(mkf_with_features(id, 1, 10, &vocab, &mut rng))
                .unwrap();
        }
        let d = BinaryDescriptor::random(&mut rng);
        map.create_point(Vector3::new(0.0, 0.0, 2.0), d, 1, 0, 0)
            .unwrap();
        let snap = map.snapshot();
        let json = serde_json::to_string(&snap).unwrap();
        assert!(json.contains("\"keyframes\""));
        let ids: Vec<u64> = snap.keyframes.iter().map(|k| k.id).collect();
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        assert_eq!(ids, sorted);
    }
}
