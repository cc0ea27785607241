//! The three-stage SLAM engine: tracking, local mapping, and loop closing.
//!
//! In deterministic mode all three stages run sequentially per frame in a
//! fixed order, so identical inputs produce byte-identical outputs. The
//! threaded mode runs the stages concurrently over a shared map; tracking
//! reads, local mapping owns mutation, and loop correction takes exclusive
//! access for the correction transaction.

mod epnp;
mod loop_closing;
mod mapping;
mod threaded;
mod tracking;

pub use threaded::run_threaded;

use crate::dataset::Dataset;
use crate::evaluation::Trajectory;
use crate::features::{FeatureObservation, Vocabulary};
use crate::geometry::{compose, inverse, SE3Pose};
use crate::map::{CulledKeyFrame, MapConfig, MapSnapshot, SlamMap};
use crate::optimizer::SolverConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Map(#[from] crate::map::MapError),
    #[error(transparent)]
    Optimize(#[from] crate::optimizer::OptimizeError),
    #[error(transparent)]
    Camera(#[from] crate::camera::CameraError),
    #[error("dataset frame {index}: {reason}")]
    BadFrame { index: usize, reason: String },
}

/// One input frame: synchronized per-camera feature lists.
#[derive(Clone, Debug)]
pub struct Frame {
    pub timestamp: f64,
    pub features: Vec<Vec<FeatureObservation>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackingState {
    Uninitialized,
    Tracking,
    Lost,
}

/// Constant-velocity motion model: the per-frame relative motion
/// T_sw(k) * T_sw(k-1)^-1, valid once two consecutive frames tracked.
#[derive(Clone, Copy, Debug)]
pub struct VelocityModel {
    pub step: SE3Pose,
    pub valid: bool,
}

impl Default for VelocityModel {
    fn default() -> Self {
        Self {
            step: SE3Pose::identity(),
            valid: false,
        }
    }
}

/// All numeric gates of the engine. Values follow the keyframe-SLAM lineage
/// defaults; everything is overridable through the run configuration file.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Minimum frames between multi-keyframe insertions (ratio rule).
    pub min_frames_between_mkf: usize,
    /// Insert an MKF when the tracked fraction of the reference drops below.
    pub ref_tracked_ratio: f64,
    /// Minimum total tracked inliers before an MKF is forced (multi-camera).
    pub min_inliers_total: usize,
    /// Per-camera inlier floor: an MKF is forced when every camera is below.
    pub min_inliers_per_camera: usize,
    /// Frame-level success gate on total inliers after local-map tracking.
    pub track_inlier_gate: usize,

    /// Projection search radius for constant-velocity matching (pixels).
    pub motion_search_radius_px: f64,
    /// Local-map search radius, and the tighter re-search radius after the
    /// first pose refinement.
    pub local_search_radius_px: f64,
    pub refine_search_radius_px: f64,
    pub match_max_hamming: u32,
    pub match_ratio: f64,
    pub min_motion_matches: usize,
    pub min_reference_matches: usize,

    /// Minimum depth-valid features across cameras for map initialization.
    pub min_init_features: usize,

    /// Relocalization RANSAC: iterations, squared-pixel inlier gate
    /// (chi-square, 2 DoF), and the acceptance inlier count.
    pub ransac_iterations: usize,
    pub ransac_inlier_chi2: f64,
    pub reloc_min_inliers: usize,

    /// Loop closing: minimum map size, consecutive consistent detections,
    /// minimum aligned point pairs, and the RANSAC inlier distance (meters).
    pub loop_min_mkfs: usize,
    pub loop_consistency: usize,
    pub loop_min_pairs: usize,
    pub loop_inlier_dist: f64,
    pub enable_loop_closing: bool,

    /// Reprojection gate for newly triangulated points (pixels).
    pub triangulation_max_reproj_px: f64,

    pub map: MapConfig,
    pub solver_local: SolverConfig,
    pub solver_global: SolverConfig,

    /// Vocabulary seed for the bag-of-words quantizer.
    pub vocabulary_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            min_frames_between_mkf: 5,
            ref_tracked_ratio: 0.9,
            min_inliers_total: 50,
            min_inliers_per_camera: 30,
            track_inlier_gate: 30,
            motion_search_radius_px: 15.0,
            local_search_radius_px: 3.0,
            refine_search_radius_px: 1.0,
            match_max_hamming: crate::features::DEFAULT_MAX_HAMMING,
            match_ratio: crate::features::DEFAULT_MATCH_RATIO,
            min_motion_matches: 20,
            min_reference_matches: 15,
            min_init_features: 100,
            ransac_iterations: 200,
            ransac_inlier_chi2: 5.991,
            reloc_min_inliers: 15,
            loop_min_mkfs: 10,
            loop_consistency: 3,
            loop_min_pairs: 20,
            loop_inlier_dist: 0.05,
            enable_loop_closing: true,
            triangulation_max_reproj_px: 2.0,
            map: MapConfig::default(),
            solver_local: SolverConfig::local(),
            solver_global: SolverConfig::global(),
            vocabulary_seed: 0x5eed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Multicam,
    MainOnly,
}

/// Per-run statistics, serialized as the stats JSON.
#[derive(Clone, Debug, Default, Serialize)]
pub struct RunStats {
    pub n_tracked: u64,
    pub n_sum: u64,
    pub tracking_rate: f64,
    pub mkf_count: usize,
    pub point_count: usize,
    pub loop_closures: usize,
    pub relocalizations: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub stats: RunStats,
    pub snapshot: MapSnapshot,
}

/// Per-frame trajectory records are stored relative to a reference MKF so
/// that keyframe corrections (loop closures, global BA, culling) propagate
/// to the emitted trajectory.
#[derive(Clone, Debug)]
pub struct TrajectoryLog {
    records: Vec<(f64, u64, SE3Pose)>, // (timestamp, ref mkf, T_frame * T_ref^-1)
}

impl TrajectoryLog {
    pub fn new() -> Self {
        Self {
            records: Vec::new(),
        }
    }

    pub fn append(&mut self, timestamp: f64, ref_mkf: u64, rel: SE3Pose) {
        self.records.push((timestamp, ref_mkf, rel));
    }

    /// Re-anchors records referencing a culled MKF onto its spanning-tree
    /// parent, using the poses at cull time.
    pub fn reanchor(&mut self, culled: &CulledKeyFrame) {
        for (_, ref_id, rel) in self.records.iter_mut() {
            if *ref_id == culled.id {
                *rel = compose(&compose(rel, &culled.pose), &inverse(&culled.parent_pose));
                *ref_id = culled.parent;
            }
        }
    }

    /// Emits the final trajectory (rig-in-world poses) against the final
    /// optimized keyframe poses.
    pub fn finalize(&self, map: &SlamMap) -> Trajectory {
        let samples: Vec<(f64, SE3Pose)> = self
            .records
            .iter()
            .filter_map(|(t, ref_id, rel)| {
                let ref_pose = map.keyframe(*ref_id).ok()?.pose;
                Some((*t, inverse(&compose(rel, &ref_pose))))
            })
            .collect();
        Trajectory::new(samples).expect("frame timestamps are increasing")
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl Default for TrajectoryLog {
    fn default() -> Self {
        Self::new()
    }
}

/// Deterministic single-threaded engine: the three stages run inline per
/// frame in a fixed order.
pub struct SlamEngine {
    pub map: SlamMap,
    tracker: tracking::Tracker,
    mapper: mapping::LocalMapper,
    loop_closer: loop_closing::LoopCloser,
    trajectory: TrajectoryLog,
    config: PipelineConfig,
    stats: RunStats,
}

impl SlamEngine {
    pub fn new(rig: crate::camera::MultiCamRig, config: PipelineConfig, seed: u64) -> Self {
        let vocab = Vocabulary::new(config.vocabulary_seed);
        Self {
            map: SlamMap::new(rig.clone(), config.map),
            tracker: tracking::Tracker::new(rig, vocab, config, seed),
            mapper: mapping::LocalMapper::new(config),
            loop_closer: loop_closing::LoopCloser::new(config),
            trajectory: TrajectoryLog::new(),
            config,
            stats: RunStats::default(),
        }
    }

    pub fn state(&self) -> TrackingState {
        self.tracker.state()
    }

    pub fn stats(&self) -> &RunStats {
        &self.stats
    }

    /// Processes one frame through tracking and, when a new MKF is created,
    /// through local mapping and loop closing.
    pub fn process_frame(&mut self, frame: &Frame) -> Result<TrackingState, PipelineError> {
        self.stats.n_sum += 1;
        let outcome = self.tracker.handle_frame(&self.map, frame)?;

        for (pid, visible, found) in &outcome.counter_deltas {
            if let Ok(point) = self.map.point_mut(*pid) {
                point.visible_count += visible;
                point.found_count += found;
            }
        }
        if let Some(tracked) = &outcome.tracked {
            self.stats.n_tracked += 1;
            if outcome.relocalized {
                self.stats.relocalizations += 1;
            }
            self.trajectory
                .append(frame.timestamp, tracked.ref_mkf, tracked.rel_to_ref);
        }

        if let Some(mkf) = outcome.new_mkf {
            let mkf_id = mkf.id;
            self.map.insert_keyframe(mkf)?;
            let culled = self.mapper.process_new_mkf(&mut self.map, mkf_id)?;
            for record in &culled {
                self.trajectory.reanchor(record);
                self.tracker.on_keyframe_culled(record.id);
            }
            if self.config.enable_loop_closing {
                if let Some(candidate) = self.loop_closer.detect_loop(&self.map, mkf_id) {
                    if let Some(correction) =
                        self.loop_closer
                            .close_loop(&mut self.map, mkf_id, candidate)?
                    {
                        self.stats.loop_closures += 1;
                        self.tracker.apply_correction(&correction);
                    }
                }
            }
        }
        Ok(self.tracker.state())
    }

    pub fn finish(mut self) -> RunOutput {
        self.stats.tracking_rate = if self.stats.n_sum > 0 {
            self.stats.n_tracked as f64 / self.stats.n_sum as f64
        } else {
            0.0
        };
        self.stats.mkf_count = self.map.keyframe_count();
        self.stats.point_count = self.map.point_count();
        RunOutput {
            trajectory: self.trajectory.finalize(&self.map),
            stats: self.stats,
            snapshot: self.map.snapshot(),
        }
    }
}

/// Builds engine input frames from dataset records, honoring the run mode.
pub fn dataset_frames(dataset: &Dataset, mode: RunMode) -> (crate::camera::MultiCamRig, Vec<Frame>) {
    let view = match mode {
        RunMode::Multicam => dataset.clone(),
        RunMode::MainOnly => dataset.main_camera_only(),
    };
    let camera_count = view.rig.camera_count();
    let frames = view
        .frames
        .iter()
        .map(|record| Frame {
            timestamp: record.timestamp,
            features: record.features(camera_count),
        })
        .collect();
    (view.rig, frames)
}

/// Runs the full pipeline over a dataset in deterministic sequential mode.
pub fn run(
    dataset: &Dataset,
    mode: RunMode,
    config: &PipelineConfig,
    seed: u64,
) -> Result<RunOutput, PipelineError> {
    let (rig, frames) = dataset_frames(dataset, mode);
    let mut engine = SlamEngine::new(rig, *config, seed);
    for frame in &frames {
        engine.process_frame(frame)?;
    }
    Ok(engine.finish())
}
