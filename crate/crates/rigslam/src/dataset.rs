//! Dataset directory format shared by the simulator, the SLAM engine, and
//! the CLI.
//!
//! A dataset directory contains:
//!   rig.json         camera rig (intrinsics + extrinsics)
//!   frames.jsonl     one frame per line
//!   groundtruth.txt  trajectory text format (when simulated)
//!   scene.json       generating configuration (when simulated)

use crate::camera::MultiCamRig;
use crate::features::{BinaryDescriptor, FeatureObservation};
use crate::geometry::PoseQuat;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const RIG_FILE: &str = "rig.json";
pub const FRAMES_FILE: &str = "frames.jsonl";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";
pub const SCENE_FILE: &str = "scene.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> Self {
        Self::Malformed {
            path: path.to_path_buf(),
            line,
            reason: reason.into(),
        }
    }
}

/// Wire form of one observation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub u: f64,
    pub v: f64,
    pub depth: Option<f64>,
    pub descriptor_hex: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_landmark_id: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraFrameRecord {
    pub camera_id: usize,
    pub observations: Vec<ObservationRecord>,
}

/// Wire form of one frame: a line of frames.jsonl.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameRecord {
    pub timestamp: f64,
    pub cameras: Vec<CameraFrameRecord>,
}

impl FrameRecord {
    /// Per-camera feature lists indexed by camera id (missing cameras give
    /// empty lists).
    pub fn features(&self, camera_count: usize) -> Vec<Vec<FeatureObservation>> {
        let mut out: Vec<Vec<FeatureObservation>> = (0..camera_count).map(|_| Vec::new()).collect();
        for cam in &self.cameras {
            if cam.camera_id >= camera_count {
                continue;
            }
            out[cam.camera_id] = cam
                .observations
                .iter()
                .map(|o| FeatureObservation {
                    camera_id: cam.camera_id,
                    u: o.u,
                    v: o.v,
                    depth: o.depth,
                    descriptor: BinaryDescriptor::from_hex(&o.descriptor_hex)
                        .expect("validated at load"),
                    true_landmark_id: o.true_landmark_id,
                })
                .collect();
        }
        out
    }
}

/// An in-memory dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub rig: MultiCamRig,
    pub frames: Vec<FrameRecord>,
    pub groundtruth: Option<crate::evaluation::Trajectory>,
    pub scene_json: Option<serde_json::Value>,
}

impl Dataset {
    /// A copy restricted to the main camera: single-camera rig, camera-0
    /// observations only.
    pub fn main_camera_only(&self) -> Dataset {
        let rig = MultiCamRig::single(self.rig.cameras[0].intrinsics).expect("valid intrinsics");
        let frames = self
            .frames
            .iter()
            .map(|f| FrameRecord {
                timestamp: f.timestamp,
                cameras: f
                    .cameras
                    .iter()
                    .filter(|c| c.camera_id == 0)
                    .cloned()
                    .collect(),
            })
            .collect();
        Dataset {
            rig,
            frames,
            groundtruth: self.groundtruth.clone(),
            scene_json: self.scene_json.clone(),
        }
    }

    /// A copy restricted to a single camera, re-indexed as camera 0. The
    /// extrinsic is dropped (each camera track lives in its own frame).
    pub fn single_camera(&self, camera: usize) -> Option<Dataset> {
        let intrinsics = self.rig.cameras.get(camera)?.intrinsics;
        let rig = MultiCamRig::single(intrinsics).expect("valid intrinsics");
        let frames = self
            .frames
            .iter()
            .map(|f| FrameRecord {
                timestamp: f.timestamp,
                cameras: f
                    .cameras
                    .iter()
                    .filter(|c| c.camera_id == camera)
                    .map(|c| CameraFrameRecord {
                        camera_id: 0,
                        observations: c.observations.clone(),
                    })
                    .collect(),
            })
            .collect();
        Some(Dataset {
            rig,
            frames,
            groundtruth: None,
            scene_json: None,
        })
    }
}

pub fn load_rig(path: &Path) -> Result<MultiCamRig, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    let rig: MultiCamRig = serde_json::from_str(&text).map_err(|e| DatasetError::Invalid {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    rig.validate().map_err(|e| DatasetError::Invalid {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(rig)
}

pub fn save_rig(rig: &MultiCamRig, path: &Path) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(rig).expect("rig serializes");
    fs::write(path, text).map_err(|e| DatasetError::io(path, e))
}

/// Loads a dataset directory, validating frame monotonicity, camera ids,
/// and descriptor hex with file+line diagnostics.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let rig = load_rig(&dir.join(RIG_FILE))?;
    let frames_path = dir.join(FRAMES_FILE);
    let text = fs::read_to_string(&frames_path).map_err(|e| DatasetError::io(&frames_path, e))?;
    let mut frames: Vec<FrameRecord> = Vec::new();
    let mut last_ts = f64::NEG_INFINITY;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let frame: FrameRecord = serde_json::from_str(line)
            .map_err(|e| DatasetError::malformed(&frames_path, lineno + 1, e.to_string()))?;
        if frame.timestamp <= last_ts {
            return Err(DatasetError::malformed(
                &frames_path,
                lineno + 1,
                format!(
                    "timestamp {} not after previous {}",
                    frame.timestamp, last_ts
                ),
            ));
        }
        last_ts = frame.timestamp;
        for cam in &frame.cameras {
            if cam.camera_id >= rig.camera_count() {
                return Err(DatasetError::malformed(
                    &frames_path,
                    lineno + 1,
                    format!(
                        "camera_id {} out of range (rig has {} cameras)",
                        cam.camera_id,
                        rig.camera_count()
                    ),
                ));
            }
            for obs in &cam.observations {
                if BinaryDescriptor::from_hex(&obs.descriptor_hex).is_err() {
                    return Err(DatasetError::malformed(
                        &frames_path,
                        lineno + 1,
                        format!("invalid descriptor hex '{}'", obs.descriptor_hex),
                    ));
                }
            }
        }
        frames.push(frame);
    }

    let gt_path = dir.join(GROUNDTRUTH_FILE);
    let groundtruth = if gt_path.exists() {
        let text = fs::read_to_string(&gt_path).map_err(|e| DatasetError::io(&gt_path, e))?;
        Some(
            crate::evaluation::Trajectory::parse(&text).map_err(|e| DatasetError::Invalid {
                path: gt_path.clone(),
                reason: e.to_string(),
            })?,
        )
    } else {
        None
    };

    let scene_path = dir.join(SCENE_FILE);
    let scene_json = if scene_path.exists() {
        let text = fs::read_to_string(&scene_path).map_err(|e| DatasetError::io(&scene_path, e))?;
        Some(
            serde_json::from_str(&text).map_err(|e| DatasetError::Invalid {
                path: scene_path.clone(),
                reason: e.to_string(),
            })?,
        )
    } else {
        None
    };

    Ok(Dataset {
        rig,
        frames,
        groundtruth,
        scene_json,
    })
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
    save_rig(&dataset.rig, &dir.join(RIG_FILE))?;
    let mut lines = String::new();
    for frame in &dataset.frames {
        writeln!(
            lines,
            "{}",
            serde_json::to_string(frame).expect("frame serializes")
        )
        .expect("string write");
    }
    let frames_path = dir.join(FRAMES_FILE);
    fs::write(&frames_path, lines).map_err(|e| DatasetError::io(&frames_path, e))?;
    if let Some(gt) = &dataset.groundtruth {
        let gt_path = dir.join(GROUNDTRUTH_FILE);
        fs::write(&gt_path, gt.to_text()).map_err(|e| DatasetError::io(&gt_path, e))?;
    }
    if let Some(scene) = &dataset.scene_json {
        let scene_path = dir.join(SCENE_FILE);
        fs::write(
            &scene_path,
            serde_json::to_string_pretty(scene).expect("scene serializes"),
        )
        .map_err(|e| DatasetError::io(&scene_path, e))?;
    }
    Ok(())
}

/// Track files used by `calibrate --tracks`: `track_<camera_id>.jsonl` plus
/// an `intrinsics.json` sidecar (back-projection needs the camera model).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrackLineRecord {
    pub timestamp: f64,
    pub pose: PoseQuat,
    pub features: Vec<TrackFeatureRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrackFeatureRecord {
    pub u: f64,
    pub v: f64,
    pub depth: Option<f64>,
    pub descriptor_hex: String,
}

pub fn save_tracks(
    tracks: &[crate::calibration::CameraTrack],
    dir: &Path,
) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
    let intrinsics: Vec<(usize, crate::camera::CameraIntrinsics)> =
        tracks.iter().map(|t| (t.camera_id, t.intrinsics)).collect();
    let intr_path = dir.join("intrinsics.json");
    fs::write(
        &intr_path,
        serde_json::to_string_pretty(&intrinsics).expect("intrinsics serialize"),
    )
    .map_err(|e| DatasetError::io(&intr_path, e))?;
    for track in tracks {
        let mut lines = String::new();
        for kf in &track.keyframes {
            let record = TrackLineRecord {
                timestamp: kf.timestamp,
                pose: PoseQuat::from(&kf.pose),
                features: kf
                    .features
                    .iter()
                    .map(|f| TrackFeatureRecord {
                        u: f.u,
                        v: f.v,
                        depth: f.depth,
                        descriptor_hex: f.descriptor.to_hex(),
                    })
                    .collect(),
            };
            writeln!(
                lines,
                "{}",
                serde_json::to_string(&record).expect("track line serializes")
            )
            .expect("string write");
        }
        let path = dir.join(format!("track_{}.jsonl", track.camera_id));
        fs::write(&path, lines).map_err(|e| DatasetError::io(&path, e))?;
    }
    Ok(())
}

pub fn load_tracks(dir: &Path) -> Result<Vec<crate::calibration::CameraTrack>, DatasetError> {
    let intr_path = dir.join("intrinsics.json");
    let text = fs::read_to_string(&intr_path).map_err(|e| DatasetError::io(&intr_path, e))?;
    let intrinsics: Vec<(usize, crate::camera::CameraIntrinsics)> = serde_json::from_str(&text)
        .map_err(|e| DatasetError::Invalid {
            path: intr_path.clone(),
            reason: e.to_string(),
        })?;
    let mut tracks = Vec::new();
    for (camera_id, intr) in intrinsics {
        let path = dir.join(format!("track_{camera_id}.jsonl"));
        let text = fs::read_to_string(&path).map_err(|e| DatasetError::io(&path, e))?;
        let mut keyframes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: TrackLineRecord = serde_json::from_str(line)
                .map_err(|e| DatasetError::malformed(&path, lineno + 1, e.to_string()))?;
            let mut features = Vec::new();
            for f in &record.features {
                let descriptor = BinaryDescriptor::from_hex(&f.descriptor_hex).map_err(|e| {
                    DatasetError::malformed(&path, lineno + 1, e.to_string())
                })?;
                features.push(crate::calibration::TrackFeature {
                    u: f.u,
                    v: f.v,
                    depth: f.depth,
                    descriptor,
                });
            }
            keyframes.push(crate::calibration::TrackKeyFrame {
                timestamp: record.timestamp,
                pose: record.pose.to_pose(),
                features,
            });
        }
        tracks.push(crate::calibration::CameraTrack {
            camera_id,
            intrinsics: intr,
            keyframes,
        });
    }
    Ok(tracks)
}
