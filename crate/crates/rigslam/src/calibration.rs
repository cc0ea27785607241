//! On-the-fly extrinsic calibration of a non-overlapping rig.
//!
//! Each camera runs an independent simplified SLAM pass producing a
//! [`CameraTrack`]: keyframe poses in that camera's own start frame plus
//! depth-valid features. Rotating the rig makes cameras revisit each other's
//! scenery; cross-camera feature matches yield rigid ICP constraints, and a
//! pose graph over all keyframes, anchored at the main camera's first
//! keyframe, recovers every camera's start pose relative to the main camera.
//! On a rigid rig those start poses are exactly the extrinsics T_cis.

use crate::camera::CameraIntrinsics;
use crate::features::{match_descriptors, BinaryDescriptor};
use crate::geometry::{compose, inverse, SE3Pose};
use crate::optimizer::{pose_graph_solve, OptimizeError, RelativePoseEdge, SolverConfig};
use nalgebra::{Matrix3, Matrix6, Vector3};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("ICP needs at least 3 point pairs, got {0}")]
    TooFewPairs(usize),
    #[error("degenerate point geometry (collinear or coincident): {0}")]
    DegenerateGeometry(String),
    #[error("no cross-camera matches between cameras {a} and {b}; ensure overlap data by rotating the rig")]
    NoOverlap { a: usize, b: usize },
    #[error("calibration needs at least two camera tracks")]
    SingleCamera,
    #[error("cameras {0:?} are not connected to the main camera by cross matches; ensure overlap data by rotating the rig")]
    DisconnectedCameras(Vec<usize>),
    #[error("unknown main camera id {0}")]
    UnknownMainCamera(usize),
    #[error("invalid track for camera {camera}: {reason}")]
    InvalidTrack { camera: usize, reason: String },
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
}

/// One keyframe of a per-camera track. `pose` maps camera coordinates into
/// the camera's own start frame (the first keyframe pose is the identity).
#[derive(Clone, Debug)]
pub struct TrackKeyFrame {
    pub timestamp: f64,
    pub pose: SE3Pose,
    pub features: Vec<TrackFeature>,
}

#[derive(Clone, Debug)]
pub struct TrackFeature {
    pub u: f64,
    pub v: f64,
    pub depth: Option<f64>,
    pub descriptor: BinaryDescriptor,
}

/// The output of one camera's independent tracking pass.
#[derive(Clone, Debug)]
pub struct CameraTrack {
    pub camera_id: usize,
    pub intrinsics: CameraIntrinsics,
    pub keyframes: Vec<TrackKeyFrame>,
}

impl CameraTrack {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        let err = |reason: String| CalibrationError::InvalidTrack {
            camera: self.camera_id,
            reason,
        };
        let Some(first) = self.keyframes.first() else {
            return Err(err("track has no keyframes".into()));
        };
        let defect = (first.pose.rotation() - Matrix3::identity())
            .iter()
            .chain(first.pose.translation().iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        if defect > 1e-9 {
            return Err(err("first keyframe pose must be the identity".into()));
        }
        for w in self.keyframes.windows(2) {
            if w[1].timestamp <= w[0].timestamp {
                return Err(err(format!(
                    "timestamps not strictly increasing at {}",
                    w[1].timestamp
                )));
            }
        }
        Ok(())
    }

    /// Camera-frame 3D points of the depth-valid features of keyframe `k`.
    fn lifted_points(&self, k: usize) -> Vec<(usize, Vector3<f64>)> {
        self.keyframes[k]
            .features
            .iter()
            .enumerate()
            .filter_map(|(i, f)| {
                let z = f.depth?;
                self.intrinsics
                    .back_project(f.u, f.v, z)
                    .ok()
                    .map(|p| (i, p))
            })
            .collect()
    }
}

/// A matched keyframe pair across cameras with its ICP-estimated relative
/// pose: points of camera b's keyframe map into camera a's keyframe frame.
#[derive(Clone, Debug)]
pub struct CrossCameraMatch {
    pub camera_a: usize,
    pub keyframe_a: usize,
    pub camera_b: usize,
    pub keyframe_b: usize,
    pub pairs: Vec<(Vector3<f64>, Vector3<f64>)>,
    pub relative: SE3Pose,
}

/// Matching thresholds for cross-camera edge construction.
#[derive(Clone, Copy, Debug)]
pub struct CrossMatchParams {
    pub max_hamming: u32,
    pub ratio: f64,
    /// Strictly more matches than this are required for an edge.
    pub min_matches: usize,
}

impl Default for CrossMatchParams {
    fn default() -> Self {
        Self {
            max_hamming: crate::features::DEFAULT_MAX_HAMMING,
            ratio: crate::features::DEFAULT_MATCH_RATIO,
            min_matches: 10,
        }
    }
}

/// Closed-form rigid alignment minimizing 1/2 sum ||p_i - T p'_i||^2:
/// centroid subtraction, SVD of the cross-covariance, reflection-corrected
/// rotation, t = centroid(p) - R centroid(p').
pub fn icp_align(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> Result<SE3Pose, CalibrationError> {
    if pairs.len() < 3 {
        return Err(CalibrationError::TooFewPairs(pairs.len()));
    }
    let n = pairs.len() as f64;
    let centroid_p: Vector3<f64> = pairs.iter().map(|(p, _)| p).sum::<Vector3<f64>>() / n;
    let centroid_q: Vector3<f64> = pairs.iter().map(|(_, q)| q).sum::<Vector3<f64>>() / n;
    let mut w = Matrix3::<f64>::zeros();
    for (p, q) in pairs {
        w += (p - centroid_p) * (q - centroid_q).transpose();
    }
    let svd = w.svd(true, true);
    let sigma = svd.singular_values;
    if sigma[0] <= 0.0 || sigma[1] <= 1e-9 * sigma[0] {
        return Err(CalibrationError::DegenerateGeometry(format!(
            "singular values {:.3e}, {:.3e}, {:.3e}",
            sigma[0], sigma[1], sigma[2]
        )));
    }
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut rotation = u * v_t;
    if rotation.determinant() < 0.0 {
        let flip = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        rotation = u * flip * v_t;
    }
    let translation = centroid_p - rotation * centroid_q;
    Ok(SE3Pose::from_parts(rotation, translation))
}

/// Exhaustive keyframe-pair matching between two camera tracks. Pairs with
/// strictly more than `min_matches` depth-valid correspondences yield an ICP
/// edge. Errs with [`CalibrationError::NoOverlap`] when no pair qualifies.
pub fn find_cross_matches(
    track_a: &CameraTrack,
    track_b: &CameraTrack,
    params: &CrossMatchParams,
) -> Result<Vec<CrossCameraMatch>, CalibrationError> {
    let mut out = Vec::new();
    let lifted_b_all: Vec<Vec<(usize, Vector3<f64>)>> = (0..track_b.keyframes.len())
        .map(|kb| track_b.lifted_points(kb))
        .collect();
    for ka in 0..track_a.keyframes.len() {
        let lifted_a = track_a.lifted_points(ka);
        if lifted_a.len() <= params.min_matches {
            continue;
        }
        let descs_a: Vec<BinaryDescriptor> = lifted_a
            .iter()
            .map(|(i, _)| track_a.keyframes[ka].features[*i].descriptor)
            .collect();
        for (kb, lifted_b) in lifted_b_all.iter().enumerate() {
            if lifted_b.len() <= params.min_matches {
                continue;
            }
            let descs_b: Vec<BinaryDescriptor> = lifted_b
                .iter()
                .map(|(i, _)| track_b.keyframes[kb].features[*i].descriptor)
                .collect();
            let matches = match_descriptors(&descs_a, &descs_b, params.max_hamming, params.ratio);
            if matches.len() <= params.min_matches {
                continue;
            }
            let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = matches
                .iter()
                .map(|(ia, ib)| (lifted_a[*ia].1, lifted_b[*ib].1))
                .collect();
            match icp_align(&pairs) {
                Ok(relative) => out.push(CrossCameraMatch {
                    camera_a: track_a.camera_id,
                    keyframe_a: ka,
                    camera_b: track_b.camera_id,
                    keyframe_b: kb,
                    pairs,
                    relative,
                }),
                Err(CalibrationError::DegenerateGeometry(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    if out.is_empty() {
        return Err(CalibrationError::NoOverlap {
            a: track_a.camera_id,
            b: track_b.camera_id,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct CalibrationReport {
    pub sequential_edges: usize,
    pub cross_edges: usize,
    pub vertices: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct CalibrationResult {
    /// Extrinsics T_cis keyed by camera id; the main camera maps to the
    /// exact identity.
    pub extrinsics: BTreeMap<usize, SE3Pose>,
    pub report: CalibrationReport,
}

/// Full calibration: per-camera sequential edges, cross-camera ICP edges,
/// pose-graph optimization anchored at the main camera's first keyframe, and
/// extrinsic extraction from the optimized first-keyframe vertices.
pub fn calibrate(
    tracks: &[CameraTrack],
    main_camera: usize,
    params: &CrossMatchParams,
    config: &SolverConfig,
) -> Result<CalibrationResult, CalibrationError> {
    if tracks.len() < 2 {
        return Err(CalibrationError::SingleCamera);
    }
    for track in tracks {
        track.validate()?;
    }
    let order: BTreeMap<usize, usize> = tracks
        .iter()
        .enumerate()
        .map(|(i, t)| (t.camera_id, i))
        .collect();
    if !order.contains_key(&main_camera) {
        return Err(CalibrationError::UnknownMainCamera(main_camera));
    }

    // Vertex ids: consecutive per track, in track order.
    let mut vertex_id: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut next = 0u64;
    for track in tracks {
        for k in 0..track.keyframes.len() {
            vertex_id.insert((track.camera_id, k), next);
            next += 1;
        }
    }

    // Sequential edges from consecutive keyframe poses: with vertices in the
    // world-to-camera convention, measured = A_k^-1 * A_{k+1}.
    let mut edges: Vec<RelativePoseEdge> = Vec::new();
    let mut sequential_edges = 0usize;
    for track in tracks {
        for k in 0..track.keyframes.len().saturating_sub(1) {
            let measured = compose(
                &inverse(&track.keyframes[k].pose),
                &track.keyframes[k + 1].pose,
            );
            edges.push(RelativePoseEdge::new(
                vertex_id[&(track.camera_id, k)],
                vertex_id[&(track.camera_id, k + 1)],
                measured,
            ));
            sequential_edges += 1;
        }
    }

    // Cross edges between every camera pair; a pair with no overlap at all
    // is fine as long as the camera graph stays connected.
    let mut cross: Vec<CrossCameraMatch> = Vec::new();
    for i in 0..tracks.len() {
        for j in (i + 1)..tracks.len() {
            match find_cross_matches(&tracks[i], &tracks[j], params) {
                Ok(mut matches) => cross.append(&mut matches),
                Err(CalibrationError::NoOverlap { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    for m in &cross {
        // More correspondences, more trustworthy edge.
        let count = (m.pairs.len() as f64).clamp(10.0, 100.0);
        edges.push(RelativePoseEdge {
            from_id: vertex_id[&(m.camera_a, m.keyframe_a)],
            to_id: vertex_id[&(m.camera_b, m.keyframe_b)],
            measured: m.relative,
            information: Matrix6::identity() * count,
        });
    }

    // Initial placement: the main camera sits at its own track poses; other
    // cameras are placed transitively through their first usable cross edge.
    let mut start_inverse: BTreeMap<usize, SE3Pose> = BTreeMap::new();
    start_inverse.insert(main_camera, SE3Pose::identity());
    loop {
        let mut progressed = false;
        for m in &cross {
            let (placed, unplaced, flip) = match (
                start_inverse.contains_key(&m.camera_a),
                start_inverse.contains_key(&m.camera_b),
            ) {
                (true, false) => (m.camera_a, m.camera_b, false),
                (false, true) => (m.camera_b, m.camera_a, true),
                _ => continue,
            };
            let (kf_placed, kf_unplaced) = if flip {
                (m.keyframe_b, m.keyframe_a)
            } else {
                (m.keyframe_a, m.keyframe_b)
            };
            let relative = if flip {
                inverse(&m.relative)
            } else {
                m.relative
            };
            // V_placed = A_placed^-1 * B_placed^-1; the edge gives
            // V_unplaced = relative^-1 * V_placed (for a placed "from" side),
            // hence B_unplaced^-1 = A_unplaced * V_unplaced.
            let track_placed = &tracks[order[&placed]];
            let track_unplaced = &tracks[order[&unplaced]];
            let v_placed = compose(
                &inverse(&track_placed.keyframes[kf_placed].pose),
                &start_inverse[&placed],
            );
            let v_unplaced = compose(&inverse(&relative), &v_placed);
            let b_inv = compose(&track_unplaced.keyframes[kf_unplaced].pose, &v_unplaced);
            start_inverse.insert(unplaced, b_inv);
            progressed = true;
        }
        if !progressed {
            break;
        }
    }
    let missing: Vec<usize> = tracks
        .iter()
        .map(|t| t.camera_id)
        .filter(|id| !start_inverse.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(CalibrationError::DisconnectedCameras(missing));
    }

    let mut vertices: BTreeMap<u64, SE3Pose> = BTreeMap::new();
    for track in tracks {
        let b_inv = start_inverse[&track.camera_id];
        for (k, kf) in track.keyframes.iter().enumerate() {
            vertices.insert(
                vertex_id[&(track.camera_id, k)],
                compose(&inverse(&kf.pose), &b_inv),
            );
        }
    }
    let anchor = vertex_id[&(main_camera, 0)];
    let fixed: BTreeSet<u64> = [anchor].into_iter().collect();
    let (solved, report) = pose_graph_solve(&vertices, &edges, &fixed, config)?;

    // T_cis is the optimized relative pose between camera i's first keyframe
    // and the main camera's first keyframe, normalized so the main camera's
    // extrinsic is the exact identity.
    let main_first_inv = inverse(&solved[&anchor]);
    let mut extrinsics = BTreeMap::new();
    for track in tracks {
        if track.camera_id == main_camera {
            extrinsics.insert(track.camera_id, SE3Pose::identity());
        } else {
            let v0 = solved[&vertex_id[&(track.camera_id, 0)]];
            extrinsics.insert(track.camera_id, compose(&v0, &main_first_inv));
        }
    }

    Ok(CalibrationResult {
        extrinsics,
        report: CalibrationReport {
            sequential_edges,
            cross_edges: cross.len(),
            vertices: vertices.len(),
            initial_cost: report.initial_cost,
            final_cost: report.final_cost,
            iterations: report.iterations,
        },
    })
}

/// Synthetic two-camera rotation sweep with ground-truth extrinsic
/// (yaw 90 degrees, 5 cm offset). Used by tests and the acceptance suite.
pub struct SweepSetup {
    pub tracks: Vec<CameraTrack>,
    pub true_extrinsic: SE3Pose,
}

/// Builds per-camera tracks of a rig rotating in place amid a cylinder of
/// landmarks, with Gaussian pixel noise and multiplicative depth noise.
/// Track poses are exact; the noise enters through the features, which is
/// where the cross-camera ICP edges read from.
pub fn rotation_sweep(
    keyframes: usize,
    pixel_sigma: f64,
    depth_rel_sigma: f64,
    seed: u64,
) -> SweepSetup {
    use crate::geometry::transform_point;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    let mut rng = StdRng::seed_from_u64(seed);
    let intrinsics = CameraIntrinsics {
        fx: 500.0,
        fy: 500.0,
        cx: 320.0,
        cy: 240.0,
        width: 640,
        height: 480,
        baseline: 0.1,
        depth_min: 0.3,
        depth_max: 12.0,
    };
    let true_extrinsic = SE3Pose::from_axis_angle(
        &Vector3::y(),
        -std::f64::consts::FRAC_PI_2,
        Vector3::new(0.05, 0.0, 0.0),
    );
    // Landmarks on a rough cylinder around the rig.
    let landmarks: Vec<(Vector3<f64>, BinaryDescriptor)> = (0..800)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let radius = rng.gen_range(2.0..5.0);
            let height = rng.gen_range(-1.5..1.5);
            (
                Vector3::new(radius * angle.cos(), height, radius * angle.sin()),
                BinaryDescriptor::random(&mut rng),
            )
        })
        .collect();

    let gauss = |rng: &mut StdRng, s: f64| {
        if s > 0.0 {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            s * (-2.0 * u1.ln()).sqrt() * u2.cos()
        } else {
            0.0
        }
    };

    let extrinsics = [SE3Pose::identity(), true_extrinsic];
    let total_angle = std::f64::consts::TAU * 1.1; // a bit over a full turn
    let mut tracks = Vec::new();
    for (cam_id, t_cs) in extrinsics.iter().enumerate() {
        let mut keyframes_out = Vec::new();
        let mut start_pose: Option<SE3Pose> = None;
        for k in 0..keyframes {
            let angle = total_angle * k as f64 / keyframes as f64;
            let t_sw = SE3Pose::from_axis_angle(&Vector3::y(), angle, Vector3::zeros());
            let cam_world = compose(t_cs, &t_sw); // world -> camera
            let cam_in_world = inverse(&cam_world);
            let start = *start_pose.get_or_insert(cam_in_world);
            let pose = compose(&inverse(&start), &cam_in_world);
            let mut features = Vec::new();
            for (p_w, desc) in &landmarks {
                let p_c = transform_point(&cam_world, p_w);
                if p_c.z < intrinsics.depth_min || p_c.z > intrinsics.depth_max {
                    continue;
                }
                let pix = intrinsics.project_unchecked(&p_c);
                if !intrinsics.contains_pixel(pix.u, pix.v) {
                    continue;
                }
                let depth = p_c.z * (1.0 + gauss(&mut rng, depth_rel_sigma));
                features.push(TrackFeature {
                    u: pix.u + gauss(&mut rng, pixel_sigma),
                    v: pix.v + gauss(&mut rng, pixel_sigma),
                    depth: Some(depth.clamp(intrinsics.depth_min, intrinsics.depth_max)),
                    descriptor: *desc,
                });
            }
            keyframes_out.push(TrackKeyFrame {
                timestamp: k as f64 * 0.25,
                pose,
                features,
            });
        }
        tracks.push(CameraTrack {
            camera_id: cam_id,
            intrinsics,
            keyframes: keyframes_out,
        });
    }
    SweepSetup {
        tracks,
        true_extrinsic,
    }
}
