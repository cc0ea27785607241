//! Synthetic world, trajectory, and observation generator; the source of all
//! ground truth.
//!
//! Generation is deterministic in the scene seed. Per-frame noise uses an
//! independent seeded stream per frame, so rendering order (or a future
//! parallel renderer) cannot change the output.
//!
//! Motion blur is not rendered; its tracking effect is modeled as extra
//! observation dropout for landmarks inside low-texture regions, scaling
//! with the image-plane flow during the exposure (see
//! [`wall_rotation_scenario`]).

use crate::camera::MultiCamRig;
use crate::dataset::{CameraFrameRecord, Dataset, FrameRecord, ObservationRecord};
use crate::evaluation::Trajectory;
use crate::features::BinaryDescriptor;
use crate::geometry::{compose, inverse, transform_point, SE3Pose};
use nalgebra::Vector3;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("rig leaves the world bounds at t = {timestamp:.3} s (position {x:.2}, {y:.2}, {z:.2})")]
    OutOfBounds {
        timestamp: f64,
        x: f64,
        y: f64,
        z: f64,
    },
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
}

fn default_frame_rate() -> f64 {
    20.0
}

/// Axis-aligned box with a landmark density multiplier in [0, 1] and an
/// optional extra per-observation dropout (low-contrast texture proxy).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LowTextureRegion {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub density_multiplier: f64,
    #[serde(default)]
    pub extra_dropout: f64,
}

impl LowTextureRegion {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Explicitly placed landmark group (e.g. a wall patch).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LandmarkCluster {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldConfig {
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub landmark_count: usize,
    #[serde(default)]
    pub low_texture_regions: Vec<LowTextureRegion>,
    #[serde(default)]
    pub clusters: Vec<LandmarkCluster>,
    /// When set, landmarks share descriptors in groups of this size
    /// (repetitive-texture scenes).
    #[serde(default)]
    pub repetitive_group_size: Option<usize>,
    /// Per-landmark maximum detection distance sampled uniformly from this
    /// range (texture scale: small texture is undetectable from far away).
    /// `None` leaves detection limited only by the camera depth range.
    #[serde(default)]
    pub detect_range: Option<[f64; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Closed smooth planar circuit with tangent heading.
    PlanarLoop,
    /// Straight corridor legs with 90-degree turns: out, cross, and back.
    Corridor,
    /// Smooth 6-DoF path from seeded low-order sinusoids, including one
    /// high-angular-rate shake segment.
    Handheld6dof,
    /// Pure yaw rotation in place (wall experiments).
    RotateInPlace,
}

fn default_leg_length() -> f64 {
    18.0
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub kind: TrajectoryKind,
    /// Linear speed in m/s.
    pub speed: f64,
    /// Angular speed in rad/s (turn rate, shake intensity, or spin rate).
    pub angular_speed: f64,
    pub duration: f64,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
    /// Straight-leg length of the corridor path.
    #[serde(default = "default_leg_length")]
    pub leg_length: f64,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub sigma_pixel: f64,
    pub sigma_depth_rel: f64,
    pub dropout: f64,
    pub descriptor_bit_flips: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub trajectory: TrajectoryConfig,
    pub noise: NoiseConfig,
    pub rig: MultiCamRig,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        if self.trajectory.duration <= 0.0 || self.trajectory.frame_rate <= 0.0 {
            return Err(SimulatorError::InvalidConfig(
                "duration and frame_rate must be positive".into(),
            ));
        }
        if self.trajectory.speed < 0.0 || self.trajectory.angular_speed < 0.0 {
            return Err(SimulatorError::InvalidConfig(
                "speed and angular_speed must be non-negative".into(),
            ));
        }
        let n = &self.noise;
        if n.sigma_pixel < 0.0 || n.sigma_depth_rel < 0.0 || !(0.0..=1.0).contains(&n.dropout) {
            return Err(SimulatorError::InvalidConfig(
                "noise sigmas must be non-negative and dropout within [0, 1]".into(),
            ));
        }
        for r in &self.world.low_texture_regions {
            if !(0.0..=1.0).contains(&r.density_multiplier) || !(0.0..=1.0).contains(&r.extra_dropout)
            {
                return Err(SimulatorError::InvalidConfig(
                    "region multipliers must be within [0, 1]".into(),
                ));
            }
        }
        self.rig
            .validate()
            .map_err(|e| SimulatorError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Landmark {
    pub id: u64,
    pub position: Vector3<f64>,
    pub descriptor: BinaryDescriptor,
    /// Extra dropout inherited from a containing low-texture region.
    pub extra_dropout: f64,
    /// Maximum distance at which this landmark registers as a feature.
    pub detect_radius: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub landmarks: Vec<Landmark>,
}

#[derive(Clone, Debug)]
pub struct SimulatedDataset {
    pub dataset: Dataset,
    pub world: SyntheticWorld,
}

/// Rig pose in the world (rig-to-world transform) at time `t`.
pub fn pose_at(config: &TrajectoryConfig, bounds_center: Vector3<f64>, t: f64) -> SE3Pose {
    match config.kind {
        TrajectoryKind::PlanarLoop => {
            let radius = (config.speed * config.duration) / std::f64::consts::TAU;
            let theta = std::f64::consts::TAU * t / config.duration;
            let position = bounds_center
                + Vector3::new(radius * theta.cos(), 0.0, radius * theta.sin());
            // Tangent heading: forward (+z of the rig) along the velocity.
            SE3Pose::from_axis_angle(&Vector3::y(), -theta, position)
        }
        TrajectoryKind::Corridor => corridor_pose(config, t),
        TrajectoryKind::Handheld6dof => handheld_pose(config, bounds_center, t),
        TrajectoryKind::RotateInPlace => SE3Pose::from_axis_angle(
            &Vector3::y(),
            config.angular_speed * t,
            bounds_center,
        ),
    }
}

/// Out-and-back corridor: a straight leg, a 90-degree left turn, a short
/// cross leg, another 90-degree left turn, and the return leg. The rig then
/// holds its final pose.
fn corridor_pose(config: &TrajectoryConfig, t: f64) -> SE3Pose {
    let leg = config.leg_length;
    const CROSS: f64 = 0.6;
    let v = config.speed.max(1e-9);
    let w = config.angular_speed.max(1e-9);
    let quarter = std::f64::consts::FRAC_PI_2 / w;
    let t_leg = leg / v;
    let t_cross = CROSS / v;

    // Heading is the yaw phi with forward = (sin phi, 0, cos phi).
    let phases = [
        (t_leg, 0),    // out along +x at z = -CROSS/2
        (quarter, 1),  // turn from +x heading to +z heading
        (t_cross, 2),  // cross to z = +CROSS/2
        (quarter, 3),  // turn from +z heading to -x heading
        (t_leg, 4),    // back along -x
    ];
    let mut remaining = t;
    let mut position = Vector3::new(0.0, 0.0, -CROSS / 2.0);
    let mut phi = std::f64::consts::FRAC_PI_2; // facing +x
    for (len, phase) in phases {
        let dt = remaining.min(len);
        match phase {
            0 => position.x += v * dt,
            1 => phi -= w * dt,
            2 => position.z += v * dt,
            3 => phi -= w * dt,
            4 => position.x -= v * dt,
            _ => unreachable!(),
        }
        remaining -= dt;
        if remaining <= 0.0 {
            break;
        }
    }
    SE3Pose::from_axis_angle(&Vector3::y(), phi, position)
}

/// Smooth sinusoidal 6-DoF path with one violent-shake window around the
/// middle of the sequence.
fn handheld_pose(config: &TrajectoryConfig, center: Vector3<f64>, t: f64) -> SE3Pose {
    // Low-order components seeded by duration-independent constants; the
    // scene seed enters through the world, keeping the path itself smooth
    // and reproducible.
    let amp = 0.25 * config.speed.max(0.1) / 0.3;
    let position = center
        + Vector3::new(
            amp * (0.31 * t + 0.4).sin() + 0.5 * amp * (0.83 * t).sin(),
            0.4 * amp * (0.47 * t + 1.3).sin(),
            amp * (0.53 * t + 2.1).sin() + 0.5 * amp * (0.29 * t).sin(),
        );
    let base = config.angular_speed.max(0.05);
    let mut yaw = 0.6 * (0.37 * t + 0.7).sin();
    let pitch = 0.25 * (0.59 * t + 1.9).sin();
    let roll = 0.2 * (0.43 * t + 0.2).sin();
    // Violent shake: high angular rate burst in the middle tenth.
    let shake_start = 0.45 * config.duration;
    let shake_end = 0.55 * config.duration;
    if t >= shake_start && t <= shake_end {
        yaw += 0.25 * (base / 0.05) * 0.02 * ((t - shake_start) * 18.0).sin();
    }
    let rot_y = SE3Pose::from_axis_angle(&Vector3::y(), yaw, Vector3::zeros());
    let rot_x = SE3Pose::from_axis_angle(&Vector3::x(), pitch, Vector3::zeros());
    let rot_z = SE3Pose::from_axis_angle(&Vector3::z(), roll, Vector3::zeros());
    let rotation = compose(&rot_y, &compose(&rot_x, &rot_z));
    SE3Pose::from_parts(*rotation.rotation(), position)
}

fn sample_gaussian<R: Rng>(rng: &mut R, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    sigma * (-2.0 * u1.ln()).sqrt() * u2.cos()
}

/// Builds the landmark set: uniform samples in the world box thinned by
/// low-texture regions, plus explicit clusters.
fn build_world(config: &SceneConfig) -> SyntheticWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lo = config.world.bounds_min;
    let hi = config.world.bounds_max;
    let mut landmarks = Vec::new();
    let mut next_id = 0u64;
    let mut push = |position: Vector3<f64>, rng: &mut ChaCha8Rng, landmarks: &mut Vec<Landmark>, next_id: &mut u64| {
        let extra_dropout = config
            .world
            .low_texture_regions
            .iter()
            .find(|r| r.contains(&position))
            .map(|r| r.extra_dropout)
            .unwrap_or(0.0);
        let detect_radius = match config.world.detect_range {
            Some([lo, hi]) => rng.gen_range(lo..hi.max(lo + 1e-9)),
            None => f64::INFINITY,
        };
        landmarks.push(Landmark {
            id: *next_id,
            position,
            descriptor: BinaryDescriptor::random(rng),
            extra_dropout,
            detect_radius,
        });
        *next_id += 1;
    };
    let keep_probability = |position: &Vector3<f64>| {
        config
            .world
            .low_texture_regions
            .iter()
            .find(|r| r.contains(position))
            .map(|r| r.density_multiplier)
            .unwrap_or(1.0)
            .clamp(0.0, 1.0)
    };
    for _ in 0..config.world.landmark_count {
        let position = Vector3::new(
            rng.gen_range(lo[0]..hi[0]),
            rng.gen_range(lo[1]..hi[1]),
            rng.gen_range(lo[2]..hi[2]),
        );
        if rng.gen_bool(keep_probability(&position)) {
            push(position, &mut rng, &mut landmarks, &mut next_id);
        }
    }
    for cluster in &config.world.clusters {
        for _ in 0..cluster.count {
            let position = Vector3::new(
                rng.gen_range(cluster.min[0]..cluster.max[0].max(cluster.min[0] + 1e-9)),
                rng.gen_range(cluster.min[1]..cluster.max[1].max(cluster.min[1] + 1e-9)),
                rng.gen_range(cluster.min[2]..cluster.max[2].max(cluster.min[2] + 1e-9)),
            );
            if rng.gen_bool(keep_probability(&position)) {
                push(position, &mut rng, &mut landmarks, &mut next_id);
            }
        }
    }
    if let Some(group) = config.world.repetitive_group_size {
        if group > 1 {
            let shared: Vec<BinaryDescriptor> = (0..landmarks.len().div_ceil(group))
                .map(|_| BinaryDescriptor::random(&mut rng))
                .collect();
            for lm in landmarks.iter_mut() {
                lm.descriptor = shared[(lm.id as usize) / group];
            }
        }
    }
    SyntheticWorld { landmarks }
}

/// Generates the full dataset: deterministic in the seed.
pub fn generate(config: &SceneConfig) -> Result<SimulatedDataset, SimulatorError> {
    config.validate()?;
    let world = build_world(config);
    let center = Vector3::new(
        0.5 * (config.world.bounds_min[0] + config.world.bounds_max[0]),
        0.5 * (config.world.bounds_min[1] + config.world.bounds_max[1]),
        0.5 * (config.world.bounds_min[2] + config.world.bounds_max[2]),
    );

    let frame_count = (config.trajectory.duration * config.trajectory.frame_rate).floor() as usize;
    let mut frames = Vec::with_capacity(frame_count);
    let mut gt_samples = Vec::with_capacity(frame_count);
    for k in 0..frame_count {
        let t = k as f64 / config.trajectory.frame_rate;
        let rig_in_world = pose_at(&config.trajectory, center, t);
        let p = rig_in_world.translation();
        let inside = (0..3).all(|i| {
            p[i] >= config.world.bounds_min[i] - 1e-9 && p[i] <= config.world.bounds_max[i] + 1e-9
        });
        if !inside {
            return Err(SimulatorError::OutOfBounds {
                timestamp: t,
                x: p.x,
                y: p.y,
                z: p.z,
            });
        }
        let t_sw = inverse(&rig_in_world);

        // Per-frame noise stream: output independent of rendering order.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(k as u64 + 1);

        let mut cameras = Vec::with_capacity(config.rig.camera_count());
        for cam_idx in 0..config.rig.camera_count() {
            let cam = config.rig.intrinsics(cam_idx).expect("valid index");
            let cam_pose = config.rig.camera_pose(cam_idx, &t_sw).expect("valid index");
            let mut observations = Vec::new();
            for lm in &world.landmarks {
                let p_c = transform_point(&cam_pose, &lm.position);
                if p_c.z < cam.depth_min || p_c.z > cam.depth_max {
                    continue;
                }
                if p_c.norm() > lm.detect_radius {
                    continue;
                }
                let pix = cam.project_unchecked(&p_c);
                if !cam.contains_pixel(pix.u, pix.v) {
                    continue;
                }
                let drop = (config.noise.dropout + lm.extra_dropout).min(1.0);
                if drop > 0.0 && rng.gen_bool(drop) {
                    continue;
                }
                let u = pix.u + sample_gaussian(&mut rng, config.noise.sigma_pixel);
                let v = pix.v + sample_gaussian(&mut rng, config.noise.sigma_pixel);
                if !cam.contains_pixel(u, v) {
                    continue;
                }
                let noisy_depth =
                    p_c.z * (1.0 + sample_gaussian(&mut rng, config.noise.sigma_depth_rel));
                let depth = if noisy_depth >= cam.depth_min && noisy_depth <= cam.depth_max {
                    Some(noisy_depth)
                } else {
                    None
                };
                let mut descriptor = lm.descriptor;
                for _ in 0..config.noise.descriptor_bit_flips {
                    descriptor.flip_bit(rng.gen_range(0..256));
                }
                observations.push(ObservationRecord {
                    u,
                    v,
                    depth,
                    descriptor_hex: descriptor.to_hex(),
                    true_landmark_id: Some(lm.id),
                });
            }
            cameras.push(CameraFrameRecord {
                camera_id: cam_idx,
                observations,
            });
        }
        frames.push(FrameRecord {
            timestamp: t,
            cameras,
        });
        gt_samples.push((t, rig_in_world));
    }

    let groundtruth = Trajectory::new(gt_samples).expect("monotonic frame timestamps");
    let dataset = Dataset {
        rig: config.rig.clone(),
        frames,
        groundtruth: Some(groundtruth),
        scene_json: Some(serde_json::to_value(config).expect("config serializes")),
    };
    Ok(SimulatedDataset { dataset, world })
}

/// Standard two-camera rig: main camera forward, second camera yawed away,
/// both with the same intrinsics.
pub fn two_camera_rig(second_yaw: f64, offset: Vector3<f64>) -> MultiCamRig {
    use crate::camera::{CameraIntrinsics, RigCamera};
    let intrinsics = CameraIntrinsics {
        fx: 500.0,
        fy: 500.0,
        cx: 320.0,
        cy: 240.0,
        width: 640,
        height: 480,
        baseline: 0.1,
        depth_min: 0.2,
        depth_max: 10.0,
    };
    MultiCamRig::new(vec![
        RigCamera {
            intrinsics,
            extrinsic: SE3Pose::identity(),
        },
        RigCamera {
            intrinsics,
            extrinsic: SE3Pose::from_axis_angle(&Vector3::y(), second_yaw, offset),
        },
    ])
    .expect("valid rig")
}

/// Wall-rotation scenario: the rig spins 90 degrees in place facing a
/// sparse-landmark wall patch at `distance`; the second camera faces the
/// open textured part of the room throughout the sweep. Image-plane blur at
/// the given spin rate is modeled as extra dropout on the low-contrast wall
/// landmarks.
pub fn wall_rotation_scenario(distance: f64, angular_speed: f64, seed: u64) -> SceneConfig {
    let rig = two_camera_rig(std::f64::consts::PI, Vector3::zeros());
    let exposure = 0.030; // seconds
    let fx = 500.0;
    let blur_px = fx * angular_speed * exposure;
    // Low-contrast features die quickly with blur; the logistic knee sits
    // at 5 px of flow with a 0.8 px width.
    let extra_dropout = (1.0 / (1.0 + (-(blur_px - 5.0) / 0.8).exp())).clamp(0.0, 0.95);

    // Flat wall planes in front (z = distance) and to the side (x =
    // distance), covering the whole 90-degree sweep. Modest landmark
    // density: from up close the camera sees only a small patch of it.
    let wall_density = 200.0; // landmarks per square meter of wall
    let front_area = (distance + 4.2) * 2.4;
    let side_area = (distance + 1.2) * 2.4;
    let wall = LandmarkCluster {
        min: [-1.2, -1.2, distance],
        max: [distance + 3.0, 1.2, distance + 0.08],
        count: (wall_density * front_area) as usize,
    };
    let wall_side = LandmarkCluster {
        min: [distance, -1.2, -1.2],
        max: [distance + 0.08, 1.2, distance],
        count: (wall_density * side_area) as usize,
    };
    let wall_region = LowTextureRegion {
        min: [-1.3, -1.3, distance - 0.01],
        max: [distance + 3.1, 1.3, distance + 0.09],
        density_multiplier: 1.0,
        extra_dropout,
    };
    let wall_side_region = LowTextureRegion {
        min: [distance - 0.01, -1.3, -1.3],
        max: [distance + 0.09, 1.3, distance + 0.01],
        density_multiplier: 1.0,
        extra_dropout,
    };
    // The open room: a rich shell behind the rig, which the rear camera
    // sweeps for the entire rotation.
    let room = LandmarkCluster {
        min: [-4.5, -1.5, -4.5],
        max: [1.0, 1.5, -1.5],
        count: 900,
    };
    let room_side = LandmarkCluster {
        min: [-4.5, -1.5, -1.5],
        max: [-1.5, 1.5, 1.0],
        count: 500,
    };

    let duration = std::f64::consts::FRAC_PI_2 / angular_speed;
    let extent = distance + 4.5;
    SceneConfig {
        seed,
        world: WorldConfig {
            // Symmetric bounds keep the spin center at the origin.
            bounds_min: [-extent, -2.0, -extent],
            bounds_max: [extent, 2.0, extent],
            landmark_count: 0,
            low_texture_regions: vec![wall_region, wall_side_region],
            clusters: vec![wall, wall_side, room, room_side],
            repetitive_group_size: None,
            detect_range: None,
        },
        trajectory: TrajectoryConfig {
            kind: TrajectoryKind::RotateInPlace,
            speed: 0.0,
            angular_speed,
            duration,
            frame_rate: 20.0,
            leg_length: default_leg_length(),
        },
        noise: NoiseConfig {
            sigma_pixel: 0.3,
            sigma_depth_rel: 0.005,
            dropout: 0.03,
            descriptor_bit_flips: 2,
        },
        rig,
    }
}

/// A rich rectangular room scene with a planar loop trajectory.
pub fn room_scene(seed: u64, noise: NoiseConfig) -> SceneConfig {
    SceneConfig {
        seed,
        world: WorldConfig {
            bounds_min: [-4.0, -1.5, -4.0],
            bounds_max: [4.0, 1.5, 4.0],
            landmark_count: 1500,
            low_texture_regions: vec![],
            clusters: vec![],
            repetitive_group_size: None,
            detect_range: None,
        },
        trajectory: TrajectoryConfig {
            kind: TrajectoryKind::PlanarLoop,
            speed: 0.25,
            angular_speed: 0.0,
            duration: 20.0,
            frame_rate: 20.0,
            leg_length: default_leg_length(),
        },
        noise,
        rig: two_camera_rig(-std::f64::consts::FRAC_PI_2, Vector3::new(0.05, 0.0, 0.0)),
    }
}

/// Out-and-back corridor: textured wall slabs along both sides, optional
/// low-texture far half, and a U-turn at `leg_length`. Texture-scale
/// detection limits keep per-frame feature counts realistic.
pub fn corridor_scene(seed: u64, noise: NoiseConfig, low_texture: bool, leg_length: f64) -> SceneConfig {
    let mut regions = Vec::new();
    if low_texture {
        regions.push(LowTextureRegion {
            min: [leg_length + 1.0, -2.0, -1.3],
            max: [22.0, 2.0, 1.3],
            density_multiplier: 0.05,
            extra_dropout: 0.0,
        });
    }
    let wall_density = 70.0; // per square meter of wall
    let wall_area = 24.0 * 3.0;
    let walls = [
        LandmarkCluster {
            min: [-2.0, -1.5, -1.25],
            max: [22.0, 1.5, -1.0],
            count: (wall_density * wall_area) as usize,
        },
        LandmarkCluster {
            min: [-2.0, -1.5, 1.0],
            max: [22.0, 1.5, 1.25],
            count: (wall_density * wall_area) as usize,
        },
    ];
    let v = 0.8;
    let w = 0.6;
    let duration = (2.0 * leg_length + 0.6) / v + 2.0 * std::f64::consts::FRAC_PI_2 / w + 0.5;
    SceneConfig {
        seed,
        world: WorldConfig {
            bounds_min: [-2.0, -1.5, -1.25],
            bounds_max: [22.0, 1.5, 1.25],
            landmark_count: 0,
            low_texture_regions: regions,
            clusters: walls.to_vec(),
            repetitive_group_size: None,
            detect_range: Some([1.5, 3.5]),
        },
        trajectory: TrajectoryConfig {
            kind: TrajectoryKind::Corridor,
            speed: v,
            angular_speed: w,
            duration,
            frame_rate: 20.0,
            leg_length,
        },
        noise,
        rig: two_camera_rig(-std::f64::consts::FRAC_PI_2, Vector3::new(0.05, 0.0, 0.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::save_dataset;
    use approx::assert_abs_diff_eq;

    fn quiet_noise() -> NoiseConfig {
        NoiseConfig {
            sigma_pixel: 0.0,
            sigma_depth_rel: 0.0,
            dropout: 0.0,
            descriptor_bit_flips: 0,
        }
    }

    #[test]
    fn noise_free_observations_reproject_exactly() {
        let mut config = room_scene(3, quiet_noise());
        config.trajectory.duration = 2.0;
        let sim = generate(&config).unwrap();
        let world: std::collections::BTreeMap<u64, &Landmark> =
            sim.world.landmarks.iter().map(|l| (l.id, l)).collect();
        let gt = sim.dataset.groundtruth.as_ref().unwrap();
        for (frame, (_, rig_in_world)) in sim.dataset.frames.iter().zip(gt.samples.iter()) {
            let t_sw = inverse(rig_in_world);
            for cam in &frame.cameras {
                for obs in &cam.observations {
                    let lm = world[&obs.true_landmark_id.unwrap()];
                    let pix = sim
                        .dataset
                        .rig
                        .world_to_pixel(cam.camera_id, &t_sw, &lm.position)
                        .unwrap();
                    assert_abs_diff_eq!(obs.u, pix.u, epsilon = 1e-9);
                    assert_abs_diff_eq!(obs.v, pix.v, epsilon = 1e-9);
                    let depth = obs.depth.unwrap();
                    let p_c = transform_point(
                        &sim.dataset.rig.camera_pose(cam.camera_id, &t_sw).unwrap(),
                        &lm.position,
                    );
                    assert_abs_diff_eq!(depth, p_c.z, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let mut config = room_scene(7, NoiseConfig {
            sigma_pixel: 0.5,
            sigma_depth_rel: 0.01,
            dropout: 0.05,
            descriptor_bit_flips: 3,
        });
        config.trajectory.duration = 1.5;
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        save_dataset(&a.dataset, dir_a.path()).unwrap();
        save_dataset(&b.dataset, dir_b.path()).unwrap();
        for file in ["frames.jsonl", "groundtruth.txt", "rig.json", "scene.json"] {
            let bytes_a = std::fs::read(dir_a.path().join(file)).unwrap();
            let bytes_b = std::fs::read(dir_b.path().join(file)).unwrap();
            assert_eq!(bytes_a, bytes_b, "{file} differs between identical seeds");
        }
        // A different seed produces different observations.
        config.seed = 8;
        let c = generate(&config).unwrap();
        assert_ne!(
            a.dataset.frames[0].cameras[0].observations.len(),
            0
        );
        let count_a: usize = a.dataset.frames.iter().map(|f| f.cameras[0].observations.len()).sum();
        let count_c: usize = c.dataset.frames.iter().map(|f| f.cameras[0].observations.len()).sum();
        assert!(count_a != count_c || a.world.landmarks[0].position != c.world.landmarks[0].position);
    }

    #[test]
    fn emitted_observations_respect_camera_constraints() {
        let config = room_scene(11, NoiseConfig {
            sigma_pixel: 1.0,
            sigma_depth_rel: 0.02,
            dropout: 0.1,
            descriptor_bit_flips: 5,
        });
        let sim = generate(&config).unwrap();
        for frame in &sim.dataset.frames {
            for cam in &frame.cameras {
                let intr = sim.dataset.rig.intrinsics(cam.camera_id).unwrap();
                for obs in &cam.observations {
                    assert!(intr.contains_pixel(obs.u, obs.v));
                    if let Some(d) = obs.depth {
                        assert!(d >= intr.depth_min && d <= intr.depth_max);
                    }
                }
            }
        }
    }

    #[test]
    fn groundtruth_timestamps_match_frames() {
        let mut config = room_scene(13, quiet_noise());
        config.trajectory.duration = 2.0;
        let sim = generate(&config).unwrap();
        let gt = sim.dataset.groundtruth.as_ref().unwrap();
        assert_eq!(gt.len(), sim.dataset.frames.len());
        for ((t_gt, _), frame) in gt.samples.iter().zip(sim.dataset.frames.iter()) {
            assert_eq!(*t_gt, frame.timestamp);
        }
    }

    #[test]
    fn planar_loop_closes() {
        let config = room_scene(1, quiet_noise());
        let center = Vector3::new(0.0, 0.0, 0.0);
        let start = pose_at(&config.trajectory, center, 0.0);
        let end = pose_at(&config.trajectory, center, config.trajectory.duration);
        assert_abs_diff_eq!(start.translation(), end.translation(), epsilon = 1e-9);
        assert!(compose(&start, &inverse(&end)).rotation_angle() < 1e-9);
    }

    #[test]
    fn corridor_returns_to_start() {
        let config = corridor_scene(1, quiet_noise(), false, 18.0);
        let t_total = config.trajectory.duration;
        let start = pose_at(&config.trajectory, Vector3::zeros(), 0.0);
        let end = pose_at(&config.trajectory, Vector3::zeros(), t_total);
        // Returns to the start x, on the other side of the band, facing back.
        assert_abs_diff_eq!(end.translation().x, start.translation().x, epsilon = 0.2);
        assert_abs_diff_eq!(end.translation().z, 0.3, epsilon = 1e-9);
        let relative_yaw = compose(&start, &inverse(&end)).rotation_angle();
        assert_abs_diff_eq!(relative_yaw, std::f64::consts::PI, epsilon = 1e-9);
    }

    #[test]
    fn out_of_bounds_trajectory_names_timestamp() {
        let mut config = room_scene(1, quiet_noise());
        // A loop too large for the room.
        config.trajectory.speed = 5.0;
        config.trajectory.duration = 20.0;
        match generate(&config) {
            Err(SimulatorError::OutOfBounds { timestamp, .. }) => assert!(timestamp >= 0.0),
            other => panic!("expected OutOfBounds, got {other:?}"),
        }
    }

    #[test]
    fn corridor_low_texture_counts() {
        // Forward camera inside the sparse half sees few region landmarks
        // while the side camera still faces the textured near half.
        let config = corridor_scene(5, quiet_noise(), true, 10.0);
        let sim = generate(&config).unwrap();
        let world: std::collections::BTreeMap<u64, &Landmark> =
            sim.world.landmarks.iter().map(|l| (l.id, l)).collect();
        let region = &config.world.low_texture_regions[0];
        let gt = sim.dataset.groundtruth.as_ref().unwrap();
        let mut checked = 0;
        for (frame, (_, pose)) in sim.dataset.frames.iter().zip(gt.samples.iter()) {
            let x = pose.translation().x;
            // Outbound, just before the region boundary at x = 11.
            let heading_out = pose.rotation()[(0, 2)] > 0.9; // forward ~ +x
            if !(9.5..10.5).contains(&x) || !heading_out {
                continue;
            }
            checked += 1;
            let in_region = frame.cameras[0]
                .observations
                .iter()
                .filter(|o| region.contains(&world[&o.true_landmark_id.unwrap()].position))
                .count();
            let side_total = frame.cameras[1].observations.len();
            assert!(in_region < 15, "forward sees {in_region} sparse landmarks");
            assert!(side_total >= 50, "side camera sees only {side_total}");
        }
        assert!(checked > 0, "no frames sampled in the checking window");
    }

    #[test]
    fn wall_scenario_counts_scale_with_distance() {
        let near = generate(&wall_rotation_scenario(0.5, 0.25, 3)).unwrap();
        let far = generate(&wall_rotation_scenario(1.0, 0.25, 3)).unwrap();
        // Compare forward-camera landmark counts on the first frame: the
        // flat wall shows fewer landmarks from up close.
        let count = |sim: &SimulatedDataset| sim.dataset.frames[0].cameras[0].observations.len();
        assert!(
            count(&near) < count(&far),
            "near {} versus far {}",
            count(&near),
            count(&far)
        );
        // The rear camera sees a rich view in both.
        assert!(near.dataset.frames[0].cameras[1].observations.len() >= 80);
    }

    #[test]
    fn wall_scenario_dropout_rises_with_speed() {
        let slow = generate(&wall_rotation_scenario(0.5, 0.25, 9)).unwrap();
        let fast = generate(&wall_rotation_scenario(0.5, 0.8, 9)).unwrap();
        let wall_obs = |sim: &SimulatedDataset| -> f64 {
            let frames = sim.dataset.frames.len().min(10);
            sim.dataset.frames[..frames]
                .iter()
                .map(|f| f.cameras[0].observations.len())
                .sum::<usize>() as f64
                / frames as f64
        };
        assert!(
            wall_obs(&fast) < 0.6 * wall_obs(&slow),
            "fast {} versus slow {}",
            wall_obs(&fast),
            wall_obs(&slow)
        );
    }

    #[test]
    fn repetitive_descriptors_share_groups() {
        let mut config = room_scene(21, quiet_noise());
        config.world.landmark_count = 100;
        config.world.repetitive_group_size = Some(10);
        let sim = generate(&config).unwrap();
        let d0 = sim.world.landmarks[0].descriptor;
        let d5 = sim.world.landmarks[5].descriptor;
        assert_eq!(d0, d5);
        let unique: std::collections::BTreeSet<_> = sim
            .world
            .landmarks
            .iter()
            .map(|l| l.descriptor)
            .collect();
        assert!(unique.len() <= sim.world.landmarks.len().div_ceil(10) + 1);
    }
}

