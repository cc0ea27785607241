//! Multi-RGB-D-camera SLAM engine with non-overlapping fields of view.
//!
//! The crate provides, in rough dependency order:
//!
//! - [`geometry`]: SE(3) transforms and the exponential/logarithm maps.
//! - [`camera`]: pinhole + virtual-stereo model and the multi-camera rig.
//! - [`features`]: binary descriptors, matching, bag-of-words signatures.
//! - [`map`]: map points, multi-keyframes, and the covisibility graph.
//! - [`optimizer`]: bundle adjustment with analytic Jacobians and pose-graph
//!   optimization.
//! - [`calibration`]: on-the-fly rig extrinsic calibration from per-camera
//!   tracks.
//! - [`simulator`]: synthetic worlds, trajectories, and observations.
//! - [`pipeline`]: the tracking / local-mapping / loop-closing engine.
//! - [`evaluation`]: trajectory alignment, ATE-RMSE, tracking rate.
//! - [`dataset`]: dataset and configuration file formats shared by the CLI.

pub mod calibration;
pub mod camera;
pub mod dataset;
pub mod evaluation;
pub mod features;
pub mod geometry;
pub mod map;
pub mod optimizer;
pub mod pipeline;
pub mod simulator;
