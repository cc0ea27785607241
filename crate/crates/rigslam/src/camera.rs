//! Pinhole + virtual-stereo camera model and the multi-camera rig.
//!
//! Every RGB-D camera is treated as a virtual stereo pair: an observation is
//! (u, v, u_r) where u_r is the horizontal coordinate the point would have on
//! a virtual right camera displaced by the baseline `b`. The rig groups
//! several cameras rigidly; camera 0 is the main camera and defines the
//! multi-camera coordinate frame, so its extrinsic is the identity.

use crate::geometry::{compose, inverse, transform_point, SE3Pose};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Cosine of the view-angle gate used by [`MultiCamRig::in_frustum`]:
/// map points are only considered observable within 60 degrees of their
/// mean viewing direction.
pub const VIEW_ANGLE_COS_MIN: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("point depth {depth} outside valid range [{min}, {max}]")]
    DepthOutOfRange { depth: f64, min: f64, max: f64 },
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("projection ({u:.2}, {v:.2}) outside image bounds {width}x{height}")]
    OutsideImage {
        u: f64,
        v: f64,
        width: u32,
        height: u32,
    },
    #[error("camera index {index} out of range (rig has {count} cameras)")]
    BadCameraIndex { index: usize, count: usize },
    #[error("rig must contain at least one camera")]
    EmptyRig,
    #[error("main camera extrinsic must be the identity")]
    MainExtrinsicNotIdentity,
}

/// Pinhole intrinsics with a virtual-stereo baseline and valid depth range.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub baseline: f64,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.baseline > 0.0) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "fx, fy, baseline must be positive (fx={}, fy={}, b={})",
                self.fx, self.fy, self.baseline
            )));
        }
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "depth range must satisfy 0 < min < max (min={}, max={})",
                self.depth_min, self.depth_max
            )));
        }
        if !(0.0..=self.width as f64).contains(&self.cx)
            || !(0.0..=self.height as f64).contains(&self.cy)
        {
            return Err(CameraError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside image {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    fn check_depth(&self, z: f64) -> Result<(), CameraError> {
        if z <= 0.0 {
            return Err(CameraError::BehindCamera { z });
        }
        if z < self.depth_min || z > self.depth_max {
            return Err(CameraError::DepthOutOfRange {
                depth: z,
                min: self.depth_min,
                max: self.depth_max,
            });
        }
        Ok(())
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }

    /// Projects a camera-frame point to (u, v, u_r).
    pub fn project(&self, p: &Vector3<f64>) -> Result<PixelObservation, CameraError> {
        self.check_depth(p.z)?;
        Ok(self.project_unchecked(p))
    }

    /// Projection without the depth-range gate; only positive depth is
    /// required. Used by the optimizer, where residuals must stay defined
    /// for points that drift out of the nominal sensing range.
    pub fn project_unchecked(&self, p: &Vector3<f64>) -> PixelObservation {
        let u = self.fx * p.x / p.z + self.cx;
        let v = self.fy * p.y / p.z + self.cy;
        let u_r = u - self.fx * self.baseline / p.z;
        PixelObservation { u, v, u_r }
    }

    /// Lifts a pixel with known depth back to a camera-frame point.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Result<Vector3<f64>, CameraError> {
        self.check_depth(z)?;
        Ok(Vector3::new(
            (u - self.cx) * z / self.fx,
            (v - self.cy) * z / self.fy,
            z,
        ))
    }
}

/// A (u, v, u_r) virtual-stereo pixel observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelObservation {
    pub u: f64,
    pub v: f64,
    pub u_r: f64,
}

impl PixelObservation {
    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, self.u_r)
    }
}

/// One camera of the rig: intrinsics plus the fixed extrinsic T_cis mapping
/// the multi-camera frame into this camera's frame.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RigCamera {
    #[serde(flatten)]
    pub intrinsics: CameraIntrinsics,
    pub extrinsic: SE3Pose,
}

/// Rigid assembly of cameras sharing a multi-camera coordinate frame.
/// Camera 0 is the main camera; its extrinsic is the identity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiCamRig {
    pub cameras: Vec<RigCamera>,
}

impl MultiCamRig {
    pub fn new(cameras: Vec<RigCamera>) -> Result<Self, CameraError> {
        let rig = Self { cameras };
        rig.validate()?;
        Ok(rig)
    }

    /// Single-camera rig with identity extrinsic (the main-only baseline).
    pub fn single(intrinsics: CameraIntrinsics) -> Result<Self, CameraError> {
        Self::new(vec![RigCamera {
            intrinsics,
            extrinsic: SE3Pose::identity(),
        }])
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if self.cameras.is_empty() {
            return Err(CameraError::EmptyRig);
        }
        for cam in &self.cameras {
            cam.intrinsics.validate()?;
        }
        let main = &self.cameras[0].extrinsic;
        let defect = (main.rotation() - nalgebra::Matrix3::identity())
            .iter()
            .chain(main.translation().iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        if defect != 0.0 {
            return Err(CameraError::MainExtrinsicNotIdentity);
        }
        Ok(())
    }

    pub fn camera_count(&self) -> usize {
        self.cameras.len()
    }

    pub fn intrinsics(&self, index: usize) -> Result<&CameraIntrinsics, CameraError> {
        self.cameras
            .get(index)
            .map(|c| &c.intrinsics)
            .ok_or(CameraError::BadCameraIndex {
                index,
                count: self.cameras.len(),
            })
    }

    pub fn extrinsic(&self, index: usize) -> Result<&SE3Pose, CameraError> {
        self.cameras
            .get(index)
            .map(|c| &c.extrinsic)
            .ok_or(CameraError::BadCameraIndex {
                index,
                count: self.cameras.len(),
            })
    }

    /// Pose of camera `index` given the rig pose: T_ci = T_cis * T_sw.
    pub fn camera_pose(&self, index: usize, t_sw: &SE3Pose) -> Result<SE3Pose, CameraError> {
        Ok(compose(self.extrinsic(index)?, t_sw))
    }

    /// Projects a world point into camera `index`: pi_i(T_cis * T_sw * P_w).
    pub fn world_to_pixel(
        &self,
        index: usize,
        t_sw: &SE3Pose,
        p_w: &Vector3<f64>,
    ) -> Result<PixelObservation, CameraError> {
        let cam = self.intrinsics(index)?;
        let p_ci = transform_point(&self.camera_pose(index, t_sw)?, p_w);
        let pix = cam.project(&p_ci)?;
        if !cam.contains_pixel(pix.u, pix.v) {
            return Err(CameraError::OutsideImage {
                u: pix.u,
                v: pix.v,
                width: cam.width,
                height: cam.height,
            });
        }
        Ok(pix)
    }

    /// Lifts a pixel with depth into the world: T_sw^-1 * T_cis^-1 * pi^-1.
    pub fn pixel_to_world(
        &self,
        index: usize,
        t_sw: &SE3Pose,
        u: f64,
        v: f64,
        z: f64,
    ) -> Result<Vector3<f64>, CameraError> {
        let p_ci = self.intrinsics(index)?.back_project(u, v, z)?;
        let cam_pose = self.camera_pose(index, t_sw)?;
        Ok(transform_point(&inverse(&cam_pose), &p_ci))
    }

    /// World-frame optical center of camera `index`.
    pub fn optical_center(&self, index: usize, t_sw: &SE3Pose) -> Result<Vector3<f64>, CameraError> {
        let cam_pose = self.camera_pose(index, t_sw)?;
        Ok(*inverse(&cam_pose).translation())
    }

    /// Visibility test for a map point: projection inside the image, depth in
    /// the camera's sensing range, distance within the point's observation
    /// bounds, and viewing angle within 60 degrees of the point's mean
    /// direction. Returns the predicted pixel when all gates pass.
    pub fn in_frustum(
        &self,
        index: usize,
        t_sw: &SE3Pose,
        view: &PointView,
    ) -> Option<PixelObservation> {
        let cam = self.intrinsics(index).ok()?;
        let cam_pose = self.camera_pose(index, t_sw).ok()?;
        let p_ci = transform_point(&cam_pose, &view.position);
        if p_ci.z < cam.depth_min || p_ci.z > cam.depth_max {
            return None;
        }
        let pix = cam.project_unchecked(&p_ci);
        if !cam.contains_pixel(pix.u, pix.v) {
            return None;
        }
        let center = *inverse(&cam_pose).translation();
        let ray = view.position - center;
        let dist = ray.norm();
        if dist < view.d_min || dist > view.d_max {
            return None;
        }
        if dist > 0.0 && ray.dot(&view.normal) / dist < VIEW_ANGLE_COS_MIN {
            return None;
        }
        Some(pix)
    }
}

/// The slice of a map point needed for frustum checks: world position,
/// mean viewing direction, and observation-distance bounds.
#[derive(Clone, Copy, Debug)]
pub struct PointView {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub d_min: f64,
    pub d_max: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp, Twist};
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    pub(crate) fn test_intrinsics() -> CameraIntrinsics {
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

    fn two_camera_rig() -> MultiCamRig {
        // Second camera yawed 90 degrees about +y so it looks along world +x
        // when the rig is at identity.
        let yaw = SE3Pose::from_axis_angle(
            &Vector3::y(),
            -std::f64::consts::FRAC_PI_2,
            Vector3::zeros(),
        );
        MultiCamRig::new(vec![
            RigCamera {
                intrinsics: test_intrinsics(),
                extrinsic: SE3Pose::identity(),
            },
            RigCamera {
                intrinsics: test_intrinsics(),
                extrinsic: yaw,
            },
        ])
        .unwrap()
    }

    #[test]
    fn project_on_axis_hits_principal_point() {
        let cam = test_intrinsics();
        let pix = cam.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((pix.u, pix.v), (320.0, 240.0));
        // u_r = u - fx*b/z
        assert_abs_diff_eq!(pix.u_r, pix.u - 50.0, epsilon = 1e-12);
    }

    #[test]
    fn project_rejects_bad_depth() {
        let cam = test_intrinsics();
        assert!(matches!(
            cam.project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(CameraError::BehindCamera { .. })
        ));
        assert!(matches!(
            cam.project(&Vector3::new(0.0, 0.0, 11.0)),
            Err(CameraError::DepthOutOfRange { .. })
        ));
    }

    #[test]
    fn back_project_hand_case() {
        let cam = test_intrinsics();
        let p = cam.back_project(420.0, 240.0, 2.0).unwrap();
        assert_abs_diff_eq!(p, Vector3::new(0.4, 0.0, 2.0), epsilon = 1e-12);
        let center = cam.back_project(cam.cx, cam.cy, 3.0).unwrap();
        assert_abs_diff_eq!(center, Vector3::new(0.0, 0.0, 3.0), epsilon = 1e-15);
    }

    #[test]
    fn project_back_project_roundtrip() {
        let cam = test_intrinsics();
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..500 {
            let z = rng.gen_range(0.3..9.0);
            let x = rng.gen_range(-0.5..0.5) * z;
            let y = rng.gen_range(-0.4..0.4) * z;
            let p = Vector3::new(x, y, z);
            let pix = cam.project(&p).unwrap();
            let back = cam.back_project(pix.u, pix.v, z).unwrap();
            assert_abs_diff_eq!(back, p, epsilon = 1e-12);
            assert!(pix.u_r < pix.u);
        }
    }

    #[test]
    fn camera_pose_main_is_rig_pose() {
        let rig = two_camera_rig();
        let t_sw = exp(&Twist::from_slice(&[0.1, -0.2, 0.3, 1.0, 2.0, 3.0]));
        let main = rig.camera_pose(0, &t_sw).unwrap();
        assert_abs_diff_eq!(main.rotation(), t_sw.rotation(), epsilon = 1e-15);
        assert_abs_diff_eq!(main.translation(), t_sw.translation(), epsilon = 1e-15);

        let ident = rig.camera_pose(1, &SE3Pose::identity()).unwrap();
        let ext = rig.extrinsic(1).unwrap();
        assert_abs_diff_eq!(ident.rotation(), ext.rotation(), epsilon = 1e-15);
        assert!(rig.camera_pose(2, &t_sw).is_err());
    }

    #[test]
    fn side_camera_sees_lateral_point_on_axis() {
        let rig = two_camera_rig();
        let pix = rig
            .world_to_pixel(1, &SE3Pose::identity(), &Vector3::new(1.0, 0.0, 0.0))
            .unwrap();
        assert_abs_diff_eq!(pix.u, 320.0, epsilon = 1e-9);
        assert_abs_diff_eq!(pix.v, 240.0, epsilon = 1e-9);
    }

    #[test]
    fn world_to_pixel_is_project_of_transformed_point() {
        let rig = two_camera_rig();
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..200 {
            let t_sw = exp(&Twist::from_slice(&[
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]));
            for i in 0..rig.camera_count() {
                let cam_pose = rig.camera_pose(i, &t_sw).unwrap();
                let p_ci = Vector3::new(
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(1.0..5.0),
                );
                let p_w = transform_point(&inverse(&cam_pose), &p_ci);
                let direct = rig.world_to_pixel(i, &t_sw, &p_w).unwrap();
                let manual = rig.intrinsics(i).unwrap().project(&p_ci).unwrap();
                assert_abs_diff_eq!(direct.u, manual.u, epsilon = 1e-10);
                assert_abs_diff_eq!(direct.v, manual.v, epsilon = 1e-10);
                assert_abs_diff_eq!(direct.u_r, manual.u_r, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn pixel_world_roundtrip_nonidentity_rig() {
        let rig = two_camera_rig();
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..300 {
            let t_sw = exp(&Twist::from_slice(&[
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]));
            let i = rng.gen_range(0..rig.camera_count());
            let u = rng.gen_range(1.0..639.0);
            let v = rng.gen_range(1.0..479.0);
            let z = rng.gen_range(0.5..8.0);
            let p_w = rig.pixel_to_world(i, &t_sw, u, v, z).unwrap();
            let pix = rig.world_to_pixel(i, &t_sw, &p_w).unwrap();
            assert_abs_diff_eq!(pix.u, u, epsilon = 1e-9);
            assert_abs_diff_eq!(pix.v, v, epsilon = 1e-9);
        }
    }

    #[test]
    fn in_frustum_gates() {
        let rig = two_camera_rig();
        let behind = PointView {
            position: Vector3::new(0.0, 0.0, -2.0),
            normal: Vector3::new(0.0, 0.0, -1.0),
            d_min: 0.5,
            d_max: 5.0,
        };
        assert!(rig.in_frustum(0, &SE3Pose::identity(), &behind).is_none());

        let good = PointView {
            position: Vector3::new(0.0, 0.0, 2.0),
            normal: Vector3::new(0.0, 0.0, 1.0),
            d_min: 1.0,
            d_max: 4.0,
        };
        let pix = rig.in_frustum(0, &SE3Pose::identity(), &good).unwrap();
        assert_abs_diff_eq!(pix.u, 320.0, epsilon = 1e-12);

        // Distance just past d_max fails the bound.
        let too_far = PointView {
            d_max: 2.0 / 1.01,
            ..good
        };
        assert!(rig.in_frustum(0, &SE3Pose::identity(), &too_far).is_none());

        // Viewing direction more than 60 degrees off the stored normal.
        let sideways = PointView {
            normal: Vector3::new(1.0, 0.0, 0.0),
            ..good
        };
        assert!(rig.in_frustum(0, &SE3Pose::identity(), &sideways).is_none());
    }

    #[test]
    fn rig_validation() {
        assert!(matches!(MultiCamRig::new(vec![]), Err(CameraError::EmptyRig)));
        let shifted = SE3Pose::from_parts(
            nalgebra::Matrix3::identity(),
            Vector3::new(0.1, 0.0, 0.0),
        );
        let bad = MultiCamRig::new(vec![RigCamera {
            intrinsics: test_intrinsics(),
            extrinsic: shifted,
        }]);
        assert!(matches!(bad, Err(CameraError::MainExtrinsicNotIdentity)));
    }

    #[test]
    fn rig_serializes_main_extrinsic_as_identity() {
        let rig = two_camera_rig();
        let json = serde_json::to_string_pretty(&rig).unwrap();
        let parsed: MultiCamRig = serde_json::from_str(&json).unwrap();
        parsed.validate().unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        let ext = &value["cameras"][0]["extrinsic"];
        assert_eq!(ext["qw"], 1.0);
        assert_eq!(ext["tx"], 0.0);
    }
}
