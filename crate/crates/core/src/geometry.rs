//! Pinhole cameras, plane-induced homographies and per-pixel reprojection.
//!
//! Conventions used throughout the crate:
//! - poses are world-to-camera, `x_cam = R * x_world + t`;
//! - pixel `(i, j)` has its center at continuous coordinate `(i, j)`;
//! - depth is the z coordinate in the reference camera frame, so hypothesis
//!   planes are fronto-parallel to the reference view.

use nalgebra::{Matrix3, Point2, Rotation3, Vector3, SVD};

use crate::error::{Error, Result};

const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        Self::with_skew(fx, fy, cx, cy, 0.0)
    }

    pub fn with_skew(fx: f64, fy: f64, cx: f64, cy: f64, skew: f64) -> Result<Self> {
        let all_finite = [fx, fy, cx, cy, skew].iter().all(|v| v.is_finite());
        if !all_finite || fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidGeometry(format!(
                "intrinsics need finite values and positive focal lengths (fx={fx}, fy={fy})"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            skew,
        })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, self.skew, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    /// Closed-form inverse of the upper-triangular calibration matrix.
    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        let (fx, fy, s) = (self.fx, self.fy, self.skew);
        Matrix3::new(
            1.0 / fx,
            -s / (fx * fy),
            (s * self.cy - self.cx * fy) / (fx * fy),
            0.0,
            1.0 / fy,
            -self.cy / fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Intrinsics for an image resampled by linear factor `scale`.
    ///
    /// With pixel centers at integer coordinates, a 2x box downsample maps
    /// coordinate `u` to `(u + 0.5) / 2 - 0.5`; the principal point follows the
    /// same map.
    pub fn scaled(&self, scale: f64) -> Self {
        Self {
            fx: self.fx * scale,
            fy: self.fy * scale,
            cx: (self.cx + 0.5) * scale - 0.5,
            cy: (self.cy + 0.5) * scale - 0.5,
            skew: self.skew * scale,
        }
    }

    pub fn project(&self, p: &Vector3<f64>) -> Point2<f64> {
        let x = p.x / p.z;
        let y = p.y / p.z;
        Point2::new(self.fx * x + self.skew * y + self.cx, self.fy * y + self.cy)
    }

    /// Ray direction through `pixel` with unit z component.
    pub fn unproject(&self, pixel: Point2<f64>) -> Vector3<f64> {
        let y = (pixel.y - self.cy) / self.fy;
        let x = (pixel.x - self.cx - self.skew * y) / self.fx;
        Vector3::new(x, y, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraPose {
    /// World-to-camera pose; `rotation` must be a proper rotation to 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidGeometry("pose has non-finite entries".into()));
        }
        let orth = (rotation * rotation.transpose() - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if orth > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidGeometry(format!(
                "rotation is not orthonormal (|RR^T - I| = {orth:e}, det = {det})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Accepts a rotation that is orthonormal only to `tolerance` (as found in
    /// text files with few digits) and snaps it to the nearest rotation.
    pub fn new_orthonormalized(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        tolerance: f64,
    ) -> Result<Self> {
        let orth = (rotation * rotation.transpose() - Matrix3::identity()).abs().max();
        if !orth.is_finite() || orth > tolerance || rotation.determinant() <= 0.0 {
            return Err(Error::InvalidGeometry(format!(
                "rotation too far from orthonormal (|RR^T - I| = {orth:e})"
            )));
        }
        let svd = SVD::new(rotation, true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        Self::new(u * v_t, translation)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`, with image y pointing roughly along `-up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let z = (target - eye).normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-12 || !z.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidGeometry("degenerate look-at frame".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self::new(rotation, -(rotation * eye))
    }

    pub fn from_center(rotation: Matrix3<f64>, center: Vector3<f64>) -> Result<Self> {
        Self::new(rotation, -(rotation * center))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Principal axis of the camera expressed in world coordinates.
    pub fn principal_axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Applies a rigid world transform `x -> rot * x` to the scene, returning
    /// the pose that observes the transformed scene identically.
    pub fn rotated_world(&self, rot: &Rotation3<f64>) -> Self {
        Self {
            rotation: self.rotation * rot.matrix().transpose(),
            translation: self.translation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub depth_min: f64,
    pub depth_interval: f64,
}

impl Camera {
    pub fn new(
        intrinsics: CameraIntrinsics,
        pose: CameraPose,
        depth_min: f64,
        depth_interval: f64,
    ) -> Result<Self> {
        if !(depth_min > 0.0 && depth_interval > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "depth bounds must be positive (min={depth_min}, interval={depth_interval})"
            )));
        }
        Ok(Self {
            intrinsics,
            pose,
            depth_min,
            depth_interval,
        })
    }

    /// Same camera observing an image resampled by linear factor `scale`.
    pub fn scaled(&self, scale: f64) -> Self {
        Self {
            intrinsics: self.intrinsics.scaled(scale),
            ..*self
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.center()
    }

    /// Projects a world point; `None` when it is not in front of the camera.
    pub fn project(&self, world: &Vector3<f64>) -> Option<(Point2<f64>, f64)> {
        let p = self.pose.world_to_camera(world);
        if p.z <= 0.0 {
            return None;
        }
        Some((self.intrinsics.project(&p), p.z))
    }

    pub fn backproject(&self, pixel: Point2<f64>, depth: f64) -> Vector3<f64> {
        let p_cam = self.intrinsics.unproject(pixel) * depth;
        self.pose.camera_to_world(&p_cam)
    }
}

/// Homography induced by the reference-frame plane `z = depth`, mapping
/// homogeneous reference pixels to homogeneous source pixels:
///
/// `H = K_s * R_s * (I - (c_s - c_r) * n_r^T / d) * R_r^T * K_r^-1`
///
/// where `c` are camera centers and `n_r` is the reference principal axis in
/// world coordinates.
pub fn homography_for_depth(reference: &Camera, source: &Camera, depth: f64) -> Result<Matrix3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidGeometry(format!("plane depth must be positive, got {depth}")));
    }
    let baseline = source.center() - reference.center();
    let normal = reference.pose.principal_axis();
    let plane_term = Matrix3::identity() - baseline * normal.transpose() / depth;
    let h = source.intrinsics.matrix()
        * source.pose.rotation()
        * plane_term
        * reference.pose.rotation().transpose()
        * reference.intrinsics.inverse_matrix();
    if !h.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidGeometry("homography has non-finite entries".into()));
    }
    Ok(h)
}

/// Applies a homography to a pixel; `None` when the result lies at infinity.
pub fn apply_homography(h: &Matrix3<f64>, pixel: Point2<f64>) -> Option<Point2<f64>> {
    let q = h * Vector3::new(pixel.x, pixel.y, 1.0);
    if q.z.abs() < f64::MIN_POSITIVE {
        return None;
    }
    Some(Point2::new(q.x / q.z, q.y / q.z))
}

/// Maps a reference pixel at reference-frame depth `depth` into the source image.
///
/// Returns `None` (out of frustum) when the 3D point is not in front of the
/// source camera; callers mask such samples.
pub fn reproject_pixel(
    reference: &Camera,
    source: &Camera,
    pixel: Point2<f64>,
    depth: f64,
) -> Option<Point2<f64>> {
    let world = reference.backproject(pixel, depth);
    source.project(&world).map(|(p, _)| p)
}

/// Rectified-stereo correspondence: the right-image x coordinate of a left
/// pixel at disparity `disparity`.
#[inline]
pub fn disparity_map_coordinate(x_left: f64, disparity: f64) -> f64 {
    x_left - disparity
}

/// Precomputed per-pixel reprojection between a reference and a source camera.
///
/// `source_h = depth * M * [x, y, 1]^T + b`, evaluated with two
/// matrix-vector products and no per-pixel inversion.
#[derive(Debug, Clone, Copy)]
pub struct PixelTransfer {
    m: Matrix3<f64>,
    b: Vector3<f64>,
}

impl PixelTransfer {
    pub fn new(reference: &Camera, source: &Camera) -> Self {
        let rel_rot = source.pose.rotation() * reference.pose.rotation().transpose();
        let rel_t = source.pose.translation() - rel_rot * reference.pose.translation();
        let k_src = source.intrinsics.matrix();
        Self {
            m: k_src * rel_rot * reference.intrinsics.inverse_matrix(),
            b: k_src * rel_t,
        }
    }

    /// Source pixel and source-frame depth, or `None` behind the source camera.
    #[inline]
    pub fn transfer(&self, x: f64, y: f64, depth: f64) -> Option<(f64, f64, f64)> {
        let m = &self.m;
        let hx = depth * (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) + self.b.x;
        let hy = depth * (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) + self.b.y;
        let hz = depth * (m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)]) + self.b.z;
        if hz <= 0.0 {
            return None;
        }
        Some((hx / hz, hy / hz, hz))
    }
}
