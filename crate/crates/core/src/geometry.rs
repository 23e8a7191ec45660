//! Pinhole cameras, rigid poses and plane-induced homographies.
//!
//! Conventions used throughout the crate:
//! - camera frame is right-handed with +z forward, +x right, +y down;
//! - pixel `(u, v)` addresses the centre of image cell `(u, v)`;
//! - a plane `(n, d)` is the set of camera-frame points with `n·x = d`.

use nalgebra::{Matrix3, Matrix3x4, Vector2, Vector3};

use crate::error::{Error, Result};

const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let w = width as f64;
        let h = height as f64;
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidCamera(format!("focal lengths must be positive ({fx}, {fy})")));
        }
        if !(cx > 0.0 && cx < w && cy > 0.0 && cy < h) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({cx}, {cy}) outside {width}x{height}"
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// `K⁻¹ [u, v, 1]ᵀ`: the viewing ray through a pixel, scaled to unit z.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Rigid pose: `rotation` maps camera-frame vectors into the world frame and
/// `center` is the camera centre in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    center: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation_wc: Matrix3<f64>, center: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation_wc.transpose() * rotation_wc - Matrix3::identity()).abs().max();
        let det = rotation_wc.determinant();
        if !(ortho <= 1e-9 && (det - 1.0).abs() <= 1e-9) {
            return Err(Error::InvalidCamera(format!(
                "rotation is not a proper rotation (orthogonality error {ortho:.2e}, det {det:.6})"
            )));
        }
        if !center.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidCamera("non-finite camera centre".into()));
        }
        Ok(Self { rotation: rotation_wc, center })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), center: Vector3::zeros() }
    }

    /// Camera at `eye` looking at `target`; `up` need only be non-parallel to the view direction.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("eye coincides with target".into()))?;
        // +y is down in the image, so the camera's y axis points against `up`.
        let right = forward
            .cross(&-up)
            .try_normalize(1e-9)
            .ok_or_else(|| Error::InvalidCamera("up vector parallel to view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self::new(rotation, eye)
    }

    #[inline]
    pub fn rotation_wc(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    #[inline]
    pub fn center(&self) -> &Vector3<f64> {
        &self.center
    }

    /// Optical axis (camera +z) in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.tr_mul(&(p - self.center))
    }

    #[inline]
    pub fn camera_to_world(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.center
    }

    /// World-to-camera extrinsic `M = [Rᵀ | −Rᵀc]`.
    pub fn extrinsic(&self) -> Matrix3x4<f64> {
        let rt = self.rotation.transpose();
        let t = -(rt * self.center);
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.set_column(3, &t);
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub id: usize,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl Camera {
    pub fn new(id: usize, intrinsics: CameraIntrinsics, pose: CameraPose) -> Self {
        Self { id, intrinsics, pose }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.intrinsics.width as usize
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.intrinsics.height as usize
    }

    /// Projects a camera-frame point to pixel coordinates.
    #[inline]
    pub fn project_camera_point(&self, x: &Vector3<f64>) -> Result<Vector2<f64>> {
        if x.z <= MIN_DEPTH {
            return Err(Error::NonPositiveDepth(x.z));
        }
        let k = &self.intrinsics;
        Ok(Vector2::new(k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy))
    }

    /// Projects a world point; returns the pixel and the camera-frame depth.
    pub fn project(&self, point_world: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
        let x = self.pose.world_to_camera(point_world);
        Ok((self.project_camera_point(&x)?, x.z))
    }

    /// Lifts a pixel at the given z-depth to a camera-frame point.
    pub fn backproject(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if depth <= 0.0 || !depth.is_finite() {
            return Err(Error::NonPositiveDepth(depth));
        }
        Ok(self.intrinsics.ray(pixel.x, pixel.y) * depth)
    }

    /// True when the pixel lies strictly inside `(0, W) × (0, H)`.
    #[inline]
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x > 0.0
            && p.y > 0.0
            && p.x < self.intrinsics.width as f64
            && p.y < self.intrinsics.height as f64
    }
}

/// Rigid transform taking reference-camera points into the source camera frame:
/// `x_s = rotation · x_r + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    #[inline]
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn compose(&self, then: &RelativePose) -> RelativePose {
        RelativePose {
            rotation: then.rotation * self.rotation,
            translation: then.rotation * self.translation + then.translation,
        }
    }
}

pub fn relative_pose(reference: &Camera, source: &Camera) -> RelativePose {
    let r_ref = reference.pose.rotation_wc();
    let r_src = source.pose.rotation_wc();
    RelativePose {
        rotation: r_src.transpose() * r_ref,
        translation: r_src.tr_mul(&(reference.pose.center() - source.pose.center())),
    }
}

/// Homography induced by the reference-frame plane `n·x = d`, mapping
/// reference pixels to source pixels: `H = K_s (R + T nᵀ / d) K_r⁻¹`.
///
/// With a camera-facing normal `n' = −n` and positive distance this is the
/// familiar `K_s (R − T n'ᵀ / d) K_r⁻¹` form.
pub fn homography(
    reference: &Camera,
    source: &Camera,
    normal: &Vector3<f64>,
    distance: f64,
) -> Result<Matrix3<f64>> {
    if distance.abs() <= 1e-9 {
        return Err(Error::DegeneratePlane(distance));
    }
    let rel = relative_pose(reference, source);
    Ok(homography_from_ratio(reference, source, &rel, &(normal / distance)))
}

/// Same homography parameterised by `m = n / d`, the form used by the
/// photometric loss (it stays finite under a common scaling of `n` and `d`).
pub fn homography_from_ratio(
    reference: &Camera,
    source: &Camera,
    rel: &RelativePose,
    m: &Vector3<f64>,
) -> Matrix3<f64> {
    source.intrinsics.matrix()
        * (rel.rotation + rel.translation * m.transpose())
        * reference.intrinsics.inverse_matrix()
}

/// Applies `H` to `p` and performs the homogeneous division.
#[inline]
pub fn warp_pixel(h: &Matrix3<f64>, p: &Vector2<f64>) -> Result<Vector2<f64>> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    if q.z.abs() <= 1e-12 {
        return Err(Error::PointAtInfinity(q.z));
    }
    Ok(Vector2::new(q.x / q.z, q.y / q.z))
}

/// Point the cameras look at: least-squares intersection of the optical
/// axes, falling back to the mean centre when they are parallel.
pub fn look_at_center(cameras: &[Camera]) -> Vector3<f64> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for c in cameras {
        let f = c.pose.forward();
        let p = Matrix3::identity() - f * f.transpose();
        a += p;
        b += p * c.pose.center();
    }
    match a.try_inverse() {
        Some(inv) if a.determinant().abs() > 1e-9 => inv * b,
        _ => cameras.iter().map(|c| c.pose.center()).sum::<Vector3<f64>>() / cameras.len().max(1) as f64,
    }
}
