//! The optimisable Gaussian scene and per-primitive geometric attributes.

use nalgebra::{Matrix3, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::spatial::PointGrid;

pub const MIN_SCALE: f64 = 1e-7;
pub const MAX_SCALE: f64 = 1e3;
pub const INIT_OPACITY: f64 = 0.1;
/// Isotropic scale used when a point has no neighbours.
pub const FALLBACK_SCALE: f64 = 0.01;

/// Quaternion stored as `(w, x, y, z)`.
pub type Quat = Vector4<f64>;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Number of view-dependent SH coefficients per colour channel.
pub fn sh_rest_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1) - 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<Quat>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
    /// Base RGB (SH band 0).
    pub colors: Vec<Vector3<f64>>,
    /// Degree of the spherical-harmonic colour model (0, 1 or 2).
    pub sh_degree: usize,
    /// Higher-band SH coefficients, `sh_rest_count(sh_degree)` RGB triples per primitive.
    pub sh_rest: Vec<Vector3<f64>>,
}

impl GaussianCloud {
    pub fn empty() -> Self {
        Self {
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            colors: Vec::new(),
            sh_degree: 0,
            sh_rest: Vec::new(),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, position: Vector3<f64>, rotation: Quat, log_scale: Vector3<f64>, opacity_logit: f64, color: Vector3<f64>) {
        self.positions.push(position);
        self.rotations.push(rotation);
        self.log_scales.push(log_scale);
        self.opacity_logits.push(opacity_logit);
        self.colors.push(color);
        let k = sh_rest_count(self.sh_degree);
        self.sh_rest.extend(std::iter::repeat_n(Vector3::zeros(), k));
    }

    /// Enables higher SH bands, zero-initialising the new coefficients.
    pub fn set_sh_degree(&mut self, degree: usize) -> Result<()> {
        if degree > 2 {
            return Err(Error::BadConfig(format!("SH degree {degree} not supported (max 2)")));
        }
        let old = sh_rest_count(self.sh_degree);
        let new = sh_rest_count(degree);
        let mut rest = Vec::with_capacity(self.len() * new);
        for i in 0..self.len() {
            for k in 0..new {
                rest.push(if k < old { self.sh_rest[i * old + k] } else { Vector3::zeros() });
            }
        }
        self.sh_rest = rest;
        self.sh_degree = degree;
        Ok(())
    }

    pub fn sh_coeffs(&self, i: usize) -> &[Vector3<f64>] {
        let k = sh_rest_count(self.sh_degree);
        &self.sh_rest[i * k..(i + 1) * k]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn scales(&self, i: usize) -> Vector3<f64> {
        self.log_scales[i].map(f64::exp)
    }

    /// Keeps only the primitives for which `keep` is true.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let k = sh_rest_count(self.sh_degree);
        let mut idx = 0;
        self.positions.retain(|_| (keep[idx], idx += 1).0);
        idx = 0;
        self.rotations.retain(|_| (keep[idx], idx += 1).0);
        idx = 0;
        self.log_scales.retain(|_| (keep[idx], idx += 1).0);
        idx = 0;
        self.opacity_logits.retain(|_| (keep[idx], idx += 1).0);
        idx = 0;
        self.colors.retain(|_| (keep[idx], idx += 1).0);
        if k > 0 {
            let mut rest = Vec::with_capacity(self.sh_rest.len());
            for (i, &kp) in keep.iter().enumerate() {
                if kp {
                    rest.extend_from_slice(&self.sh_rest[i * k..(i + 1) * k]);
                }
            }
            self.sh_rest = rest;
        }
    }

    /// Renormalises quaternions and clamps scales into the valid range.
    pub fn project_constraints(&mut self) {
        for q in &mut self.rotations {
            let n = q.norm();
            if n > 0.0 && n.is_finite() {
                *q /= n;
            } else {
                *q = Quat::new(1.0, 0.0, 0.0, 0.0);
            }
        }
        let (lo, hi) = (MIN_SCALE.ln(), MAX_SCALE.ln());
        for s in &mut self.log_scales {
            *s = s.map(|v| v.clamp(lo, hi));
        }
    }
}

/// Rotation matrix of a (not necessarily unit) quaternion `(w, x, y, z)`.
pub fn rotation_matrix(q: &Quat) -> Result<Matrix3<f64>> {
    let n = q.norm();
    if n <= 1e-300 || !n.is_finite() {
        return Err(Error::ZeroQuaternion);
    }
    Ok(unit_rotation_matrix(&(q / n)))
}

#[inline]
pub(crate) fn unit_rotation_matrix(q: &Quat) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls `dL/dR` back to the raw (unnormalised) quaternion.
pub(crate) fn rotation_matrix_backward(q: &Quat, g: &Matrix3<f64>) -> Quat {
    let n = q.norm();
    let u = q / n;
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let gu = Quat::new(gw, gx, gy, gz);
    (gu - u * u.dot(&gu)) / n
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn covariance(rotation: &Quat, log_scale: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let r = rotation_matrix(rotation)?;
    Ok(covariance_from(&r, &log_scale.map(f64::exp)))
}

#[inline]
pub(crate) fn covariance_from(r: &Matrix3<f64>, scales: &Vector3<f64>) -> Matrix3<f64> {
    let m = r * Matrix3::from_diagonal(scales);
    m * m.transpose()
}

/// Index of the smallest scale; ties go to the lowest axis.
#[inline]
pub fn min_scale_axis(log_scale: &Vector3<f64>) -> usize {
    let mut k = 0;
    for a in 1..3 {
        if log_scale[a] < log_scale[k] {
            k = a;
        }
    }
    k
}

/// World-frame normal (smallest-scale axis) flipped to face `cam`, with the
/// chosen axis and the applied sign.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedNormal {
    pub normal: Vector3<f64>,
    pub axis: usize,
    pub sign: f64,
}

pub(crate) fn oriented_normal(r: &Matrix3<f64>, log_scale: &Vector3<f64>, cam: &Camera) -> OrientedNormal {
    let axis = min_scale_axis(log_scale);
    let col = r.column(axis).into_owned();
    // Camera-frame z of the world vector `col`.
    let z_cam = cam.pose.rotation_wc().column(2).dot(&col);
    let sign = if z_cam > 0.0 { -1.0 } else { 1.0 };
    OrientedNormal { normal: col * sign, axis, sign }
}

/// Unit world-frame normal whose camera-frame z component is ≤ 0.
pub fn gaussian_normal(rotation: &Quat, log_scale: &Vector3<f64>, cam: &Camera) -> Result<Vector3<f64>> {
    let r = rotation_matrix(rotation)?;
    Ok(oriented_normal(&r, log_scale, cam).normal)
}

/// Distance of the plane through `mu` with normal `n` (both world frame),
/// expressed in the camera frame: `d = x_cam · n_cam`.
pub fn plane_distance(mu: &Vector3<f64>, n: &Vector3<f64>, cam: &Camera) -> f64 {
    let x = cam.pose.world_to_camera(mu);
    let nc = cam.pose.rotation_wc().tr_mul(n);
    x.dot(&nc)
}

/// Depth along the viewing ray of `pixel` where it meets the plane `(n, d)`
/// (`n` in world frame, `d` as returned by [`plane_distance`]).
pub fn plane_depth(n: &Vector3<f64>, d: f64, pixel: &Vector2<f64>, cam: &Camera) -> Result<f64> {
    let nc = cam.pose.rotation_wc().tr_mul(n);
    let den = nc.dot(&cam.intrinsics.ray(pixel.x, pixel.y));
    if den.abs() <= 1e-9 {
        return Err(Error::RayParallelToPlane);
    }
    Ok(d / den)
}

/// One isotropic Gaussian per point, sized by the mean distance to its three
/// nearest neighbours.
pub fn init_from_points(points: &[Vector3<f64>], colors: Option<&[Vector3<f64>]>) -> Result<GaussianCloud> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    if let Some(c) = colors {
        if c.len() != points.len() {
            return Err(Error::ShapeMismatch(format!("{} colours for {} points", c.len(), points.len())));
        }
    }
    let grid = PointGrid::new(points);
    let mut cloud = GaussianCloud::empty();
    for (i, p) in points.iter().enumerate() {
        let nn = grid.k_nearest(p, 3, Some(i));
        let scale = if nn.is_empty() {
            FALLBACK_SCALE
        } else {
            nn.iter().map(|(_, d)| d).sum::<f64>() / nn.len() as f64
        };
        let scale = scale.clamp(MIN_SCALE, MAX_SCALE);
        let color = colors.map_or(Vector3::repeat(0.5), |c| c[i]);
        cloud.push(
            *p,
            Quat::new(1.0, 0.0, 0.0, 0.0),
            Vector3::repeat(scale.ln()),
            logit(INIT_OPACITY),
            color,
        );
    }
    Ok(cloud)
}

/// `count` points uniformly distributed on a sphere surface.
pub fn init_random_sphere(count: usize, radius: f64, center: Vector3<f64>, seed: u64) -> Result<GaussianCloud> {
    if count == 0 || radius.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::BadConfig("sphere init needs count ≥ 1 and radius > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<_> = (0..count)
        .map(|_| {
            let z: f64 = rng.random_range(-1.0..=1.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).max(0.0).sqrt();
            center + Vector3::new(r * phi.cos(), r * phi.sin(), z) * radius
        })
        .collect();
    init_from_points(&pts, None)
}

/// `count` points uniformly distributed inside an axis-aligned cube.
pub fn init_random_cube(count: usize, half_extent: f64, center: Vector3<f64>, seed: u64) -> Result<GaussianCloud> {
    if count == 0 || half_extent.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::BadConfig("cube init needs count ≥ 1 and half extent > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<_> = (0..count)
        .map(|_| {
            center
                + Vector3::new(
                    rng.random_range(-half_extent..=half_extent),
                    rng.random_range(-half_extent..=half_extent),
                    rng.random_range(-half_extent..=half_extent),
                )
        })
        .collect();
    init_from_points(&pts, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, CameraPose};
    use nalgebra::{Rotation3, SymmetricEigen, UnitQuaternion};
    use proptest::prelude::*;

    fn cam_at(pose: CameraPose) -> Camera {
        Camera::new(0, CameraIntrinsics::new(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap(), pose)
    }

    fn quat_from_axis_angle(axis: Vector3<f64>, angle: f64) -> Quat {
        let q = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Quat::new(q.w, q.i, q.j, q.k)
    }

    #[test]
    fn covariance_examples() {
        let id = Quat::new(1.0, 0.0, 0.0, 0.0);
        let c = covariance(&id, &Vector3::zeros()).unwrap();
        assert!((c - Matrix3::identity()).norm() < 1e-15);
        let c = covariance(&id, &Vector3::new(2f64.ln(), 0.0, 0.5f64.ln())).unwrap();
        assert!((c - Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 0.25))).norm() < 1e-12);
        assert!(matches!(covariance(&Quat::zeros(), &Vector3::zeros()), Err(Error::ZeroQuaternion)));
    }

    #[test]
    fn rotation_matches_nalgebra() {
        let q = quat_from_axis_angle(Vector3::new(0.3, -1.0, 0.5), 1.2);
        let ours = rotation_matrix(&q).unwrap();
        let theirs = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]))
            .to_rotation_matrix()
            .into_inner();
        assert!((ours - theirs).norm() < 1e-12);
    }

    #[test]
    fn rotation_backward_matches_finite_differences() {
        let q = Quat::new(0.7, -0.3, 0.2, 0.9);
        let g = Matrix3::new(0.3, -1.0, 0.2, 0.5, 0.1, -0.7, 1.3, 0.4, -0.2);
        let f = |q: &Quat| (rotation_matrix(q).unwrap().component_mul(&g)).sum();
        let analytic = rotation_matrix_backward(&q, &g);
        for k in 0..4 {
            let h = 1e-6;
            let mut qp = q;
            qp[k] += h;
            let mut qm = q;
            qm[k] -= h;
            let fd = (f(&qp) - f(&qm)) / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-8, "component {k}: {fd} vs {}", analytic[k]);
        }
    }

    #[test]
    fn normal_examples() {
        // Camera on −z looking +z: camera-facing normals have negative world z.
        let cam = cam_at(CameraPose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -5.0)).unwrap());
        let ls = Vector3::new(0.5f64.ln(), 0.3f64.ln(), 0.01f64.ln());
        let n = gaussian_normal(&Quat::new(1.0, 0.0, 0.0, 0.0), &ls, &cam).unwrap();
        assert!((n - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-15);

        // 90° about x maps e3 to (0, −1, 0); facing rule keeps camera-frame z ≤ 0 (z is 0 here).
        let q = quat_from_axis_angle(Vector3::x(), std::f64::consts::FRAC_PI_2);
        let n = gaussian_normal(&q, &ls, &cam).unwrap();
        let by_hand = Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::FRAC_PI_2) * Vector3::z();
        assert!((n - by_hand).norm() < 1e-12 || (n + by_hand).norm() < 1e-12);
        assert!((n.norm() - 1.0).abs() < 1e-12);

        let eq = Vector3::repeat(0.1f64.ln());
        assert_eq!(min_scale_axis(&eq), 0);
        let n = gaussian_normal(&Quat::new(1.0, 0.0, 0.0, 0.0), &eq, &cam).unwrap();
        assert!((n.abs() - Vector3::x()).norm() < 1e-15);
    }

    #[test]
    fn plane_distance_and_depth_examples() {
        let cam = cam_at(CameraPose::identity());
        assert_eq!(plane_distance(&Vector3::new(0.0, 0.0, 5.0), &Vector3::z(), &cam), 5.0);
        assert_eq!(plane_distance(&Vector3::new(1.0, 2.0, 5.0), &Vector3::z(), &cam), 5.0);
        assert_eq!(plane_depth(&Vector3::z(), 5.0, &Vector2::new(64.0, 64.0), &cam).unwrap(), 5.0);
        assert_eq!(plane_depth(&Vector3::z(), 5.0, &Vector2::new(164.0, 64.0), &cam).unwrap(), 5.0);

        // Tilted plane: parametric ray solve t·(r·n) = d.
        let a = 15f64.to_radians();
        let n = Vector3::new(a.sin(), 0.0, a.cos());
        let z = plane_depth(&n, 5.0, &Vector2::new(164.0, 64.0), &cam).unwrap();
        let t = 5.0 / (1.0 * a.sin() + 1.0 * a.cos());
        assert!((z - t).abs() < 1e-9);
        assert!(matches!(
            plane_depth(&Vector3::x(), 5.0, &Vector2::new(64.0, 64.0), &cam),
            Err(Error::RayParallelToPlane)
        ));
    }

    #[test]
    fn init_from_points_examples() {
        let c = init_from_points(&[Vector3::zeros()], None).unwrap();
        assert_eq!(c.len(), 1);
        assert!((c.log_scales[0] - Vector3::repeat(FALLBACK_SCALE.ln())).norm() < 1e-12);
        assert_eq!(c.colors[0], Vector3::repeat(0.5));
        assert!((c.opacity(0) - 0.1).abs() < 1e-12);

        let corners: Vec<_> = (0..8)
            .map(|i| Vector3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
            .collect();
        let c = init_from_points(&corners, None).unwrap();
        assert!(c.log_scales.iter().all(|s| s.norm() < 1e-12));
        assert!(matches!(init_from_points(&[], None), Err(Error::EmptyPointSet)));
    }

    #[test]
    fn random_inits() {
        let a = init_random_sphere(100, 2.0, Vector3::zeros(), 7).unwrap();
        let b = init_random_sphere(100, 2.0, Vector3::zeros(), 7).unwrap();
        assert_eq!(a, b);
        assert!(a.positions.iter().all(|p| (p.norm() - 2.0).abs() < 1e-9));
        let c = init_random_cube(100, 1.0, Vector3::zeros(), 7).unwrap();
        assert!(c.positions.iter().all(|p| p.iter().all(|v| v.abs() <= 1.0)));
        assert_eq!(c, init_random_cube(100, 1.0, Vector3::zeros(), 7).unwrap());
    }

    #[test]
    fn retain_and_sh_degree() {
        let mut c = init_random_cube(5, 1.0, Vector3::zeros(), 1).unwrap();
        c.set_sh_degree(2).unwrap();
        assert_eq!(c.sh_rest.len(), 5 * 8);
        c.sh_rest[8 * 3] = Vector3::new(1.0, 2.0, 3.0);
        let pos3 = c.positions[3];
        c.retain_mask(&[false, true, false, true, true]);
        assert_eq!(c.len(), 3);
        assert_eq!(c.positions[1], pos3);
        assert_eq!(c.sh_coeffs(1)[0], Vector3::new(1.0, 2.0, 3.0));
        assert!(c.set_sh_degree(3).is_err());
    }

    fn arb_quat() -> impl Strategy<Value = Quat> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-zero", |(a, b, c, d)| a * a + b * b + c * c + d * d > 1e-3)
            .prop_map(|(a, b, c, d)| Quat::new(a, b, c, d))
    }

    proptest! {
        #[test]
        fn covariance_is_psd_with_scale_eigenvalues(q in arb_quat(), a in -3.0..1.0f64, b in -3.0..1.0f64, c in -3.0..1.0f64) {
            let ls = Vector3::new(a, b, c);
            let cov = covariance(&q, &ls).unwrap();
            prop_assert!((cov - cov.transpose()).abs().max() < 1e-15);
            let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
            ev.sort_by(f64::total_cmp);
            let mut want: Vec<f64> = ls.iter().map(|s| (2.0 * s).exp()).collect();
            want.sort_by(f64::total_cmp);
            prop_assert!(ev[0] >= -1e-12);
            for (e, w) in ev.iter().zip(&want) {
                prop_assert!((e - w).abs() < 1e-9);
            }
        }

        #[test]
        fn normal_invariant_to_non_minimal_axis_swap(q in arb_quat(), a in -2.0..0.0f64, b in -2.0..0.0f64, k in 0.1..5.0f64) {
            let cam = cam_at(CameraPose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -5.0)).unwrap());
            let small = a.min(b) - 1.0;
            let n1 = gaussian_normal(&q, &Vector3::new(a, b, small), &cam).unwrap();
            let n2 = gaussian_normal(&q, &Vector3::new(b, a, small), &cam).unwrap();
            prop_assert!((n1 - n2).norm() < 1e-15);
            // Scaling all scales by k shifts log-scales by ln k.
            let n3 = gaussian_normal(&q, &Vector3::new(a, b, small).add_scalar(k.ln()), &cam).unwrap();
            prop_assert!((n1 - n3).norm() < 1e-15);
            prop_assert!(cam.pose.world_to_camera(&(n1 + cam.pose.center())).z <= 0.0);
        }

        #[test]
        fn plane_depth_lies_on_plane(
            theta in 0.0..1.2f64, phi in 0.0..6.28f64, d in 0.5..10.0f64,
            u in 0.0..128.0f64, v in 0.0..128.0f64,
        ) {
            let cam = cam_at(CameraPose::identity());
            let n = Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
            if let Ok(z) = plane_depth(&n, d, &Vector2::new(u, v), &cam) {
                if z > 0.0 {
                    let x = cam.backproject(&Vector2::new(u, v), z).unwrap();
                    prop_assert!((n.dot(&x) - d).abs() < 1e-9 * d.max(1.0));
                }
            }
        }

        #[test]
        fn plane_distance_matches_camera_frame_dot(
            ax in -3.0..3.0f64, ay in -1.5..1.5f64, az in -3.0..3.0f64,
            px in -2.0..2.0f64, py in -2.0..2.0f64, pz in -2.0..2.0f64,
            q in arb_quat(),
        ) {
            let pose = CameraPose::new(Rotation3::from_euler_angles(ax, ay, az).into_inner(), Vector3::new(1.0, -0.5, 0.3)).unwrap();
            let cam = cam_at(pose);
            let mu = Vector3::new(px, py, pz);
            let n = rotation_matrix(&q).unwrap().column(2).into_owned();
            let oracle = pose.world_to_camera(&mu).dot(&(pose.world_to_camera(&(n + pose.center()))));
            prop_assert!((plane_distance(&mu, &n, &cam) - oracle).abs() < 1e-12);
        }
    }
}
