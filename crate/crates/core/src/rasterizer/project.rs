//! Per-Gaussian screen-space projection (EWA linearisation) and its adjoint.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::gaussians::{oriented_normal, rotation_matrix_backward, sigmoid, unit_rotation_matrix, GaussianCloud};
use crate::geometry::Camera;

use super::RenderSettings;

const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// Real SH basis (bands 1..=degree) evaluated at a unit direction.
pub(crate) fn sh_basis(degree: usize, d: &Vector3<f64>) -> [f64; 8] {
    let mut b = [0.0; 8];
    if degree >= 1 {
        b[0] = -SH_C1 * d.y;
        b[1] = SH_C1 * d.z;
        b[2] = -SH_C1 * d.x;
    }
    if degree >= 2 {
        b[3] = SH_C2[0] * d.x * d.y;
        b[4] = SH_C2[1] * d.y * d.z;
        b[5] = SH_C2[2] * (2.0 * d.z * d.z - d.x * d.x - d.y * d.y);
        b[6] = SH_C2[3] * d.x * d.z;
        b[7] = SH_C2[4] * (d.x * d.x - d.y * d.y);
    }
    b
}

/// Gradient of each basis function with respect to the direction.
fn sh_basis_jacobian(degree: usize, d: &Vector3<f64>) -> [Vector3<f64>; 8] {
    let mut j = [Vector3::zeros(); 8];
    if degree >= 1 {
        j[0] = Vector3::new(0.0, -SH_C1, 0.0);
        j[1] = Vector3::new(0.0, 0.0, SH_C1);
        j[2] = Vector3::new(-SH_C1, 0.0, 0.0);
    }
    if degree >= 2 {
        j[3] = SH_C2[0] * Vector3::new(d.y, d.x, 0.0);
        j[4] = SH_C2[1] * Vector3::new(0.0, d.z, d.y);
        j[5] = SH_C2[2] * Vector3::new(-2.0 * d.x, -2.0 * d.y, 4.0 * d.z);
        j[6] = SH_C2[3] * Vector3::new(d.z, 0.0, d.x);
        j[7] = SH_C2[4] * Vector3::new(2.0 * d.x, -2.0 * d.y, 0.0);
    }
    j
}

/// One Gaussian's screen-space footprint and per-view attributes.
#[derive(Debug, Clone)]
pub struct SplatProjection {
    pub gaussian: usize,
    /// 2D mean in pixels.
    pub mean: Vector2<f64>,
    /// Screen covariance including the dilation floor.
    pub cov: Matrix2<f64>,
    /// Inverse covariance entries `(a, b, c)` of `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    /// Plane normal in the camera frame (camera-facing).
    pub normal: Vector3<f64>,
    /// Plane distance `x_cam · n_cam`.
    pub distance: f64,
    /// Inclusive pixel bounding box `[x0, y0, x1, y1]` of the footprint.
    pub bbox: [i64; 4],
    pub(crate) cache: ProjectionCache,
}

#[derive(Debug, Clone)]
pub(crate) struct ProjectionCache {
    mean_cam: Vector3<f64>,
    rotation: Matrix3<f64>,
    scales: Vector3<f64>,
    jacobian: Matrix2x3<f64>,
    sigma_cam: Matrix3<f64>,
    pub(crate) normal_axis: usize,
    pub(crate) normal_sign: f64,
    view_dir: Vector3<f64>,
    view_dist: f64,
}

/// Screen-space gradients accumulated for one splat.
#[derive(Debug, Clone, Copy, Default)]
pub struct SplatGrad {
    pub mean: Vector2<f64>,
    /// `dL/da, dL/db, dL/dc` for the conic `(a, b, c)`; `b` enters the
    /// quadratic form twice.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub distance: f64,
    pub depth: f64,
}

impl SplatGrad {
    pub(crate) fn add(&mut self, o: &SplatGrad) {
        self.mean += o.mean;
        for k in 0..3 {
            self.conic[k] += o.conic[k];
        }
        self.opacity += o.opacity;
        self.color += o.color;
        self.normal += o.normal;
        self.distance += o.distance;
        self.depth += o.depth;
    }
}

/// Gradients with respect to one Gaussian's raw parameters.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct ParamGrad {
    pub position: Vector3<f64>,
    pub rotation: nalgebra::Vector4<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

/// Projects Gaussian `i`; `None` when culled (behind the near plane, off
/// screen, or numerically degenerate).
pub fn project_gaussian(cloud: &GaussianCloud, i: usize, cam: &Camera, settings: &RenderSettings) -> Option<SplatProjection> {
    let pose = &cam.pose;
    let k = &cam.intrinsics;
    let mean_cam = pose.world_to_camera(&cloud.positions[i]);
    let (x, y, z) = (mean_cam.x, mean_cam.y, mean_cam.z);
    if !(z > settings.near) {
        return None;
    }
    let q = &cloud.rotations[i];
    let qn = q.norm();
    if !(qn > 1e-300 && qn.is_finite()) {
        return None;
    }
    let rotation = unit_rotation_matrix(&(q / qn));
    let scales = cloud.log_scales[i].map(f64::exp);
    let w = pose.rotation_wc().transpose();
    let m = w * rotation * Matrix3::from_diagonal(&scales);
    let sigma_cam = m * m.transpose();
    let jacobian = Matrix2x3::new(k.fx / z, 0.0, -k.fx * x / (z * z), 0.0, k.fy / z, -k.fy * y / (z * z));
    let cov = jacobian * sigma_cam * jacobian.transpose() + Matrix2::identity() * settings.dilation;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if !(det > 0.0 && det.is_finite()) {
        return None;
    }
    let conic = [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det];
    let mean = Vector2::new(k.fx * x / z + k.cx, k.fy * y / z + k.cy);

    let mid = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = settings.extent_sigma * lambda_max.sqrt();
    let bbox = [
        (mean.x - radius).floor() as i64,
        (mean.y - radius).floor() as i64,
        (mean.x + radius).ceil() as i64,
        (mean.y + radius).ceil() as i64,
    ];
    if bbox[2] < 0 || bbox[3] < 0 || bbox[0] >= cam.width() as i64 || bbox[1] >= cam.height() as i64 {
        return None;
    }

    let on = oriented_normal(&rotation, &cloud.log_scales[i], cam);
    let normal = w * on.normal;
    let distance = mean_cam.dot(&normal);

    let offset = cloud.positions[i] - pose.center();
    let view_dist = offset.norm();
    let view_dir = offset / view_dist;
    let mut color = cloud.colors[i];
    if cloud.sh_degree > 0 {
        let basis = sh_basis(cloud.sh_degree, &view_dir);
        for (c, b) in cloud.sh_coeffs(i).iter().zip(basis.iter()) {
            color += c * *b;
        }
    }

    Some(SplatProjection {
        gaussian: i,
        mean,
        cov,
        conic,
        depth: z,
        opacity: sigmoid(cloud.opacity_logits[i]),
        color,
        normal,
        distance,
        bbox,
        cache: ProjectionCache {
            mean_cam,
            rotation,
            scales,
            jacobian,
            sigma_cam,
            normal_axis: on.axis,
            normal_sign: on.sign,
            view_dir,
            view_dist,
        },
    })
}

/// Adjoint of [`project_gaussian`]. `sh_grad` receives the higher-band SH
/// gradients when the cloud uses them.
pub(crate) fn project_backward(
    cloud: &GaussianCloud,
    splat: &SplatProjection,
    g: &SplatGrad,
    cam: &Camera,
    sh_grad: &mut [Vector3<f64>],
) -> ParamGrad {
    let c = &splat.cache;
    let k = &cam.intrinsics;
    let w = cam.pose.rotation_wc().transpose();
    let (x, y, z) = (c.mean_cam.x, c.mean_cam.y, c.mean_cam.z);
    let i = splat.gaussian;

    // Conic -> covariance: dCov = −Q G Q.
    let q = Matrix2::new(splat.conic[0], splat.conic[1], splat.conic[1], splat.conic[2]);
    let gq = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
    let d_cov = -(q * gq * q);

    // Cov = J Σc Jᵀ.
    let j = &c.jacobian;
    let d_sigma_cam = j.transpose() * d_cov * j;
    let d_j = 2.0 * d_cov * j * c.sigma_cam;

    // Σc = W Σ Wᵀ, Σ = M Mᵀ with M = R S.
    let d_sigma = w.transpose() * d_sigma_cam * w;
    let m = c.rotation * Matrix3::from_diagonal(&c.scales);
    let d_m = (d_sigma + d_sigma.transpose()) * m;
    let mut d_rot = d_m * Matrix3::from_diagonal(&c.scales);
    let mut d_scale = Vector3::zeros();
    for a in 0..3 {
        d_scale[a] = d_m.column(a).dot(&c.rotation.column(a));
    }
    let d_log_scale = d_scale.component_mul(&c.scales);

    // Normal and plane distance.
    let d_normal = g.normal + c.mean_cam * g.distance;
    let d_col = w.transpose() * d_normal * c.normal_sign;
    for r in 0..3 {
        d_rot[(r, c.normal_axis)] += d_col[r];
    }

    // Camera-frame mean.
    let z2 = z * z;
    let z3 = z2 * z;
    let mut d_mc = splat.normal * g.distance;
    d_mc.z += g.depth;
    d_mc.x += g.mean.x * k.fx / z;
    d_mc.y += g.mean.y * k.fy / z;
    d_mc.z += -g.mean.x * k.fx * x / z2 - g.mean.y * k.fy * y / z2;
    d_mc.x += d_j[(0, 2)] * (-k.fx / z2);
    d_mc.y += d_j[(1, 2)] * (-k.fy / z2);
    d_mc.z += d_j[(0, 0)] * (-k.fx / z2)
        + d_j[(0, 2)] * (2.0 * k.fx * x / z3)
        + d_j[(1, 1)] * (-k.fy / z2)
        + d_j[(1, 2)] * (2.0 * k.fy * y / z3);
    let mut d_position = w.transpose() * d_mc;

    if cloud.sh_degree > 0 {
        let basis = sh_basis(cloud.sh_degree, &c.view_dir);
        let jac = sh_basis_jacobian(cloud.sh_degree, &c.view_dir);
        let mut d_dir = Vector3::zeros();
        for (kk, coeff) in cloud.sh_coeffs(i).iter().enumerate() {
            sh_grad[kk] = g.color * basis[kk];
            d_dir += jac[kk] * g.color.dot(coeff);
        }
        // dir = v / |v|
        let dv = (d_dir - c.view_dir * c.view_dir.dot(&d_dir)) / c.view_dist;
        d_position += dv;
    }

    let o = splat.opacity;
    ParamGrad {
        position: d_position,
        rotation: rotation_matrix_backward(&cloud.rotations[i], &d_rot),
        log_scale: d_log_scale,
        opacity_logit: g.opacity * o * (1.0 - o),
        color: g.color,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::Quat;
    use crate::geometry::{CameraIntrinsics, CameraPose};
    use nalgebra::Rotation3;

    fn camera() -> Camera {
        let pose = CameraPose::new(
            Rotation3::from_euler_angles(0.1, -0.2, 0.05).into_inner(),
            Vector3::new(0.2, -0.1, -0.3),
        )
        .unwrap();
        Camera::new(0, CameraIntrinsics::new(90.0, 95.0, 31.5, 30.0, 64, 60).unwrap(), pose)
    }

    fn cloud() -> GaussianCloud {
        let mut c = GaussianCloud::empty();
        c.push(
            Vector3::new(0.3, 0.2, 4.0),
            Quat::new(0.8, 0.3, -0.4, 0.2),
            Vector3::new(-1.2, -1.9, -2.6),
            0.4,
            Vector3::new(0.2, 0.5, 0.9),
        );
        c
    }

    // Scalar probe of every projection output with fixed random weights.
    fn probe(p: &SplatProjection, g: &SplatGrad) -> f64 {
        g.mean.dot(&p.mean)
            + g.conic[0] * p.conic[0]
            + g.conic[1] * p.conic[1]
            + g.conic[2] * p.conic[2]
            + g.opacity * p.opacity
            + g.color.dot(&p.color)
            + g.normal.dot(&p.normal)
            + g.distance * p.distance
            + g.depth * p.depth
    }

    fn weights() -> SplatGrad {
        SplatGrad {
            mean: Vector2::new(0.3, -0.7),
            conic: [2.0, -1.5, 0.8],
            opacity: 0.9,
            color: Vector3::new(0.1, -0.4, 0.6),
            normal: Vector3::new(-0.5, 0.25, 0.7),
            distance: 0.35,
            depth: -0.2,
        }
    }

    fn check(cloud: &GaussianCloud) {
        let cam = camera();
        let s = RenderSettings::default();
        let g = weights();
        let p = project_gaussian(cloud, 0, &cam, &s).unwrap();
        let mut shg = vec![Vector3::zeros(); crate::gaussians::sh_rest_count(cloud.sh_degree)];
        let a = project_backward(cloud, &p, &g, &cam, &mut shg);
        let eval = |c: &GaussianCloud| probe(&project_gaussian(c, 0, &cam, &s).unwrap(), &g);
        let h = 1e-6;
        let fd = |f: &dyn Fn(&mut GaussianCloud, f64)| {
            let mut cp = cloud.clone();
            f(&mut cp, h);
            let mut cm = cloud.clone();
            f(&mut cm, -h);
            (eval(&cp) - eval(&cm)) / (2.0 * h)
        };
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * (1.0 + a.abs().max(b.abs()));
        for k in 0..3 {
            let d = fd(&|c, h| c.positions[0][k] += h);
            assert!(close(d, a.position[k]), "position {k}: fd {d} vs {}", a.position[k]);
            let d = fd(&|c, h| c.log_scales[0][k] += h);
            assert!(close(d, a.log_scale[k]), "log_scale {k}: fd {d} vs {}", a.log_scale[k]);
            let d = fd(&|c, h| c.colors[0][k] += h);
            assert!(close(d, a.color[k]));
        }
        for k in 0..4 {
            let d = fd(&|c, h| c.rotations[0][k] += h);
            assert!(close(d, a.rotation[k]), "rotation {k}: fd {d} vs {}", a.rotation[k]);
        }
        let d = fd(&|c, h| c.opacity_logits[0] += h);
        assert!(close(d, a.opacity_logit));
        for (kk, sg) in shg.iter().enumerate() {
            for ch in 0..3 {
                let d = fd(&|c, h| c.sh_rest[kk][ch] += h);
                assert!(close(d, sg[ch]), "sh {kk}/{ch}");
            }
        }
    }

    #[test]
    fn projection_adjoint_matches_finite_differences() {
        check(&cloud());
    }

    #[test]
    fn projection_adjoint_with_sh() {
        let mut c = cloud();
        c.set_sh_degree(2).unwrap();
        for (k, v) in c.sh_rest.iter_mut().enumerate() {
            *v = Vector3::new(0.1 * k as f64, -0.05, 0.02 * k as f64 - 0.07);
        }
        check(&c);
    }

    #[test]
    fn isotropic_footprint_size() {
        let cam = Camera::new(0, CameraIntrinsics::new(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap(), CameraPose::identity());
        let mut c = GaussianCloud::empty();
        c.push(Vector3::new(0.0, 0.0, 5.0), Quat::new(1.0, 0.0, 0.0, 0.0), Vector3::repeat(0.1f64.ln()), 0.0, Vector3::zeros());
        let s = RenderSettings::default();
        let p = project_gaussian(&c, 0, &cam, &s).unwrap();
        // 0.1 · 100 / 5 = 2 px standard deviation plus the dilation floor.
        assert!((p.cov[(0, 0)] - (4.0 + s.dilation)).abs() < 1e-12);
        assert!((p.cov[(1, 1)] - (4.0 + s.dilation)).abs() < 1e-12);
        assert!(p.cov[(0, 1)].abs() < 1e-15);
        assert_eq!(p.mean, Vector2::new(64.0, 64.0));

        c.positions[0] = Vector3::new(0.0, 0.0, -1.0);
        assert!(project_gaussian(&c, 0, &cam, &s).is_none());
    }
}
