//! Synthetic ray-traced datasets and dataset directory IO.
//!
//! Layout: `cameras.json`, `images/%04d.png`, `depth_gt/%04d.f32bin` (+ `.json`),
//! `init.ply`, `gt_points.ply`, optionally `features/%04d.feat`.

use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraIntrinsics, CameraPose};
use crate::imageproc::Image;
use crate::io::{load_png, read_floatmap, read_ply, save_png, write_floatmap, write_ply, FloatMapHeader, PlyData};

pub const GT_POINT_COUNT: usize = 100_000;
pub const INIT_POINT_COUNT: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Sphere,
    Cube,
    TiltedPlane,
    TwoSpheres,
}

impl FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "cube" => Ok(Self::Cube),
            "tilted_plane" => Ok(Self::TiltedPlane),
            "two_spheres" => Ok(Self::TwoSpheres),
            _ => Err(Error::BadConfig(format!("unknown scene kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Checker,
    ValueNoise,
}

impl FromStr for TextureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checker" => Ok(Self::Checker),
            "value_noise" => Ok(Self::ValueNoise),
            _ => Err(Error::BadConfig(format!("unknown texture `{s}`"))),
        }
    }
}

/// One analytic surface piece.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned box surface.
    Box { center: [f64; 3], half_extent: f64 },
    /// Square patch; `u` is one in-plane axis, the other is `normal × u`.
    Patch { center: [f64; 3], normal: [f64; 3], u: [f64; 3], half_size: f64 },
}

fn v3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

/// Ray hit: parameter along the ray, world point and outward unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
}

impl Primitive {
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        match self {
            Primitive::Sphere { center, radius } => {
                let c = v3(center);
                let oc = o - c;
                let a = d.norm_squared();
                let b = oc.dot(d);
                let disc = b * b - a * (oc.norm_squared() - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = [(-b - s) / a, (-b + s) / a].into_iter().find(|t| *t > 1e-9)?;
                let p = o + d * t;
                Some(Hit { t, point: p, normal: (p - c) / *radius })
            }
            Primitive::Box { center, half_extent } => {
                let c = v3(center);
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut a0, mut a1) = (0, 0);
                for k in 0..3 {
                    if d[k].abs() < 1e-300 {
                        if (o[k] - c[k]).abs() > *half_extent {
                            return None;
                        }
                        continue;
                    }
                    let mut ta = (c[k] - half_extent - o[k]) / d[k];
                    let mut tb = (c[k] + half_extent - o[k]) / d[k];
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        a0 = k;
                    }
                    if tb < t1 {
                        t1 = tb;
                        a1 = k;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                let (t, axis) = if t0 > 1e-9 { (t0, a0) } else if t1 > 1e-9 { (t1, a1) } else { return None };
                let p = o + d * t;
                let mut n = Vector3::zeros();
                n[axis] = (p[axis] - c[axis]).signum();
                Some(Hit { t, point: p, normal: n })
            }
            Primitive::Patch { center, normal, u, half_size } => {
                let (c, n, u) = (v3(center), v3(normal), v3(u));
                let den = n.dot(d);
                if den.abs() < 1e-12 {
                    return None;
                }
                let t = n.dot(&(c - o)) / den;
                if t <= 1e-9 {
                    return None;
                }
                let p = o + d * t;
                let w = n.cross(&u);
                let r = p - c;
                if r.dot(&u).abs() > *half_size || r.dot(&w).abs() > *half_size {
                    return None;
                }
                Some(Hit { t, point: p, normal: n })
            }
        }
    }

    /// Unsigned distance from `p` to the surface.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => ((p - v3(center)).norm() - radius).abs(),
            Primitive::Box { center, half_extent } => {
                let q = (p - v3(center)).abs() - Vector3::repeat(*half_extent);
                let outside = q.map(|v| v.max(0.0)).norm();
                let inside = q.max().min(0.0);
                (outside + inside).abs()
            }
            Primitive::Patch { center, normal, u, half_size } => {
                let (n, u) = (v3(normal), v3(u));
                let w = n.cross(&u);
                let r = p - v3(center);
                let du = (r.dot(&u).abs() - half_size).max(0.0);
                let dw = (r.dot(&w).abs() - half_size).max(0.0);
                (r.dot(&n).powi(2) + du * du + dw * dw).sqrt()
            }
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            Primitive::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Primitive::Box { half_extent, .. } => 24.0 * half_extent * half_extent,
            Primitive::Patch { half_size, .. } => 4.0 * half_size * half_size,
        }
    }

    /// Uniform area sample.
    pub fn sample(&self, rng: &mut impl Rng) -> Vector3<f64> {
        match self {
            Primitive::Sphere { center, radius } => {
                let z: f64 = rng.random_range(-1.0..=1.0);
                let phi: f64 = rng.random_range(0.0..TAU);
                let r = (1.0 - z * z).max(0.0).sqrt();
                v3(center) + Vector3::new(r * phi.cos(), r * phi.sin(), z) * *radius
            }
            Primitive::Box { center, half_extent } => {
                let face = rng.random_range(0..6usize);
                let axis = face / 2;
                let mut p = Vector3::zeros();
                for k in 0..3 {
                    p[k] = if k == axis {
                        if face % 2 == 0 { -half_extent } else { *half_extent }
                    } else {
                        rng.random_range(-half_extent..=*half_extent)
                    };
                }
                v3(center) + p
            }
            Primitive::Patch { center, normal, u, half_size } => {
                let (n, u) = (v3(normal), v3(u));
                let w = n.cross(&u);
                let a: f64 = rng.random_range(-half_size..=*half_size);
                let b: f64 = rng.random_range(-half_size..=*half_size);
                v3(center) + u * a + w * b
            }
        }
    }

    fn bounding_radius(&self) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => v3(center).norm() + radius,
            Primitive::Box { center, half_extent } => v3(center).norm() + half_extent * 3f64.sqrt(),
            Primitive::Patch { center, half_size, .. } => v3(center).norm() + half_size * 2f64.sqrt(),
        }
    }
}

/// Union of primitives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub primitives: Vec<Primitive>,
}

impl Surface {
    pub fn for_kind(kind: SceneKind) -> Self {
        let primitives = match kind {
            SceneKind::Sphere => vec![Primitive::Sphere { center: [0.0; 3], radius: 1.0 }],
            SceneKind::Cube => vec![Primitive::Box { center: [0.0; 3], half_extent: 0.6 }],
            SceneKind::TiltedPlane => {
                let a = 30f64.to_radians();
                vec![Primitive::Patch {
                    center: [0.0; 3],
                    normal: [0.0, -a.sin(), a.cos()],
                    u: [1.0, 0.0, 0.0],
                    half_size: 0.8,
                }]
            }
            SceneKind::TwoSpheres => vec![
                Primitive::Sphere { center: [-0.55, 0.0, 0.0], radius: 0.5 },
                Primitive::Sphere { center: [0.55, 0.0, 0.0], radius: 0.5 },
            ],
        };
        Self { primitives }
    }

    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        self.primitives
            .iter()
            .filter_map(|p| p.intersect(o, d))
            .min_by(|a, b| a.t.total_cmp(&b.t))
    }

    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        self.primitives.iter().map(|s| s.distance(p)).fold(f64::INFINITY, f64::min)
    }

    /// Radius of a sphere about the origin enclosing the surface.
    pub fn extent(&self) -> f64 {
        self.primitives.iter().map(Primitive::bounding_radius).fold(0.0, f64::max)
    }

    /// Area-weighted uniform sample, deterministic per seed.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let areas: Vec<f64> = self.primitives.iter().map(Primitive::area).collect();
        let total: f64 = areas.iter().sum();
        (0..count)
            .map(|_| {
                let mut pick = rng.random::<f64>() * total;
                let mut k = 0;
                while k + 1 < areas.len() && pick >= areas[k] {
                    pick -= areas[k];
                    k += 1;
                }
                self.primitives[k].sample(&mut rng)
            })
            .collect()
    }

    /// Camera-z depth of the first hit per pixel centre (0 where the ray misses).
    pub fn depth_map(&self, cam: &Camera) -> Vec<f64> {
        let w = cam.width();
        (0..w * cam.height())
            .into_par_iter()
            .map(|i| {
                let ray = cam.intrinsics.ray((i % w) as f64, (i / w) as f64);
                let d = cam.pose.rotation_wc() * ray;
                self.intersect(cam.pose.center(), &d).map_or(0.0, |h| h.t)
            })
            .collect()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(x as u64 ^ splitmix(y as u64 ^ splitmix(z as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinear value noise with smoothstep weights, in `[0, 1]`.
pub fn value_noise(p: &Vector3<f64>, seed: u64) -> f64 {
    let f = p.map(f64::floor);
    let t = (p - f).map(|v| v * v * (3.0 - 2.0 * v));
    let (x, y, z) = (f.x as i64, f.y as i64, f.z as i64);
    let mut acc = 0.0;
    for c in 0..8 {
        let (dx, dy, dz) = ((c & 1) as i64, ((c >> 1) & 1) as i64, ((c >> 2) & 1) as i64);
        let w = (if dx == 1 { t.x } else { 1.0 - t.x }) * (if dy == 1 { t.y } else { 1.0 - t.y }) * (if dz == 1 { t.z } else { 1.0 - t.z });
        acc += w * lattice(seed, x + dx, y + dy, z + dz);
    }
    acc
}

const ALBEDO_A: [f64; 3] = [0.9, 0.78, 0.35];
const ALBEDO_B: [f64; 3] = [0.15, 0.3, 0.7];
const AMBIENT: f64 = 0.3;

pub fn light_direction() -> Vector3<f64> {
    Vector3::new(0.5, -0.4, 0.75).normalize()
}

/// Surface albedo at a world point.
pub fn albedo(texture: TextureKind, p: &Vector3<f64>, seed: u64) -> Vector3<f64> {
    let s = match texture {
        TextureKind::Checker => {
            let k = (p * 4.0).map(f64::floor);
            ((k.x + k.y + k.z) as i64).rem_euclid(2) as f64
        }
        TextureKind::ValueNoise => {
            let n = 0.5 * value_noise(&(p * 3.0), seed) + 0.3 * value_noise(&(p * 7.0), seed ^ 1) + 0.2 * value_noise(&(p * 15.0), seed ^ 2);
            ((n - 0.5) * 2.2 + 0.5).clamp(0.0, 1.0)
        }
    };
    v3(&ALBEDO_A) * (1.0 - s) + v3(&ALBEDO_B) * s
}

/// Lambertian shading with one directional light; faces turned away from
/// the light only receive ambient light.
pub fn shade(texture: TextureKind, hit: &Hit, seed: u64) -> Vector3<f64> {
    let lambert = hit.normal.dot(&light_direction()).max(0.0);
    albedo(texture, &hit.point, seed) * (AMBIENT + (1.0 - AMBIENT) * lambert)
}

const SUPERSAMPLE: [(f64, f64); 4] = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];

/// Ray-traced colour (2×2 supersampled) and pixel-centre depth.
pub fn trace_view(surface: &Surface, texture: TextureKind, seed: u64, cam: &Camera, background: Vector3<f64>) -> (Image, Vec<f64>) {
    let w = cam.width();
    let n = w * cam.height();
    let rgb: Vec<Vector3<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let mut acc = Vector3::zeros();
            for (ox, oy) in SUPERSAMPLE {
                let d = cam.pose.rotation_wc() * cam.intrinsics.ray(x + ox, y + oy);
                acc += surface.intersect(cam.pose.center(), &d).map_or(background, |h| shade(texture, &h, seed));
            }
            acc / SUPERSAMPLE.len() as f64
        })
        .collect();
    let img = Image::from_rgb(w, cam.height(), &rgb).expect("consistent size");
    (img, surface.depth_map(cam))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub kind: SceneKind,
    pub texture: TextureKind,
    pub n_views: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl SceneConfig {
    pub fn new(kind: SceneKind, texture: TextureKind, n_views: usize, resolution: usize, seed: u64) -> Self {
        Self { kind, texture, n_views, resolution, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_views < 4 {
            return Err(Error::BadConfig(format!("at least 4 views required, got {}", self.n_views)));
        }
        if self.resolution < 32 {
            return Err(Error::BadConfig(format!("resolution must be at least 32, got {}", self.resolution)));
        }
        Ok(())
    }
}

/// Cameras around the surface at three times its extent, looking at the
/// origin. Closed surfaces get a ring with alternating elevation; the patch
/// gets a cone around its normal.
pub fn scene_cameras(surface: &Surface, n_views: usize, resolution: usize) -> Result<Vec<Camera>> {
    let radius = 3.0 * surface.extent();
    let f = 1.1 * resolution as f64;
    let c = (resolution as f64 - 1.0) / 2.0;
    let k = CameraIntrinsics::new(f, f, c, c, resolution as u32, resolution as u32)?;
    let patch_normal = match surface.primitives.as_slice() {
        [Primitive::Patch { normal, u, .. }] => Some((v3(normal), v3(u))),
        _ => None,
    };
    (0..n_views)
        .map(|i| {
            let phi = TAU * i as f64 / n_views as f64;
            let dir = match patch_normal {
                Some((n, u)) => {
                    let w = n.cross(&u);
                    let cone = 35f64.to_radians();
                    n * cone.cos() + (u * phi.cos() + w * phi.sin()) * cone.sin()
                }
                None => {
                    let elev = if i % 2 == 0 { 25f64 } else { -5f64 }.to_radians();
                    Vector3::new(elev.cos() * phi.cos(), elev.cos() * phi.sin(), elev.sin())
                }
            };
            let pose = CameraPose::look_at(dir * radius, Vector3::zeros(), Vector3::z())?;
            Ok(Camera::new(i, k, pose))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ViewRecord {
    id: usize,
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// Camera-to-world rotation, row-major.
    #[serde(rename = "R_wc")]
    r_wc: [f64; 9],
    /// Camera centre in world coordinates.
    t_c: [f64; 3],
}

/// Ground-truth description stored alongside synthetic datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub kind: SceneKind,
    pub texture: TextureKind,
    pub seed: u64,
    pub background: [f64; 3],
    pub surface: Surface,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CamerasFile {
    views: Vec<ViewRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene: Option<SceneInfo>,
}

fn camera_record(c: &Camera) -> ViewRecord {
    let r = c.pose.rotation_wc();
    let t = c.pose.center();
    ViewRecord {
        id: c.id,
        width: c.intrinsics.width,
        height: c.intrinsics.height,
        fx: c.intrinsics.fx,
        fy: c.intrinsics.fy,
        cx: c.intrinsics.cx,
        cy: c.intrinsics.cy,
        r_wc: [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        t_c: [t.x, t.y, t.z],
    }
}

fn record_camera(v: &ViewRecord) -> Result<Camera> {
    let k = CameraIntrinsics::new(v.fx, v.fy, v.cx, v.cy, v.width, v.height)?;
    let pose = CameraPose::new(Matrix3::from_row_slice(&v.r_wc), v3(&v.t_c))?;
    Ok(Camera::new(v.id, k, pose))
}

pub fn write_cameras(path: &Path, cameras: &[Camera], scene: Option<&SceneInfo>) -> Result<()> {
    let file = CamerasFile { views: cameras.iter().map(camera_record).collect(), scene: scene.cloned() };
    std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

pub fn read_cameras(path: &Path) -> Result<(Vec<Camera>, Option<SceneInfo>)> {
    let file: CamerasFile = serde_json::from_slice(&std::fs::read(path)?)?;
    let mut cams = file.views.iter().map(record_camera).collect::<Result<Vec<_>>>()?;
    cams.sort_by_key(|c| c.id);
    if cams.iter().enumerate().any(|(i, c)| c.id != i) {
        return Err(Error::BadConfig("view ids must be contiguous from 0".into()));
    }
    Ok((cams, file.scene))
}

/// A validated dataset directory. Optional assets are `None` when absent.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub cameras: Vec<Camera>,
    pub images: Vec<PathBuf>,
    pub depths: Option<Vec<PathBuf>>,
    pub init_points: Option<PathBuf>,
    pub gt_points: Option<PathBuf>,
    pub features: Option<Vec<PathBuf>>,
    pub scene: Option<SceneInfo>,
}

fn view_file(root: &Path, dir: &str, i: usize, ext: &str) -> PathBuf {
    root.join(dir).join(format!("{i:04}.{ext}"))
}

fn all_present(paths: Vec<PathBuf>) -> Option<Vec<PathBuf>> {
    paths.iter().all(|p| p.exists()).then_some(paths)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let cams_path = dir.join("cameras.json");
    if !cams_path.exists() {
        return Err(Error::MissingCameras(dir.to_path_buf()));
    }
    let (cameras, scene) = read_cameras(&cams_path)?;
    let images: Vec<PathBuf> = cameras.iter().map(|c| view_file(dir, "images", c.id, "png")).collect();
    for (c, p) in cameras.iter().zip(&images) {
        let (w, h) = image::image_dimensions(p)?;
        if (w, h) != (c.intrinsics.width, c.intrinsics.height) {
            return Err(Error::ResolutionMismatch {
                view: c.id,
                expected: (c.intrinsics.width, c.intrinsics.height),
                found: (w, h),
            });
        }
    }
    let depths = all_present(cameras.iter().map(|c| view_file(dir, "depth_gt", c.id, "f32bin")).collect());
    let features = all_present(cameras.iter().map(|c| view_file(dir, "features", c.id, "feat")).collect());
    let opt = |name: &str| Some(dir.join(name)).filter(|p| p.exists());
    Ok(Dataset {
        root: dir.to_path_buf(),
        cameras,
        images,
        depths,
        init_points: opt("init.ply"),
        gt_points: opt("gt_points.ply"),
        features,
        scene,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn load_image(&self, view: usize) -> Result<Image> {
        load_png(&self.images[view])
    }

    pub fn load_images(&self) -> Result<Vec<Image>> {
        (0..self.len()).map(|i| self.load_image(i)).collect()
    }

    /// Ground-truth depth (0 marks background), if the dataset carries it.
    pub fn load_depth(&self, view: usize) -> Result<Option<Vec<f64>>> {
        let Some(paths) = &self.depths else { return Ok(None) };
        let (h, data) = read_floatmap(&paths[view])?;
        let c = &self.cameras[view];
        if (h.width, h.height, h.channels) != (c.width(), c.height(), 1) {
            return Err(Error::ResolutionMismatch {
                view,
                expected: (c.intrinsics.width, c.intrinsics.height),
                found: (h.width as u32, h.height as u32),
            });
        }
        Ok(Some(data))
    }

    pub fn load_init_points(&self) -> Result<Option<PlyData>> {
        self.init_points.as_deref().map(read_ply).transpose()
    }

    pub fn load_gt_points(&self) -> Result<Option<Vec<Vector3<f64>>>> {
        Ok(self.gt_points.as_deref().map(read_ply).transpose()?.map(|p| p.vertices))
    }

    pub fn background(&self) -> Vector3<f64> {
        self.scene.as_ref().map_or(Vector3::zeros(), |s| v3(&s.background))
    }
}

/// Ray traces a synthetic scene into `out`.
pub fn generate_scene(cfg: &SceneConfig, out: &Path) -> Result<Dataset> {
    cfg.validate()?;
    let surface = Surface::for_kind(cfg.kind);
    let cameras = scene_cameras(&surface, cfg.n_views, cfg.resolution)?;
    let background = Vector3::zeros();
    std::fs::create_dir_all(out.join("images"))?;
    std::fs::create_dir_all(out.join("depth_gt"))?;
    let info = SceneInfo {
        kind: cfg.kind,
        texture: cfg.texture,
        seed: cfg.seed,
        background: [background.x, background.y, background.z],
        surface: surface.clone(),
    };
    write_cameras(&out.join("cameras.json"), &cameras, Some(&info))?;
    for cam in &cameras {
        let (img, depth) = trace_view(&surface, cfg.texture, cfg.seed, cam, background);
        save_png(&img, &view_file(out, "images", cam.id, "png"))?;
        let h = FloatMapHeader { width: cam.width(), height: cam.height(), channels: 1 };
        write_floatmap(&view_file(out, "depth_gt", cam.id, "f32bin"), h, &depth)?;
    }
    let gt = surface.sample(GT_POINT_COUNT, cfg.seed);
    write_ply(&out.join("gt_points.ply"), &PlyData { vertices: gt.clone(), colors: None, faces: Vec::new() })?;
    let init: Vec<Vector3<f64>> = gt.iter().step_by(GT_POINT_COUNT / INIT_POINT_COUNT).copied().collect();
    let colors = init.iter().map(|p| albedo(cfg.texture, p, cfg.seed)).collect();
    write_ply(&out.join("init.ply"), &PlyData { vertices: init, colors: Some(colors), faces: Vec::new() })?;
    load_dataset(out)
}

/// Pixel centre of view `cam` that sees world point `p`, if in front of it.
pub fn pixel_of_point(cam: &Camera, p: &Vector3<f64>) -> Option<Vector2<f64>> {
    cam.project(p).ok().map(|(px, _)| px)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageproc::normal_from_depth;
    use tempfile::tempdir;

    fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        for sub in ["", "images", "depth_gt"] {
            let mut entries: Vec<_> = std::fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
            entries.sort();
            for p in entries.into_iter().filter(|p| p.is_file()) {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
        out
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
        let cfg = SceneConfig::new(SceneKind::TwoSpheres, TextureKind::ValueNoise, 4, 32, 3);
        generate_scene(&cfg, a.path()).unwrap();
        generate_scene(&cfg, b.path()).unwrap();
        let (x, y) = (dir_bytes(a.path()), dir_bytes(b.path()));
        assert!(x.len() >= 2 * 4 + 3 + 4);
        assert_eq!(x, y);
    }

    #[test]
    fn bad_configs_rejected() {
        let d = tempdir().unwrap();
        let cfg = SceneConfig::new(SceneKind::Sphere, TextureKind::Checker, 3, 64, 0);
        assert!(matches!(generate_scene(&cfg, d.path()), Err(Error::BadConfig(_))));
        let cfg = SceneConfig::new(SceneKind::Sphere, TextureKind::Checker, 8, 31, 0);
        assert!(matches!(generate_scene(&cfg, d.path()), Err(Error::BadConfig(_))));
        assert!("torus".parse::<SceneKind>().is_err());
        assert_eq!("tilted_plane".parse::<SceneKind>().unwrap(), SceneKind::TiltedPlane);
    }

    #[test]
    fn sphere_depths_backproject_onto_the_sphere() {
        let s = Surface::for_kind(SceneKind::Sphere);
        let cams = scene_cameras(&s, 6, 48).unwrap();
        let mut hits = 0;
        for cam in &cams {
            let depth = s.depth_map(cam);
            for (i, z) in depth.iter().enumerate().filter(|(_, z)| **z > 0.0) {
                let px = Vector2::new((i % 48) as f64, (i / 48) as f64);
                let p = cam.pose.camera_to_world(&cam.backproject(&px, *z).unwrap());
                assert!((p.norm() - 1.0).abs() < 1e-6);
                hits += 1;
            }
        }
        assert!(hits > 1000);
    }

    #[test]
    fn depth_normals_match_analytic_normals() {
        for kind in [SceneKind::Sphere, SceneKind::Cube, SceneKind::TiltedPlane] {
            let s = Surface::for_kind(kind);
            let cams = scene_cameras(&s, 4, 128).unwrap();
            let mut worst: f64 = 0.0;
            for cam in &cams {
                let depth = s.depth_map(cam);
                let valid: Vec<bool> = depth.iter().map(|z| *z > 0.0).collect();
                for y in 2..126 {
                    for x in 2..126 {
                        // Interior: the 5×5 neighbourhood sees the same smooth face.
                        let ray = |x: usize, y: usize| cam.pose.rotation_wc() * cam.intrinsics.ray(x as f64, y as f64);
                        let h0 = s.intersect(cam.pose.center(), &ray(x, y));
                        let Some(h0) = h0 else { continue };
                        let same = (y - 2..=y + 2).all(|yy| {
                            (x - 2..=x + 2).all(|xx| {
                                s.intersect(cam.pose.center(), &ray(xx, yy)).is_some_and(|h| (h.normal - h0.normal).norm() < 0.2)
                            })
                        });
                        let n_cam = cam.pose.rotation_wc().transpose() * h0.normal;
                        // Grazing views amplify the finite-difference error; keep
                        // pixels seen within about 53° of the surface normal.
                        let facing = -n_cam.dot(&cam.intrinsics.ray(x as f64, y as f64).normalize());
                        if !same || facing < 0.6 {
                            continue;
                        }
                        let dn = normal_from_depth(&depth, &valid, cam, x, y).unwrap();
                        worst = worst.max((dn.normal - n_cam).norm());
                    }
                }
            }
            assert!(worst < 1e-3, "{kind:?}: {worst}");
        }
    }

    #[test]
    fn dataset_round_trips_cameras_and_assets() {
        let d = tempdir().unwrap();
        let cfg = SceneConfig::new(SceneKind::Sphere, TextureKind::Checker, 5, 40, 1);
        let cams = scene_cameras(&Surface::for_kind(cfg.kind), 5, 40).unwrap();
        let ds = generate_scene(&cfg, d.path()).unwrap();
        assert_eq!(ds.len(), 5);
        for (a, b) in cams.iter().zip(&ds.cameras) {
            assert_eq!(a.id, b.id);
            assert!((a.pose.rotation_wc() - b.pose.rotation_wc()).abs().max() < 1e-12);
            assert!((a.pose.center() - b.pose.center()).abs().max() < 1e-12);
            assert!((a.intrinsics.fx - b.intrinsics.fx).abs() < 1e-12);
        }
        assert_eq!(ds.load_gt_points().unwrap().unwrap().len(), GT_POINT_COUNT);
        assert_eq!(ds.load_init_points().unwrap().unwrap().vertices.len(), INIT_POINT_COUNT);
        assert!(ds.load_depth(2).unwrap().is_some());
        assert_eq!(ds.scene.as_ref().unwrap().kind, SceneKind::Sphere);
        assert!(ds.features.is_none());
        let img = ds.load_image(0).unwrap();
        assert_eq!((img.width, img.height), (40, 40));
    }

    #[test]
    fn loader_ignores_unknown_keys_and_checks_resolution() {
        let d = tempdir().unwrap();
        let cfg = SceneConfig::new(SceneKind::Cube, TextureKind::Checker, 4, 32, 1);
        generate_scene(&cfg, d.path()).unwrap();
        let p = d.path().join("cameras.json");
        let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
        v["future"] = serde_json::json!({"x": 1});
        v["views"][0]["exposure"] = serde_json::json!(0.5);
        std::fs::write(&p, serde_json::to_vec(&v).unwrap()).unwrap();
        assert_eq!(load_dataset(d.path()).unwrap().len(), 4);

        save_png(&Image::new(31, 32, 3).unwrap(), &d.path().join("images/0002.png")).unwrap();
        assert!(matches!(load_dataset(d.path()), Err(Error::ResolutionMismatch { view: 2, .. })));
        std::fs::remove_file(&p).unwrap();
        assert!(matches!(load_dataset(d.path()), Err(Error::MissingCameras(_))));
        std::fs::write(&p, "{not json").unwrap();
        assert!(matches!(load_dataset(d.path()), Err(Error::BadJson(_))));
    }

    #[test]
    fn primitive_distances_vanish_on_samples() {
        for kind in [SceneKind::Sphere, SceneKind::Cube, SceneKind::TiltedPlane, SceneKind::TwoSpheres] {
            let s = Surface::for_kind(kind);
            for p in s.sample(500, 9) {
                assert!(s.distance(&p) < 1e-12, "{kind:?}");
            }
            assert!(s.distance(&Vector3::new(0.0, 0.0, 5.0)) > 1.0);
        }
    }

    #[test]
    fn value_noise_is_bounded_and_seeded() {
        let p = Vector3::new(0.3, -1.7, 2.2);
        let a = value_noise(&p, 1);
        assert!((0.0..=1.0).contains(&a));
        assert_eq!(a, value_noise(&p, 1));
        assert_ne!(a, value_noise(&p, 2));
    }
}
