//! Tile-based differentiable splatting.
//!
//! Each pixel composites its depth-sorted contributors front to back; colour,
//! normal, plane distance and Gaussian depth share the same blending weights.
//! Contributor records are retained so [`render_backward`] can replay the
//! compositing in reverse.

mod backward;
mod project;

use std::hash::{Hash, Hasher};

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussians::GaussianCloud;
use crate::geometry::Camera;

pub use backward::{render_backward, CloudGradients, MapGradients};
pub use project::{project_gaussian, SplatGrad, SplatProjection};

/// How the per-pixel depth consumed by the losses is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DepthMode {
    /// Intersect the viewing ray with the blended plane `(N, D)`.
    #[default]
    Plane,
    /// Alpha-normalised blend of per-Gaussian camera depths.
    Blended,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    pub background: Vector3<f64>,
    /// Tile edge in pixels; `0` renders the image as one tile.
    pub tile_size: usize,
    pub alpha_max: f64,
    /// Blending stops before transmittance would fall below this.
    pub transmittance_min: f64,
    /// Contributions with smaller alpha are skipped.
    pub min_alpha: f64,
    /// Footprint cut-off as a Mahalanobis radius.
    pub extent_sigma: f64,
    /// Isotropic screen-space dilation in px².
    pub dilation: f64,
    pub near: f64,
    /// Accumulated alpha a pixel needs for its depth to count as valid.
    pub alpha_floor: f64,
    pub depth_mode: DepthMode,
    /// Store per-pixel contributor lists; [`render_backward`] needs them.
    pub keep_records: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            background: Vector3::zeros(),
            tile_size: 16,
            alpha_max: 0.99,
            transmittance_min: 1e-4,
            min_alpha: 1.0 / 255.0,
            extent_sigma: 3.5,
            dilation: 0.3,
            near: 0.01,
            alpha_floor: 0.5,
            depth_mode: DepthMode::Plane,
            keep_records: true,
        }
    }
}

impl RenderSettings {
    /// Settings whose footprint truncation is far below double-precision
    /// noise, so the rendered maps are smooth in every parameter apart from
    /// the alpha clamp, transmittance cut-off and depth ordering.
    pub fn exact() -> Self {
        Self { min_alpha: 0.0, extent_sigma: 8.5, ..Self::default() }
    }
}

/// One composited contribution at a pixel.
#[derive(Debug, Clone, Copy)]
pub struct Contribution {
    /// Index into `RenderBuffers::splats`.
    pub splat: u32,
    /// Index into the owning tile's splat list.
    pub(crate) local: u32,
    pub alpha: f64,
    /// Transmittance in front of this contributor.
    pub transmittance: f64,
    /// Alpha hit the `alpha_max` clamp.
    pub clamped: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ContributorRecords {
    /// Per pixel `(start, len)` into `entries`.
    pub spans: Vec<(u32, u32)>,
    pub entries: Vec<Contribution>,
}

impl ContributorRecords {
    pub fn pixel(&self, idx: usize) -> &[Contribution] {
        let (s, l) = self.spans[idx];
        &self.entries[s as usize..(s + l) as usize]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Tile {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    /// Splat indices sorted front to back.
    pub splats: Vec<u32>,
}

/// Rendered maps for one view. All maps are row-major `H × W`.
#[derive(Debug, Clone)]
pub struct RenderBuffers {
    pub width: usize,
    pub height: usize,
    pub camera: Camera,
    pub settings: RenderSettings,
    pub color: Vec<Vector3<f64>>,
    pub alpha: Vec<f64>,
    /// Blended camera-frame normal (not renormalised).
    pub normal: Vec<Vector3<f64>>,
    pub distance: Vec<f64>,
    /// Ray-plane depth from the blended `(normal, distance)`; see `plane_valid`.
    pub plane_depth: Vec<f64>,
    pub plane_valid: Vec<bool>,
    /// Blended per-Gaussian camera depth `Σ zᵢ wᵢ` (unnormalised).
    pub gaussian_depth: Vec<f64>,
    /// Depth used by the losses and fusion, according to `settings.depth_mode`.
    pub depth: Vec<f64>,
    pub depth_valid: Vec<bool>,
    pub transmittance: Vec<f64>,
    pub splats: Vec<SplatProjection>,
    pub records: Option<ContributorRecords>,
    pub(crate) tiles: Vec<Tile>,
}

impl RenderBuffers {
    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    /// Hash of every discrete decision taken by the forward pass (contributor
    /// sets and order, alpha clamps, normal axis and orientation, validity).
    /// Two renders with equal signatures lie on the same smooth branch.
    pub fn branch_signature(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for s in &self.splats {
            s.gaussian.hash(&mut h);
            s.cache.normal_axis.hash(&mut h);
            (s.cache.normal_sign > 0.0).hash(&mut h);
        }
        if let Some(rec) = &self.records {
            for (s, l) in &rec.spans {
                l.hash(&mut h);
                for c in &rec.entries[*s as usize..(*s + *l) as usize] {
                    c.splat.hash(&mut h);
                    c.clamped.hash(&mut h);
                }
            }
        }
        self.depth_valid.hash(&mut h);
        self.plane_valid.hash(&mut h);
        h.finish()
    }
}

fn build_tiles(width: usize, height: usize, tile_size: usize) -> Vec<Tile> {
    let ts_x = if tile_size == 0 { width } else { tile_size };
    let ts_y = if tile_size == 0 { height } else { tile_size };
    let mut tiles = Vec::new();
    for y0 in (0..height).step_by(ts_y.max(1)) {
        for x0 in (0..width).step_by(ts_x.max(1)) {
            tiles.push(Tile {
                x0,
                y0,
                x1: (x0 + ts_x).min(width),
                y1: (y0 + ts_y).min(height),
                splats: Vec::new(),
            });
        }
    }
    tiles
}

#[derive(Default)]
struct TileOutput {
    color: Vec<Vector3<f64>>,
    alpha: Vec<f64>,
    normal: Vec<Vector3<f64>>,
    distance: Vec<f64>,
    gdepth: Vec<f64>,
    transmittance: Vec<f64>,
    spans: Vec<(u32, u32)>,
    entries: Vec<Contribution>,
}

/// Hot per-splat data for the compositing loop, packed per tile.
struct Packed {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    /// Early-out radius²: beyond it the contribution is skipped anyway.
    q_skip: f64,
    bbox: [i64; 4],
}

fn pack(sp: &SplatProjection, s: &RenderSettings) -> Packed {
    let cut = s.extent_sigma * s.extent_sigma;
    // opacity · exp(−q/2) < min_alpha for every q beyond this (with slack;
    // the exact test still runs on everything inside).
    let fade = if s.min_alpha > 0.0 && sp.opacity > 0.0 {
        2.0 * (sp.opacity / s.min_alpha).ln() * (1.0 + 1e-9) + 1e-9
    } else {
        f64::INFINITY
    };
    Packed {
        mean: [sp.mean.x, sp.mean.y],
        conic: sp.conic,
        opacity: sp.opacity,
        q_skip: cut.min(fade.max(0.0)),
        bbox: sp.bbox,
    }
}

fn render_tile(tile: &Tile, splats: &[SplatProjection], s: &RenderSettings) -> TileOutput {
    let n = (tile.x1 - tile.x0) * (tile.y1 - tile.y0);
    let mut out = TileOutput {
        color: Vec::with_capacity(n),
        alpha: Vec::with_capacity(n),
        normal: Vec::with_capacity(n),
        distance: Vec::with_capacity(n),
        gdepth: Vec::with_capacity(n),
        transmittance: Vec::with_capacity(n),
        spans: Vec::with_capacity(n),
        entries: Vec::new(),
    };
    let cut = s.extent_sigma * s.extent_sigma;
    let packed: Vec<Packed> = tile.splats.iter().map(|&si| pack(&splats[si as usize], s)).collect();
    for y in tile.y0..tile.y1 {
        for x in tile.x0..tile.x1 {
            let (px, py) = (x as f64, y as f64);
            let (xi, yi) = (x as i64, y as i64);
            let start = out.entries.len() as u32;
            let mut t = 1.0;
            let mut color = Vector3::zeros();
            let mut normal = Vector3::zeros();
            let mut dist = 0.0;
            let mut gdepth = 0.0;
            for (local, pk) in packed.iter().enumerate() {
                if xi < pk.bbox[0] || xi > pk.bbox[2] || yi < pk.bbox[1] || yi > pk.bbox[3] {
                    continue;
                }
                let dx = px - pk.mean[0];
                let dy = py - pk.mean[1];
                let [a, b, c] = pk.conic;
                let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
                if !(q <= pk.q_skip) || !(q <= cut) {
                    continue;
                }
                let raw = pk.opacity * (-0.5 * q).exp();
                let clamped = raw > s.alpha_max;
                let alpha = if clamped { s.alpha_max } else { raw };
                if alpha < s.min_alpha {
                    continue;
                }
                let next_t = t * (1.0 - alpha);
                if next_t < s.transmittance_min {
                    break;
                }
                let si = tile.splats[local];
                let sp = &splats[si as usize];
                let w = alpha * t;
                color += sp.color * w;
                normal += sp.normal * w;
                dist += sp.distance * w;
                gdepth += sp.depth * w;
                if s.keep_records {
                    out.entries.push(Contribution { splat: si, local: local as u32, alpha, transmittance: t, clamped });
                }
                t = next_t;
            }
            out.color.push(color + s.background * t);
            out.alpha.push(1.0 - t);
            out.normal.push(normal);
            out.distance.push(dist);
            out.gdepth.push(gdepth);
            out.transmittance.push(t);
            out.spans.push((start, out.entries.len() as u32 - start));
        }
    }
    out
}

/// Renders `cloud` from `cam`.
pub fn render(cloud: &GaussianCloud, cam: &Camera, settings: &RenderSettings) -> Result<RenderBuffers> {
    let (width, height) = (cam.width(), cam.height());
    if width == 0 || height == 0 {
        return Err(Error::InvalidCamera("zero-sized image".into()));
    }
    let projected: Vec<SplatProjection> = (0..cloud.len())
        .into_par_iter()
        .filter_map(|i| project_gaussian(cloud, i, cam, settings))
        .collect();
    // Sort small keys, then move each projection once.
    let mut keys: Vec<(f64, usize, usize)> = projected.iter().enumerate().map(|(k, s)| (s.depth, s.gaussian, k)).collect();
    keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut slots: Vec<Option<SplatProjection>> = projected.into_iter().map(Some).collect();
    let splats: Vec<SplatProjection> = keys.iter().map(|k| slots[k.2].take().expect("each index once")).collect();

    let mut tiles = build_tiles(width, height, settings.tile_size);
    let ts_x = if settings.tile_size == 0 { width } else { settings.tile_size };
    let ts_y = if settings.tile_size == 0 { height } else { settings.tile_size };
    let tiles_x = width.div_ceil(ts_x);
    for (si, sp) in splats.iter().enumerate() {
        let tx0 = (sp.bbox[0].max(0) as usize) / ts_x;
        let ty0 = (sp.bbox[1].max(0) as usize) / ts_y;
        let tx1 = (sp.bbox[2].min(width as i64 - 1) as usize) / ts_x;
        let ty1 = (sp.bbox[3].min(height as i64 - 1) as usize) / ts_y;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].splats.push(si as u32);
            }
        }
    }

    let outputs: Vec<TileOutput> = tiles.par_iter().map(|t| render_tile(t, &splats, settings)).collect();

    let n = width * height;
    let mut buf = RenderBuffers {
        width,
        height,
        camera: *cam,
        settings: settings.clone(),
        color: vec![Vector3::zeros(); n],
        alpha: vec![0.0; n],
        normal: vec![Vector3::zeros(); n],
        distance: vec![0.0; n],
        plane_depth: vec![0.0; n],
        plane_valid: vec![false; n],
        gaussian_depth: vec![0.0; n],
        depth: vec![0.0; n],
        depth_valid: vec![false; n],
        transmittance: vec![1.0; n],
        splats,
        records: None,
        tiles,
    };
    let mut records = ContributorRecords { spans: vec![(0, 0); n], entries: Vec::new() };
    for (tile, out) in buf.tiles.iter().zip(outputs) {
        let base = records.entries.len() as u32;
        records.entries.extend_from_slice(&out.entries);
        let mut k = 0;
        for y in tile.y0..tile.y1 {
            for x in tile.x0..tile.x1 {
                let idx = y * width + x;
                buf.color[idx] = out.color[k];
                buf.alpha[idx] = out.alpha[k];
                buf.normal[idx] = out.normal[k];
                buf.distance[idx] = out.distance[k];
                buf.gaussian_depth[idx] = out.gdepth[k];
                buf.transmittance[idx] = out.transmittance[k];
                let (s, l) = out.spans[k];
                records.spans[idx] = (base + s, l);
                k += 1;
            }
        }
    }
    if settings.keep_records {
        buf.records = Some(records);
    }

    let (plane, plane_valid) =
        depth_from_plane_maps(&buf.distance, &buf.normal, &buf.alpha, cam, settings.alpha_floor);
    buf.plane_depth = plane;
    buf.plane_valid = plane_valid;
    match settings.depth_mode {
        DepthMode::Plane => {
            buf.depth = buf.plane_depth.clone();
            buf.depth_valid = buf.plane_valid.clone();
        }
        DepthMode::Blended => {
            for i in 0..n {
                let a = buf.alpha[i];
                if a > settings.alpha_floor {
                    buf.depth[i] = buf.gaussian_depth[i] / a;
                    buf.depth_valid[i] = buf.depth[i] > 0.0;
                }
            }
        }
    }
    Ok(buf)
}

pub const PLANE_DENOMINATOR_MIN: f64 = 1e-6;

/// Per-pixel ray-plane depth `D / (N · K⁻¹p̄)`. Pixels whose accumulated alpha
/// is at or below `alpha_floor`, whose denominator is tiny, or whose depth is
/// not positive are flagged invalid (value 0).
pub fn depth_from_plane_maps(
    distance: &[f64],
    normal: &[Vector3<f64>],
    alpha: &[f64],
    cam: &Camera,
    alpha_floor: f64,
) -> (Vec<f64>, Vec<bool>) {
    let (w, h) = (cam.width(), cam.height());
    let mut depth = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if alpha[i] <= alpha_floor {
                continue;
            }
            let den = normal[i].dot(&cam.intrinsics.ray(x as f64, y as f64));
            if den.abs() < PLANE_DENOMINATOR_MIN {
                continue;
            }
            let z = distance[i] / den;
            if z > 0.0 && z.is_finite() {
                depth[i] = z;
                valid[i] = true;
            }
        }
    }
    (depth, valid)
}

/// Pixel centre of linear index `i` in a `width`-wide image.
#[inline]
pub fn pixel_of(i: usize, width: usize) -> Vector2<f64> {
    Vector2::new((i % width) as f64, (i / width) as f64)
}
