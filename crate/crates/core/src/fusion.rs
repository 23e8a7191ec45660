//! TSDF integration of depth maps and marching-cubes surface extraction.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussians::GaussianCloud;
use crate::geometry::{look_at_center, Camera};
use crate::imageproc::Image;
use crate::rasterizer::{render, RenderSettings};
use crate::io::{read_obj, read_ply, write_obj, write_ply, PlyData};

pub const TSDF_MAGIC: &[u8; 15] = b"VASPLAT.TSDF.v1";

const CORNER_KEY: u64 = 1 << 63;

/// Regular grid of truncated signed distances, normalised to `[-1, 1]`.
/// Voxel `(i, j, k)` is centred at `origin + voxel · (i, j, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    pub origin: Vector3<f64>,
    pub voxel: f64,
    pub dims: [usize; 3],
    pub truncation: f64,
    pub tsdf: Vec<f64>,
    pub weight: Vec<f64>,
    pub color: Option<Vec<Vector3<f64>>>,
}

impl TsdfVolume {
    pub fn new(origin: Vector3<f64>, voxel: f64, dims: [usize; 3], truncation: f64) -> Result<Self> {
        if !(voxel > 0.0) || !voxel.is_finite() {
            return Err(Error::BadConfig(format!("voxel size must be positive, got {voxel}")));
        }
        if !(truncation >= 2.0 * voxel) {
            return Err(Error::BadConfig(format!("truncation {truncation} below twice the voxel size {voxel}")));
        }
        if dims.iter().any(|d| *d == 0) {
            return Err(Error::BadConfig("volume has a zero dimension".into()));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(Self { origin, voxel, dims, truncation, tsdf: vec![1.0; n], weight: vec![0.0; n], color: None })
    }

    /// Grid covering the box `[lo, hi]`.
    pub fn from_bounds(lo: Vector3<f64>, hi: Vector3<f64>, voxel: f64, truncation: f64) -> Result<Self> {
        if (0..3).any(|k| !(hi[k] > lo[k])) {
            return Err(Error::BadConfig("empty volume bounds".into()));
        }
        let dims = [0, 1, 2].map(|k| ((hi[k] - lo[k]) / voxel).ceil() as usize + 1);
        Self::new(lo, voxel, dims, truncation)
    }

    pub fn with_color(mut self) -> Self {
        self.color = Some(vec![Vector3::zeros(); self.tsdf.len()]);
        self
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    #[inline]
    pub fn position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.voxel
    }

    /// Samples a signed distance function into every voxel with unit weight.
    pub fn fill_sdf(&mut self, sdf: impl Fn(&Vector3<f64>) -> f64 + Sync) {
        let [nx, ny, _] = self.dims;
        let (origin, voxel, trunc) = (self.origin, self.voxel, self.truncation);
        self.tsdf.par_chunks_mut(nx * ny).zip(self.weight.par_chunks_mut(nx * ny)).enumerate().for_each(|(k, (t, w))| {
            for j in 0..ny {
                for i in 0..nx {
                    let p = origin + Vector3::new(i as f64, j as f64, k as f64) * voxel;
                    t[j * nx + i] = (sdf(&p) / trunc).clamp(-1.0, 1.0);
                    w[j * nx + i] = 1.0;
                }
            }
        });
    }

    /// Writes the `VASPLAT.TSDF.v1` dump: magic, origin, voxel size, dims,
    /// then tsdf and weight as little-endian `f32`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(TSDF_MAGIC)?;
        for v in self.origin.iter().chain(std::iter::once(&self.voxel)) {
            w.write_all(&v.to_le_bytes())?;
        }
        for d in self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in self.tsdf.iter().chain(&self.weight) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Nearest-pixel lookup of a depth map; `None` outside or where invalid.
fn depth_at(depth: &[f64], valid: &[bool], cam: &Camera, p: &Vector2<f64>) -> Option<(usize, f64)> {
    let (u, v) = (p.x.round(), p.y.round());
    if u < 0.0 || v < 0.0 || u >= cam.width() as f64 || v >= cam.height() as f64 {
        return None;
    }
    let i = v as usize * cam.width() + u as usize;
    (valid[i] && depth[i] > 0.0).then_some((i, depth[i]))
}

/// Fuses one depth map with weight 1. Voxels further than the truncation
/// behind the observed surface are left untouched.
pub fn integrate_depth(vol: &mut TsdfVolume, depth: &[f64], valid: &[bool], cam: &Camera, color: Option<&Image>) -> Result<()> {
    let n = cam.width() * cam.height();
    if depth.len() != n || valid.len() != n {
        return Err(Error::ShapeMismatch("depth map does not match the camera".into()));
    }
    let [nx, ny, _] = vol.dims;
    let (origin, voxel, trunc) = (vol.origin, vol.voxel, vol.truncation);
    let slab = nx * ny;
    let colors = vol.color.as_mut().map(|c| c.par_chunks_mut(slab).map(Some).collect::<Vec<_>>());
    let mut colors = colors.unwrap_or_else(|| (0..vol.dims[2]).map(|_| None).collect());
    vol.tsdf
        .par_chunks_mut(slab)
        .zip(vol.weight.par_chunks_mut(slab))
        .zip(colors.par_iter_mut())
        .enumerate()
        .for_each(|(k, ((t, w), c))| {
            for j in 0..ny {
                for i in 0..nx {
                    let p = origin + Vector3::new(i as f64, j as f64, k as f64) * voxel;
                    let x = cam.pose.world_to_camera(&p);
                    if !(x.z > 0.0) {
                        continue;
                    }
                    let Ok(px) = cam.project_camera_point(&x) else { continue };
                    let Some((pi, d)) = depth_at(depth, valid, cam, &px) else { continue };
                    let sdf = d - x.z;
                    if sdf < -trunc {
                        continue;
                    }
                    let s = sdf.min(trunc) / trunc;
                    let idx = j * nx + i;
                    let wn = w[idx] + 1.0;
                    t[idx] = (t[idx] * w[idx] + s) / wn;
                    if let (Some(c), Some(img)) = (c.as_mut(), color) {
                        let rgb = img.rgb(pi);
                        c[idx] = (c[idx] * w[idx] + rgb) / wn;
                    }
                    w[idx] = wn;
                }
            }
        });
    Ok(())
}

/// Axis-aligned box enclosing every camera frustum between the camera centre
/// and `far`, intersected with `scene_box`.
pub fn frustum_bounds(cameras: &[Camera], far: f64, scene_box: (Vector3<f64>, Vector3<f64>)) -> Result<(Vector3<f64>, Vector3<f64>)> {
    if cameras.is_empty() {
        return Err(Error::NoSourceViews);
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for c in cameras {
        let (w, h) = (c.width() as f64 - 1.0, c.height() as f64 - 1.0);
        let mut pts = vec![*c.pose.center()];
        for (u, v) in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)] {
            pts.push(c.pose.camera_to_world(&(c.intrinsics.ray(u, v) * far)));
        }
        for p in pts {
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
    }
    let lo = lo.sup(&scene_box.0);
    let hi = hi.inf(&scene_box.1);
    if (0..3).any(|k| !(hi[k] > lo[k])) {
        return Err(Error::EmptyVolume);
    }
    Ok((lo, hi))
}

/// Box centred on the cameras' common target, as wide as their mean distance to it.
pub fn object_bounds(cameras: &[Camera]) -> (Vector3<f64>, Vector3<f64>) {
    let c = look_at_center(cameras);
    let d = cameras.iter().map(|cam| (cam.pose.center() - c).norm()).sum::<f64>() / cameras.len().max(1) as f64;
    let h = Vector3::repeat(0.5 * d.max(1e-6));
    (c - h, c + h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub voxel: f64,
    pub truncation: f64,
    pub bounds: (Vector3<f64>, Vector3<f64>),
    pub color: bool,
}

/// Renders depth (and colour) of `cloud` from every camera and fuses it.
pub fn fuse_cloud(cloud: &GaussianCloud, cameras: &[Camera], settings: &RenderSettings, p: &FusionParams) -> Result<TsdfVolume> {
    let mut vol = TsdfVolume::from_bounds(p.bounds.0, p.bounds.1, p.voxel, p.truncation)?;
    if p.color {
        vol = vol.with_color();
    }
    for cam in cameras {
        let buf = render(cloud, cam, settings)?;
        let img = if p.color { Some(Image::from_rgb(buf.width, buf.height, &buf.color)?) } else { None };
        integrate_depth(&mut vol, &buf.depth, &buf.depth_valid, cam, img.as_ref())?;
    }
    Ok(vol)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    pub colors: Option<Vec<Vector3<f64>>>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl TriangleMesh {
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Per-vertex normals from area-weighted face normals.
    pub fn compute_normals(&mut self) {
        let mut n = vec![Vector3::zeros(); self.vertices.len()];
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| self.vertices[i as usize]);
            let f = (b - a).cross(&(c - a));
            for i in t {
                n[*i as usize] += f;
            }
        }
        self.normals = Some(n.into_iter().map(|v| v.try_normalize(1e-300).unwrap_or_else(Vector3::zeros)).collect());
    }
}

// Corner c sits at (c & 1, (c >> 1) & 1, (c >> 2) & 1).
const EDGES: [(usize, usize); 12] =
    [(0, 1), (2, 3), (4, 5), (6, 7), (0, 2), (1, 3), (4, 6), (5, 7), (0, 4), (1, 5), (2, 6), (3, 7)];

fn corner(c: usize) -> Vector3<f64> {
    Vector3::new((c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64)
}

fn edge_of(a: usize, b: usize) -> usize {
    EDGES.iter().position(|&(p, q)| (p, q) == (a, b) || (p, q) == (b, a)).expect("cube edge")
}

/// The six faces as corner cycles plus outward normals.
fn faces() -> Vec<([usize; 4], Vector3<f64>)> {
    let mut out = Vec::new();
    for axis in 0..3 {
        for side in 0..2 {
            let bit = 1 << axis;
            let mut corners: Vec<usize> = (0..8).filter(|c| (c & bit != 0) == (side == 1)).collect();
            let mut normal = Vector3::zeros();
            normal[axis] = if side == 1 { 1.0 } else { -1.0 };
            let centre = corners.iter().map(|c| corner(*c)).sum::<Vector3<f64>>() / 4.0;
            // Order the corners counter-clockwise seen from outside.
            let (u, v) = {
                let u = corner(corners[0]) - centre;
                (u, normal.cross(&u))
            };
            corners.sort_by(|a, b| {
                let (pa, pb) = (corner(*a) - centre, corner(*b) - centre);
                pa.dot(&v).atan2(pa.dot(&u)).total_cmp(&pb.dot(&v).atan2(pb.dot(&u)))
            });
            out.push(([corners[0], corners[1], corners[2], corners[3]], normal));
        }
    }
    out
}

/// Triangles (as edge triples) for one inside/outside corner configuration.
/// Bit c of `case` is set when corner c lies below the iso level. Faces with
/// four crossings keep the above-iso corners separated, a choice that depends
/// on the face alone and so agrees between neighbouring cells. Triangles face
/// the above-iso side.
fn triangulate_case(case: usize) -> Vec<[u8; 3]> {
    let inside = |c: usize| case >> c & 1 == 1;
    let mid = |e: usize| (corner(EDGES[e].0) + corner(EDGES[e].1)) * 0.5;
    let mut next = [usize::MAX; 12];
    for (cyc, f) in faces() {
        let crossing: Vec<usize> = (0..4).filter(|k| inside(cyc[*k]) != inside(cyc[(k + 1) % 4])).collect();
        // Each segment joins two crossing edges; `toward` points at its outside part.
        let mut segments: Vec<(usize, usize, Vector3<f64>)> = Vec::new();
        match crossing.len() {
            0 => {}
            2 => {
                let (a, b) = (crossing[0], crossing[1]);
                let (ea, eb) = (edge_of(cyc[a], cyc[(a + 1) % 4]), edge_of(cyc[b], cyc[(b + 1) % 4]));
                let (mut pos, mut neg) = (Vector3::zeros(), Vector3::zeros());
                let (mut np, mut nn) = (0.0, 0.0);
                for c in cyc {
                    if inside(c) {
                        neg += corner(c);
                        nn += 1.0;
                    } else {
                        pos += corner(c);
                        np += 1.0;
                    }
                }
                segments.push((ea, eb, pos / np - neg / nn));
            }
            _ => {
                for k in 0..4 {
                    let c = cyc[k];
                    if inside(c) {
                        continue;
                    }
                    let prev = cyc[(k + 3) % 4];
                    let nxt = cyc[(k + 1) % 4];
                    let (ea, eb) = (edge_of(prev, c), edge_of(c, nxt));
                    let m = (mid(ea) + mid(eb)) * 0.5;
                    segments.push((ea, eb, corner(c) - m));
                }
            }
        }
        for (ea, eb, toward) in segments {
            let t = toward.cross(&f);
            let (from, to) = if (mid(eb) - mid(ea)).dot(&t) > 0.0 { (ea, eb) } else { (eb, ea) };
            next[from] = to;
        }
    }
    let mut seen = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if next[start] == usize::MAX || seen[start] {
            continue;
        }
        let mut lp = Vec::new();
        let mut e = start;
        while !seen[e] {
            seen[e] = true;
            lp.push(e);
            e = next[e];
        }
        for i in 1..lp.len() - 1 {
            tris.push([lp[0] as u8, lp[i] as u8, lp[i + 1] as u8]);
        }
    }
    tris
}

/// The 256-case triangle table, built once from the face rule above.
pub fn case_table() -> &'static [Vec<[u8; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(triangulate_case).collect())
}

/// Extracts the `iso` level set. Only cells whose eight corners all carry
/// weight are polygonised; vertices on shared edges are merged.
pub fn marching_cubes(vol: &TsdfVolume, iso: f64) -> Result<TriangleMesh> {
    let observed = vol.weight.iter().filter(|w| **w > 0.0).count();
    if observed < 8 || vol.dims.iter().any(|d| *d < 2) {
        return Err(Error::EmptyVolume);
    }
    let table = case_table();
    let [nx, ny, nz] = vol.dims;
    // Global edge key: voxel index × 3 + axis of the edge leaving it.
    let offsets: [(usize, usize, usize); 8] = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0), (0, 0, 1), (1, 0, 1), (0, 1, 1), (1, 1, 1)];
    let edge_key = |i: usize, j: usize, k: usize, e: usize| {
        let (a, b) = EDGES[e];
        let (oa, ob) = (offsets[a], offsets[b]);
        let base = (oa.0.min(ob.0), oa.1.min(ob.1), oa.2.min(ob.2));
        let axis = if oa.0 != ob.0 { 0 } else if oa.1 != ob.1 { 1 } else { 2 };
        (vol.index(i + base.0, j + base.1, k + base.2) * 3 + axis) as u64
    };
    let slabs: Vec<Vec<[u64; 3]>> = (0..nz - 1)
        .into_par_iter()
        .map(|k| {
            let mut out = Vec::new();
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    let idx = offsets.map(|(a, b, c)| vol.index(i + a, j + b, k + c));
                    if idx.iter().any(|v| !(vol.weight[*v] > 0.0)) {
                        continue;
                    }
                    let case = (0..8).fold(0, |acc, c| acc | ((vol.tsdf[idx[c]] < iso) as usize) << c);
                    for t in &table[case] {
                        out.push(t.map(|e| edge_key(i, j, k, e as usize)));
                    }
                }
            }
            out
        })
        .collect();

    let mut mesh = TriangleMesh::default();
    let mut colors = vol.color.as_ref().map(|_| Vec::new());
    let mut ids: HashMap<u64, u32> = HashMap::new();
    let mut vertex = |key: u64, mesh: &mut TriangleMesh, colors: &mut Option<Vec<Vector3<f64>>>| -> u32 {
        *ids.entry(key).or_insert_with(|| {
            if key & CORNER_KEY != 0 {
                let v = (key & !CORNER_KEY) as usize;
                let (i, j, k) = (v % nx, (v / nx) % ny, v / (nx * ny));
                mesh.vertices.push(vol.position(i, j, k));
                if let (Some(out), Some(c)) = (colors.as_mut(), vol.color.as_ref()) {
                    out.push(c[v]);
                }
                return (mesh.vertices.len() - 1) as u32;
            }
            let (v, axis) = ((key / 3) as usize, (key % 3) as usize);
            let (i, j, k) = (v % nx, (v / nx) % ny, v / (nx * ny));
            let w = match axis {
                0 => vol.index(i + 1, j, k),
                1 => vol.index(i, j + 1, k),
                _ => vol.index(i, j, k + 1),
            };
            let (a, b) = (vol.tsdf[v], vol.tsdf[w]);
            let t = if (b - a).abs() > 1e-300 { ((iso - a) / (b - a)).clamp(0.0, 1.0) } else { 0.5 };
            let mut p = vol.position(i, j, k);
            p[axis] += t * vol.voxel;
            mesh.vertices.push(p);
            if let (Some(out), Some(c)) = (colors.as_mut(), vol.color.as_ref()) {
                out.push(c[v] * (1.0 - t) + c[w] * t);
            }
            (mesh.vertices.len() - 1) as u32
        })
    };
    // Crossings within SNAP of a grid point collapse onto it, so the slivers
    // they would form disappear without opening the surface.
    const SNAP: f64 = 1e-6;
    let snap = |key: u64| -> u64 {
        let (v, axis) = ((key / 3) as usize, (key % 3) as usize);
        let (i, j, k) = (v % nx, (v / nx) % ny, v / (nx * ny));
        let w = match axis {
            0 => vol.index(i + 1, j, k),
            1 => vol.index(i, j + 1, k),
            _ => vol.index(i, j, k + 1),
        };
        let (a, b) = (vol.tsdf[v], vol.tsdf[w]);
        let t = (iso - a) / (b - a);
        if t < SNAP {
            CORNER_KEY | v as u64
        } else if t > 1.0 - SNAP {
            CORNER_KEY | w as u64
        } else {
            key
        }
    };
    for slab in slabs {
        for tri in slab {
            let t = tri.map(|key| vertex(snap(key), &mut mesh, &mut colors));
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                continue;
            }
            let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
            if 0.5 * (b - a).cross(&(c - a)).norm() > 1e-12 {
                mesh.triangles.push(t);
            }
        }
    }
    mesh.colors = colors;
    Ok(mesh)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Ply,
    Obj,
}

impl std::str::FromStr for MeshFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ply" => Ok(MeshFormat::Ply),
            "obj" => Ok(MeshFormat::Obj),
            _ => Err(Error::UnsupportedFormat(format!("mesh format `{s}`"))),
        }
    }
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        path.extension().and_then(|e| e.to_str()).unwrap_or("").parse()
    }
}

pub fn write_mesh(mesh: &TriangleMesh, path: &Path, format: MeshFormat) -> Result<()> {
    let ply = PlyData { vertices: mesh.vertices.clone(), colors: mesh.colors.clone(), faces: mesh.triangles.clone() };
    match format {
        MeshFormat::Ply => write_ply(path, &ply),
        MeshFormat::Obj => write_obj(path, &ply),
    }
}

pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    let ply = match MeshFormat::from_path(path)? {
        MeshFormat::Ply => read_ply(path)?,
        MeshFormat::Obj => read_obj(path)?,
    };
    Ok(TriangleMesh { vertices: ply.vertices, triangles: ply.faces, colors: ply.colors, normals: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, CameraPose};
    use crate::scenes::{scene_cameras, SceneKind, Surface};
    use nalgebra::Matrix3;
    use std::collections::HashMap;

    fn sphere_volume(voxel: f64) -> TsdfVolume {
        let mut v = TsdfVolume::from_bounds(Vector3::repeat(-1.2), Vector3::repeat(1.2), voxel, 4.0 * voxel).unwrap();
        v.fill_sdf(|p| p.norm() - 1.0);
        v
    }

    fn edge_uses(mesh: &TriangleMesh) -> HashMap<(u32, u32), i32> {
        let mut m = HashMap::new();
        for t in &mesh.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *m.entry((a.min(b), a.max(b))).or_insert(0) += if a < b { 1 } else { -1 };
            }
        }
        m
    }

    #[test]
    fn table_covers_all_cases_consistently() {
        let t = case_table();
        assert!(t[0].is_empty() && t[255].is_empty());
        assert_eq!(t[1].len(), 1);
        for case in 1..255 {
            assert!(!t[case].is_empty(), "case {case}");
            assert!(t[case].len() <= 5 + 2, "case {case}");
        }
    }

    #[test]
    fn sphere_sdf_mesh_is_accurate_closed_and_outward() {
        let vol = sphere_volume(0.02);
        let mesh = marching_cubes(&vol, 0.0).unwrap();
        assert!(mesh.triangles.len() > 10_000);
        for v in &mesh.vertices {
            assert!((v.norm() - 1.0).abs() < 0.02);
        }
        for t in &mesh.triangles {
            let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
            assert!((b - a).cross(&(c - a)).dot(&(a + b + c)) > 0.0);
        }
        // Closed and consistently oriented: every edge used once each way.
        let uses = edge_uses(&mesh);
        let open = uses.values().filter(|v| **v != 0).count();
        assert_eq!(open, 0);
        let area = mesh.surface_area();
        assert!((area - 4.0 * std::f64::consts::PI).abs() < 0.05, "{area}");
    }

    #[test]
    fn plane_sdf_gives_planar_mesh() {
        let mut v = TsdfVolume::from_bounds(Vector3::repeat(-0.5), Vector3::repeat(0.5), 0.05, 0.2).unwrap();
        v.fill_sdf(|p| p.z - 0.013);
        let mesh = marching_cubes(&v, 0.0).unwrap();
        assert!(!mesh.triangles.is_empty());
        for p in &mesh.vertices {
            assert!((p.z - 0.013).abs() < 0.025);
        }
    }

    #[test]
    fn all_positive_volume_gives_empty_mesh() {
        let mut v = TsdfVolume::from_bounds(Vector3::repeat(-0.5), Vector3::repeat(0.5), 0.1, 0.2).unwrap();
        v.fill_sdf(|_| 1.0);
        assert!(marching_cubes(&v, 0.0).unwrap().triangles.is_empty());
        let empty = TsdfVolume::from_bounds(Vector3::repeat(-0.5), Vector3::repeat(0.5), 0.1, 0.2).unwrap();
        assert!(matches!(marching_cubes(&empty, 0.0), Err(Error::EmptyVolume)));
    }

    #[test]
    fn random_fields_give_watertight_meshes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut v = TsdfVolume::new(Vector3::zeros(), 1.0, [7, 6, 5], 2.0).unwrap();
            for (k, t) in v.tsdf.iter_mut().enumerate() {
                let [nx, ny, nz] = [7, 6, 5];
                let (i, j, kk) = (k % nx, (k / nx) % ny, k / (nx * ny));
                // Boundary voxels outside so the surface closes inside the grid.
                let border = i == 0 || j == 0 || kk == 0 || i == nx - 1 || j == ny - 1 || kk == nz - 1;
                *t = if border { 1.0 } else { rng.random_range(-1.0..1.0) };
            }
            v.weight.iter_mut().for_each(|w| *w = 1.0);
            let mesh = marching_cubes(&v, 0.0).unwrap();
            let uses = edge_uses(&mesh);
            assert!(uses.values().all(|u| *u == 0));
        }
    }

    fn frontal_camera() -> Camera {
        let k = CameraIntrinsics::new(50.0, 50.0, 31.5, 31.5, 64, 64).unwrap();
        Camera::new(0, k, CameraPose::new(Matrix3::identity(), Vector3::zeros()).unwrap())
    }

    #[test]
    fn integrate_plane_examples() {
        let cam = frontal_camera();
        let mut vol = TsdfVolume::from_bounds(Vector3::new(-0.5, -0.5, 4.5), Vector3::new(0.5, 0.5, 5.5), 0.1, 0.3).unwrap();
        let before = vol.clone();
        integrate_depth(&mut vol, &vec![0.0; 64 * 64], &vec![false; 64 * 64], &cam, None).unwrap();
        assert_eq!(vol, before);

        let depth = vec![5.0; 64 * 64];
        let valid = vec![true; 64 * 64];
        integrate_depth(&mut vol, &depth, &valid, &cam, None).unwrap();
        let on_plane = vol.index(5, 5, 5);
        assert!((vol.position(5, 5, 5).z - 5.0).abs() < 1e-12);
        assert!(vol.tsdf[on_plane].abs() < 1e-12);
        assert_eq!(vol.weight[on_plane], 1.0);
        let in_front = vol.index(5, 5, 3);
        assert!((vol.tsdf[in_front] - 2.0 / 3.0).abs() < 1e-9);
        let single = vol.clone();
        integrate_depth(&mut vol, &depth, &valid, &cam, None).unwrap();
        for (a, b) in single.tsdf.iter().zip(&vol.tsdf) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn integration_is_order_invariant() {
        let surface = Surface::for_kind(SceneKind::Sphere);
        let cams = scene_cameras(&surface, 6, 48).unwrap();
        let depths: Vec<Vec<f64>> = cams.iter().map(|c| surface.depth_map(c)).collect();
        let fuse = |order: &[usize]| {
            let mut v = TsdfVolume::from_bounds(Vector3::repeat(-1.2), Vector3::repeat(1.2), 0.1, 0.3).unwrap();
            for &i in order {
                let valid: Vec<bool> = depths[i].iter().map(|z| *z > 0.0).collect();
                integrate_depth(&mut v, &depths[i], &valid, &cams[i], None).unwrap();
            }
            v
        };
        let a = fuse(&[0, 1, 2, 3, 4, 5]);
        let b = fuse(&[5, 3, 1, 0, 4, 2]);
        assert_eq!(a.weight, b.weight);
        for (x, y) in a.tsdf.iter().zip(&b.tsdf) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn volume_validation() {
        assert!(TsdfVolume::new(Vector3::zeros(), 0.0, [2, 2, 2], 1.0).is_err());
        assert!(TsdfVolume::new(Vector3::zeros(), 0.1, [2, 2, 2], 0.1).is_err());
        assert!(TsdfVolume::new(Vector3::zeros(), 0.1, [2, 0, 2], 0.3).is_err());
    }

    #[test]
    fn frustum_bounds_clip_to_scene_box() {
        let cam = frontal_camera();
        let (lo, hi) = frustum_bounds(&[cam], 10.0, (Vector3::repeat(-1.0), Vector3::repeat(1.0))).unwrap();
        assert_eq!(lo.z, 0.0);
        assert_eq!(hi, Vector3::repeat(1.0));
        assert!(lo.x < 0.0 && lo.x >= -1.0);
        assert!(frustum_bounds(&[cam], 10.0, (Vector3::repeat(-5.0), Vector3::new(5.0, 5.0, -1.0))).is_err());
    }

    #[test]
    fn mesh_io_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = marching_cubes(&sphere_volume(0.2), 0.0).unwrap();
        for (name, fmt) in [("m.ply", MeshFormat::Ply), ("m.obj", MeshFormat::Obj)] {
            let p = dir.path().join(name);
            write_mesh(&mesh, &p, fmt).unwrap();
            let back = read_mesh(&p).unwrap();
            assert_eq!(back.triangles, mesh.triangles);
            for (a, b) in mesh.vertices.iter().zip(&back.vertices) {
                assert_eq!(a.map(|v| v as f32), b.map(|v| v as f32));
            }
        }
        let p = dir.path().join("e.ply");
        write_mesh(&TriangleMesh::default(), &p, MeshFormat::Ply).unwrap();
        assert!(read_mesh(&p).unwrap().vertices.is_empty());
        assert!(matches!("stl".parse::<MeshFormat>(), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn volume_dump_has_expected_size() {
        let dir = tempfile::tempdir().unwrap();
        let v = sphere_volume(0.3);
        let p = dir.path().join("v.tsdf");
        v.save(&p).unwrap();
        let n = v.tsdf.len();
        assert_eq!(std::fs::metadata(&p).unwrap().len() as usize, 15 + 4 * 8 + 3 * 8 + 8 * n);
    }
}
