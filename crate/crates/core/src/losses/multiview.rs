//! Multi-view terms: visibility and occlusion gating, patch-based photometric
//! consistency through plane-induced homographies, and feature alignment
//! through depth reprojection.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{cosine_similarity_grad, FeatureMap};
use crate::geometry::{homography_from_ratio, relative_pose, Camera, RelativePose};
use crate::imageproc::{bilinear_sample_all, Image, NCC_MIN_VARIANCE};

use super::Signature;

/// Reprojection error (px) at or beyond which a pixel is treated as occluded.
pub const OCCLUSION_CUTOFF: f64 = 1.0;

/// Projects reference pixel `p` at depth `z` into `src`. Returns the source
/// pixel and its source-frame depth.
pub fn reproject(p: &Vector2<f64>, z: f64, reference: &Camera, src: &Camera) -> Option<(Vector2<f64>, f64)> {
    if !(z > 0.0) {
        return None;
    }
    let x_ref = reference.intrinsics.ray(p.x, p.y) * z;
    let world = reference.pose.camera_to_world(&x_ref);
    let x_src = src.pose.world_to_camera(&world);
    if !(x_src.z > 0.0) {
        return None;
    }
    let q = src.project_camera_point(&x_src).ok()?;
    Some((q, x_src.z))
}

/// `1` when the back-projected point lands strictly inside the source image
/// in front of its camera.
pub fn visibility(p: &Vector2<f64>, z: f64, reference: &Camera, src: &Camera) -> f64 {
    match reproject(p, z, reference, src) {
        Some((q, _)) if src.contains(&q) => 1.0,
        _ => 0.0,
    }
}

/// `exp(−φ)` for `φ < 1`, otherwise `0`.
pub fn occlusion_from_error(phi: f64) -> f64 {
    if phi < OCCLUSION_CUTOFF {
        (-phi).exp()
    } else {
        0.0
    }
}

/// Round-trip reprojection error: forward-project with the reference depth,
/// replace the depth with the source rendering and project back.
pub fn reprojection_error(
    p: &Vector2<f64>,
    z: f64,
    reference: &Camera,
    src: &Camera,
    src_depth: &[f64],
    src_valid: &[bool],
) -> Option<f64> {
    let (q, _) = reproject(p, z, reference, src)?;
    let w = src.width();
    let (wm, hm) = ((w - 1) as f64, (src.height() - 1) as f64);
    if !(q.x >= 0.0 && q.y >= 0.0 && q.x <= wm && q.y <= hm) {
        return None;
    }
    let x0 = (q.x.floor() as usize).min(w - 2);
    let y0 = (q.y.floor() as usize).min(src.height() - 2);
    for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
        let i = (y0 + dy) * w + x0 + dx;
        if !src_valid[i] || !(src_depth[i] > 0.0) {
            return None;
        }
    }
    let (fx, fy) = (q.x - x0 as f64, q.y - y0 as f64);
    let at = |dx: usize, dy: usize| src_depth[(y0 + dy) * w + x0 + dx];
    let zs = at(0, 0) * (1.0 - fx) * (1.0 - fy) + at(1, 0) * fx * (1.0 - fy) + at(0, 1) * (1.0 - fx) * fy + at(1, 1) * fx * fy;
    let back = reproject(&q, zs, src, reference)?;
    Some((back.0 - p).norm())
}

/// `ω ∈ [0, 1]`; zero when the source depth is unavailable.
pub fn occlusion_weight(
    p: &Vector2<f64>,
    z: f64,
    reference: &Camera,
    src: &Camera,
    src_depth: &[f64],
    src_valid: &[bool],
) -> f64 {
    reprojection_error(p, z, reference, src, src_depth, src_valid).map_or(0.0, occlusion_from_error)
}

/// Per-pixel `υ·ω` for one source view. Held fixed during differentiation.
#[derive(Debug, Clone)]
pub struct Gates {
    pub weight: Vec<f64>,
}

impl Gates {
    pub fn active(&self) -> usize {
        self.weight.iter().filter(|w| **w > 0.0).count()
    }
}

pub fn compute_gates(
    reference: &Camera,
    ref_depth: &[f64],
    ref_valid: &[bool],
    src: &Camera,
    src_depth: &[f64],
    src_valid: &[bool],
) -> Gates {
    let w = reference.width();
    let weight = (0..ref_depth.len())
        .into_par_iter()
        .map(|i| {
            if !ref_valid[i] {
                return 0.0;
            }
            let p = Vector2::new((i % w) as f64, (i / w) as f64);
            let z = ref_depth[i];
            let v = visibility(&p, z, reference, src);
            if v == 0.0 {
                return 0.0;
            }
            v * occlusion_weight(&p, z, reference, src, src_depth, src_valid)
        })
        .collect();
    Gates { weight }
}

/// One source view as seen by the multi-view terms.
#[derive(Debug, Clone, Copy)]
pub struct SourceData<'a> {
    pub camera: &'a Camera,
    pub gray: &'a Image,
    pub features: Option<&'a FeatureMap>,
    pub gates: &'a Gates,
}

#[derive(Debug, Clone, Default)]
pub struct MultiViewLoss {
    pub value: f64,
    /// Pixels contributing per source view.
    pub visible: Vec<usize>,
}

struct PixelGrad {
    index: usize,
    term: f64,
    d_normal: Vector3<f64>,
    d_distance: f64,
    bits: u64,
}

// Per-thread buffers for one k × k patch pair.
#[derive(Default)]
struct PatchScratch {
    ref_v: Vec<f64>,
    src_v: Vec<f64>,
    grad: Vec<Vector2<f64>>,
    joint: Vec<bool>,
}

/// `(value, d/dx, d/dy)` of the bilinear interpolant of channel 0, or `None`
/// outside `[0, W−1] × [0, H−1]`. Matches [`crate::imageproc::bilinear_sample`].
#[inline]
fn sample_gray(img: &Image, x: f64, y: f64) -> Option<(f64, Vector2<f64>)> {
    let (w, h) = (img.width, img.height);
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) || w < 2 || h < 2 {
        return None;
    }
    let x0 = (x as usize).min(w - 2);
    let y0 = (y as usize).min(h - 2);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let ch = img.channels;
    let i = (y0 * w + x0) * ch;
    let (v00, v10, v01, v11) = (img.data[i], img.data[i + ch], img.data[i + w * ch], img.data[i + (w + 1) * ch]);
    let v = v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy;
    let dx = (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy;
    let dy = (v01 - v00) * (1.0 - fx) + (v11 - v10) * fx;
    Some((v, Vector2::new(dx, dy)))
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x100_0000_01b3;

// Same arithmetic as `crop_patch` + `warp_patch` + `ncc_with_grad`, fused
// into one pass over reusable buffers.
#[allow(clippy::too_many_arguments)]
fn photometric_pixel(
    i: usize,
    width: usize,
    reference: &Camera,
    ref_gray: &Image,
    normal: &Vector3<f64>,
    distance: f64,
    src: &SourceData,
    rel: &RelativePose,
    k: usize,
    weight: f64,
    scr: &mut PatchScratch,
) -> Option<PixelGrad> {
    if distance.abs() <= 1e-9 {
        return None;
    }
    let (x, y) = (i % width, i / width);
    let m = normal / distance;
    let h = homography_from_ratio(reference, src.camera, rel, &m);
    let n = k * k;
    let r = (k / 2) as isize;
    scr.ref_v.resize(n, 0.0);
    scr.src_v.resize(n, 0.0);
    scr.grad.resize(n, Vector2::zeros());
    scr.joint.resize(n, false);
    let (rw, rh) = (ref_gray.width as isize, ref_gray.height as isize);
    let mut bits = FNV_OFFSET;
    let mut count = 0usize;
    for j in 0..k {
        let sy = y as isize + j as isize - r;
        for c in 0..k {
            let t = j * k + c;
            let sx = x as isize + c as isize - r;
            let ref_ok = sx >= 0 && sy >= 0 && sx < rw && sy < rh && rw >= 2 && rh >= 2;
            if ref_ok {
                scr.ref_v[t] = ref_gray.data[(sy as usize * ref_gray.width + sx as usize) * ref_gray.channels];
            }
            let q = h * Vector3::new(sx as f64, sy as f64, 1.0);
            let mut src_ok = false;
            if q.z.abs() > 1e-12 {
                let (wx, wy) = (q.x / q.z, q.y / q.z);
                if let Some((v, g)) = sample_gray(src.gray, wx, wy) {
                    scr.src_v[t] = v;
                    scr.grad[t] = g;
                    src_ok = true;
                    bits = (bits ^ ((wx as u64) << 20 ^ (wy as u64))).wrapping_mul(FNV_PRIME);
                }
            }
            if !src_ok {
                bits = (bits ^ u64::MAX).wrapping_mul(FNV_PRIME);
            }
            scr.joint[t] = ref_ok && src_ok;
            count += scr.joint[t] as usize;
        }
    }
    if 2 * count < n || count == 0 {
        return None;
    }
    let cnt = count as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    for t in 0..n {
        if scr.joint[t] {
            sa += scr.ref_v[t];
            sb += scr.src_v[t];
        }
    }
    let (ma, mb) = (sa / cnt, sb / cnt);
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for t in 0..n {
        if scr.joint[t] {
            let a = scr.ref_v[t] - ma;
            let b = scr.src_v[t] - mb;
            saa += a * a;
            sbb += b * b;
            sab += a * b;
        }
    }
    let flat = saa / cnt < NCC_MIN_VARIANCE || sbb / cnt < NCC_MIN_VARIANCE;
    let value = if flat { 0.0 } else { (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0) };
    let term = weight * (1.0 - value);
    // dL/dH accumulated over samples.
    let mut g_h = Matrix3::zeros();
    if !flat {
        let den = (saa * sbb).sqrt();
        for t in 0..n {
            if !scr.joint[t] {
                continue;
            }
            let gv = (scr.ref_v[t] - ma) / den - value * (scr.src_v[t] - mb) / sbb;
            if gv == 0.0 {
                continue;
            }
            let d_val = -weight * gv;
            let q = Vector3::new((x as isize + (t % k) as isize - r) as f64, (y as isize + (t / k) as isize - r) as f64, 1.0);
            let wv = h * q;
            let inv = 1.0 / wv.z;
            let jac = Matrix2x3::new(inv, 0.0, -wv.x * inv * inv, 0.0, inv, -wv.y * inv * inv);
            let d_w = jac.transpose() * (scr.grad[t] * d_val);
            g_h += d_w * q.transpose();
        }
    }
    // H = K_s (R + T mᵀ) K_r⁻¹, so dL/dm = K_r⁻¹ dL/dHᵀ K_s T.
    let a = src.camera.intrinsics.matrix() * rel.translation;
    let d_m = reference.intrinsics.inverse_matrix() * (g_h.transpose() * a);
    Some(PixelGrad {
        index: i,
        term,
        d_normal: d_m / distance,
        d_distance: -d_m.dot(normal) / (distance * distance),
        bits: bits ^ (value == 0.0) as u64,
    })
}

/// `Σ_s (1/V_s) Σ_p υω (1 − NCC)` with patches warped through the plane of
/// each pixel. Gradients reach the blended normal and distance maps.
#[allow(clippy::too_many_arguments)]
pub fn loss_photometric(
    reference: &Camera,
    ref_gray: &Image,
    normal: &[Vector3<f64>],
    distance: &[f64],
    sources: &[SourceData],
    k: usize,
    scale: f64,
    grad_normal: &mut [Vector3<f64>],
    grad_distance: &mut [f64],
    sig: &mut Signature,
) -> Result<MultiViewLoss> {
    if sources.is_empty() {
        return Err(Error::NoSourceViews);
    }
    let width = reference.width();
    let mut out = MultiViewLoss::default();
    for src in sources {
        let rel = relative_pose(reference, src.camera);
        let pixels: Vec<PixelGrad> = (0..normal.len())
            .into_par_iter()
            .map_init(PatchScratch::default, |scr, i| {
                let wgt = src.gates.weight[i];
                if wgt <= 0.0 {
                    return None;
                }
                photometric_pixel(i, width, reference, ref_gray, &normal[i], distance[i], src, &rel, k, wgt, scr)
            })
            .flatten()
            .collect();
        out.visible.push(pixels.len());
        sig.push(pixels.len() as u64);
        if pixels.is_empty() {
            continue;
        }
        let inv = 1.0 / pixels.len() as f64;
        for p in &pixels {
            out.value += p.term * inv;
            grad_normal[p.index] += p.d_normal * (inv * scale);
            grad_distance[p.index] += p.d_distance * inv * scale;
            sig.push(p.index as u64 ^ p.bits);
        }
    }
    Ok(out)
}

/// `(1/N) Σ_s (1/V_s) Σ_p υω |1 − cos(F_r(p), F_s(p′))|` with `p′` the
/// depth reprojection of `p`. Gradients reach the depth map.
#[allow(clippy::too_many_arguments)]
pub fn loss_feature(
    reference: &Camera,
    ref_features: &FeatureMap,
    depth: &[f64],
    sources: &[SourceData],
    scale: f64,
    grad_depth: &mut [f64],
    sig: &mut Signature,
) -> Result<MultiViewLoss> {
    if sources.is_empty() {
        return Err(Error::NoSourceViews);
    }
    let c = ref_features.channels();
    for s in sources {
        let f = s.features.ok_or(Error::NoSourceViews)?;
        if f.channels() != c {
            return Err(Error::ChannelMismatch { expected: c, found: f.channels() });
        }
    }
    let width = reference.width();
    let n_src = sources.len() as f64;
    let mut out = MultiViewLoss::default();
    for src in sources {
        let fs = src.features.expect("checked above");
        let rel = relative_pose(reference, src.camera);
        let ks = &src.camera.intrinsics;
        let (wm, hm) = ((src.camera.width() - 1) as f64, (src.camera.height() - 1) as f64);
        let pixels: Vec<(usize, f64, f64, u64)> = (0..depth.len())
            .into_par_iter()
            .filter_map(|i| {
                let wgt = src.gates.weight[i];
                if wgt <= 0.0 {
                    return None;
                }
                let r = reference.intrinsics.ray((i % width) as f64, (i / width) as f64);
                let xs = rel.apply(&(r * depth[i]));
                if !(xs.z > 0.0) {
                    return None;
                }
                let q = Vector2::new(ks.fx * xs.x / xs.z + ks.cx, ks.fy * xs.y / xs.z + ks.cy);
                if !(q.x >= 0.0 && q.y >= 0.0 && q.x <= wm && q.y <= hm) {
                    return None;
                }
                let mut val = vec![0.0; c];
                let mut grad = vec![Vector2::zeros(); c];
                bilinear_sample_all(&fs.map, q.x, q.y, &mut val, &mut grad).ok()?;
                let fr = ref_features.map.pixel(i % width, i / width);
                let (cos, d_cos) = cosine_similarity_grad(fr, &val);
                let term = wgt * (1.0 - cos).abs();
                let sgn = if 1.0 - cos >= 0.0 { -1.0 } else { 1.0 };
                let mut d_q = Vector2::zeros();
                for ch in 0..c {
                    d_q += grad[ch] * d_cos[ch];
                }
                d_q *= wgt * sgn;
                let jac = Matrix2x3::new(
                    ks.fx / xs.z,
                    0.0,
                    -ks.fx * xs.x / (xs.z * xs.z),
                    0.0,
                    ks.fy / xs.z,
                    -ks.fy * xs.y / (xs.z * xs.z),
                );
                let d_z = (jac.transpose() * d_q).dot(&(rel.rotation * r));
                let cell = ((q.x as u64) << 20) ^ (q.y as u64);
                Some((i, term, d_z, cell))
            })
            .collect();
        out.visible.push(pixels.len());
        sig.push(pixels.len() as u64);
        if pixels.is_empty() {
            continue;
        }
        let inv = 1.0 / (pixels.len() as f64 * n_src);
        for (i, term, d_z, cell) in pixels {
            out.value += term * inv;
            grad_depth[i] += d_z * inv * scale;
            sig.push(i as u64 ^ cell);
        }
    }
    Ok(out)
}
