//! Image primitives used by the losses: gradients, SSIM, bilinear sampling,
//! homography-warped patches, NCC and normals from depth.

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Camera;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const NCC_MIN_VARIANCE: f64 = 1e-8;

/// Row-major `H × W × C` image with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::from_vec(width, height, channels, vec![0.0; width * height * channels])
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::ShapeMismatch(format!("empty image {width}x{height}x{channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn from_rgb(width: usize, height: usize, rgb: &[Vector3<f64>]) -> Result<Self> {
        Self::from_vec(width, height, 3, rgb.iter().flat_map(|v| [v.x, v.y, v.z]).collect())
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::from_vec(width, height, channels, data)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn rgb(&self, i: usize) -> Vector3<f64> {
        let p = &self.data[i * self.channels..];
        if self.channels >= 3 {
            Vector3::new(p[0], p[1], p[2])
        } else {
            Vector3::repeat(p[0])
        }
    }

    pub fn same_shape(&self, o: &Image) -> bool {
        self.width == o.width && self.height == o.height && self.channels == o.channels
    }

    /// Single-channel luminance (a copy for grayscale input).
    pub fn luminance(&self) -> Image {
        let data = if self.channels >= 3 {
            self.data
                .chunks(self.channels)
                .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
                .collect()
        } else {
            self.data.iter().step_by(self.channels).copied().collect()
        };
        Image { width: self.width, height: self.height, channels: 1, data }
    }

    /// Extracts channel `c` as a single-channel image.
    pub fn channel(&self, c: usize) -> Image {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Image { width: self.width, height: self.height, channels: 1, data }
    }
}

/// Scatters a luminance gradient back onto the channels of `like`.
pub fn luminance_backward(like: &Image, g: &[f64]) -> Vec<f64> {
    if like.channels >= 3 {
        let mut out = vec![0.0; like.data.len()];
        for (i, gv) in g.iter().enumerate() {
            for c in 0..3 {
                out[i * like.channels + c] = LUMA[c] * gv;
            }
        }
        out
    } else {
        g.to_vec()
    }
}

// One-dimensional difference stencil: returns (lo, hi, scale) so that the
// derivative at i is (v[hi] − v[lo]) * scale.
#[inline]
fn stencil(i: usize, n: usize) -> (usize, usize, f64) {
    if n < 2 {
        (i, i, 0.0)
    } else if i == 0 {
        (0, 1, 1.0)
    } else if i == n - 1 {
        (n - 2, n - 1, 1.0)
    } else {
        (i - 1, i + 1, 0.5)
    }
}

/// Unnormalised gradient magnitude of a single-channel map plus its
/// x/y components.
fn raw_gradient(v: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut mag = vec![0.0; w * h];
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (l, r, sx) = stencil(x, w);
            let (u, d, sy) = stencil(y, h);
            gx[i] = (v[y * w + r] - v[y * w + l]) * sx;
            gy[i] = (v[d * w + x] - v[u * w + x]) * sy;
            mag[i] = (gx[i] * gx[i] + gy[i] * gy[i]).sqrt();
        }
    }
    (mag, gx, gy)
}

/// Normalised gradient magnitude with what the backward pass needs.
#[derive(Debug, Clone)]
pub struct GradientMap {
    pub width: usize,
    pub height: usize,
    /// Values in `[0, 1]`.
    pub values: Vec<f64>,
    raw: Vec<f64>,
    gx: Vec<f64>,
    gy: Vec<f64>,
    max: f64,
    argmax: usize,
}

impl GradientMap {
    pub fn new(img: &Image) -> Self {
        let lum = img.luminance();
        let (w, h) = (img.width, img.height);
        let (raw, gx, gy) = raw_gradient(&lum.data, w, h);
        let (mut argmax, mut max) = (0, 0.0);
        for (i, v) in raw.iter().enumerate() {
            if *v > max {
                max = *v;
                argmax = i;
            }
        }
        let values = if max > 0.0 { raw.iter().map(|v| v / max).collect() } else { vec![0.0; w * h] };
        Self { width: w, height: h, values, raw, gx, gy, max, argmax }
    }

    /// Pixel holding the normalising maximum.
    pub fn argmax(&self) -> usize {
        self.argmax
    }

    /// Gradient with respect to the source image given `dL/dvalues`.
    pub fn backward(&self, img: &Image, g: &[f64]) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let mut d_lum = vec![0.0; w * h];
        if self.max > 0.0 {
            let mut d_raw: Vec<f64> = g.iter().map(|v| v / self.max).collect();
            let d_max: f64 = -g.iter().zip(&self.raw).map(|(a, r)| a * r).sum::<f64>() / (self.max * self.max);
            d_raw[self.argmax] += d_max;
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if self.raw[i] == 0.0 || d_raw[i] == 0.0 {
                        continue;
                    }
                    let dgx = d_raw[i] * self.gx[i] / self.raw[i];
                    let dgy = d_raw[i] * self.gy[i] / self.raw[i];
                    let (l, r, sx) = stencil(x, w);
                    let (u, d, sy) = stencil(y, h);
                    d_lum[y * w + r] += dgx * sx;
                    d_lum[y * w + l] -= dgx * sx;
                    d_lum[d * w + x] += dgy * sy;
                    d_lum[u * w + x] -= dgy * sy;
                }
            }
        }
        luminance_backward(img, &d_lum)
    }
}

/// Gradient magnitude normalised by its global maximum.
pub fn image_gradient(img: &Image) -> Vec<f64> {
    GradientMap::new(img).values
}

pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "same" convolution with a symmetric kernel; out-of-image
/// samples are zero. Self-adjoint for symmetric kernels.
pub fn convolve_zero(v: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let mut tmp = vec![0.0; w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = x as isize + k as isize - r as isize;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * v[y * w + xx as usize];
                }
            }
            *out = s;
        }
    });
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let yy = y as isize + k as isize - r as isize;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            *o = s;
        }
    });
    out
}

/// Separable convolution with clamped borders (no darkening at the edges).
pub fn convolve_clamped(v: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() as isize / 2;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * v[y * w + clamp(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Ssim {
    /// Mean over pixels and channels.
    pub mean: f64,
    /// Per-pixel SSIM averaged over channels.
    pub map: Vec<f64>,
    // Per channel: filtered statistics needed by the backward pass.
    stats: Vec<SsimStats>,
}

#[derive(Debug, Clone)]
struct SsimStats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
    cov: Vec<f64>,
}

fn ssim_kernel() -> Vec<f64> {
    gaussian_kernel(1.5, 5)
}

#[inline]
fn ssim_pixel(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    let a1 = 2.0 * mu_a * mu_b + SSIM_C1;
    let a2 = 2.0 * cov + SSIM_C2;
    let b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1;
    let b2 = var_a + var_b + SSIM_C2;
    a1 * a2 / (b1 * b2)
}

/// Structural similarity with an 11×11 Gaussian window (σ = 1.5), zero
/// padding and unit dynamic range.
pub fn ssim(a: &Image, b: &Image) -> Result<Ssim> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch("ssim operands differ in shape".into()));
    }
    let (w, h, ch) = (a.width, a.height, a.channels);
    let kernel = ssim_kernel();
    let mut map = vec![0.0; w * h];
    let mut stats = Vec::with_capacity(ch);
    for c in 0..ch {
        let av = a.channel(c).data;
        let bv = b.channel(c).data;
        let mu_a = convolve_zero(&av, w, h, &kernel);
        let mu_b = convolve_zero(&bv, w, h, &kernel);
        let aa: Vec<f64> = av.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = bv.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = av.iter().zip(&bv).map(|(x, y)| x * y).collect();
        let e_aa = convolve_zero(&aa, w, h, &kernel);
        let e_bb = convolve_zero(&bb, w, h, &kernel);
        let e_ab = convolve_zero(&ab, w, h, &kernel);
        let n = w * h;
        let mut st = SsimStats {
            var_a: vec![0.0; n],
            var_b: vec![0.0; n],
            cov: vec![0.0; n],
            mu_a,
            mu_b,
        };
        for i in 0..n {
            st.var_a[i] = e_aa[i] - st.mu_a[i] * st.mu_a[i];
            st.var_b[i] = e_bb[i] - st.mu_b[i] * st.mu_b[i];
            st.cov[i] = e_ab[i] - st.mu_a[i] * st.mu_b[i];
            map[i] += ssim_pixel(st.mu_a[i], st.mu_b[i], st.var_a[i], st.var_b[i], st.cov[i]) / ch as f64;
        }
        stats.push(st);
    }
    let mean = map.iter().sum::<f64>() / map.len() as f64;
    Ok(Ssim { mean, map, stats })
}

impl Ssim {
    /// Gradient of `scale · mean` with respect to `a`.
    pub fn backward_mean(&self, a: &Image, b: &Image, scale: f64) -> Vec<f64> {
        let (w, h, ch) = (a.width, a.height, a.channels);
        let n = w * h;
        let kernel = ssim_kernel();
        let g = scale / (n * ch) as f64;
        let mut out = vec![0.0; a.data.len()];
        for (c, st) in self.stats.iter().enumerate() {
            let mut g_mu = vec![0.0; n];
            let mut g_aa = vec![0.0; n];
            let mut g_ab = vec![0.0; n];
            for i in 0..n {
                let (ma, mb) = (st.mu_a[i], st.mu_b[i]);
                let a1 = 2.0 * ma * mb + SSIM_C1;
                let a2 = 2.0 * st.cov[i] + SSIM_C2;
                let b1 = ma * ma + mb * mb + SSIM_C1;
                let b2 = st.var_a[i] + st.var_b[i] + SSIM_C2;
                let s = a1 * a2 / (b1 * b2);
                let den = b1 * b2;
                g_mu[i] = g * (2.0 * mb * a2 / den - 2.0 * mb * a1 / den - 2.0 * ma * s / b1 + 2.0 * ma * s / b2);
                g_aa[i] = g * (-s / b2);
                g_ab[i] = g * (2.0 * a1 / den);
            }
            let g_mu = convolve_zero(&g_mu, w, h, &kernel);
            let g_aa = convolve_zero(&g_aa, w, h, &kernel);
            let g_ab = convolve_zero(&g_ab, w, h, &kernel);
            for i in 0..n {
                let av = a.data[i * ch + c];
                let bv = b.data[i * ch + c];
                out[i * ch + c] = g_mu[i] + 2.0 * av * g_aa[i] + bv * g_ab[i];
            }
        }
        out
    }
}

/// Bilinear sample of channel `c` at `(x, y)` with the exact derivative of
/// the interpolant. Valid for `x ∈ [0, W−1]`, `y ∈ [0, H−1]`.
#[inline]
pub fn bilinear_sample(img: &Image, c: usize, x: f64, y: f64) -> Result<(f64, Vector2<f64>)> {
    let (x0, y0, fx, fy) = bilinear_cell(img.width, img.height, x, y)?;
    let ch = img.channels;
    let at = |xx: usize, yy: usize| img.data[(yy * img.width + xx) * ch + c];
    let (v00, v10, v01, v11) = (at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1));
    let v = v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy;
    let dx = (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy;
    let dy = (v01 - v00) * (1.0 - fx) + (v11 - v10) * fx;
    Ok((v, Vector2::new(dx, dy)))
}

/// Samples every channel at once into `out` (and derivatives into `grad`).
pub fn bilinear_sample_all(img: &Image, x: f64, y: f64, out: &mut [f64], grad: &mut [Vector2<f64>]) -> Result<()> {
    let (x0, y0, fx, fy) = bilinear_cell(img.width, img.height, x, y)?;
    let ch = img.channels;
    let base = |xx: usize, yy: usize| (yy * img.width + xx) * ch;
    let (i00, i10, i01, i11) = (base(x0, y0), base(x0 + 1, y0), base(x0, y0 + 1), base(x0 + 1, y0 + 1));
    for c in 0..ch {
        let (v00, v10, v01, v11) = (img.data[i00 + c], img.data[i10 + c], img.data[i01 + c], img.data[i11 + c]);
        out[c] = v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy;
        grad[c] = Vector2::new((v10 - v00) * (1.0 - fy) + (v11 - v01) * fy, (v01 - v00) * (1.0 - fx) + (v11 - v10) * fx);
    }
    Ok(())
}

// Base cell and fractions; the last row/column reuse the preceding cell.
#[inline]
fn bilinear_cell(w: usize, h: usize, x: f64, y: f64) -> Result<(usize, usize, f64, f64)> {
    let (wm, hm) = ((w - 1) as f64, (h - 1) as f64);
    if !(x >= 0.0 && y >= 0.0 && x <= wm && y <= hm) || w < 2 || h < 2 {
        return Err(Error::OutOfBounds { x, y });
    }
    // Truncation is floor here since both coordinates are non-negative.
    let x0 = (x as usize).min(w - 2);
    let y0 = (y as usize).min(h - 2);
    Ok((x0, y0, x - x0 as f64, y - y0 as f64))
}

/// One warped patch sample.
#[derive(Debug, Clone, Copy, Default)]
pub struct PatchSample {
    pub value: f64,
    pub valid: bool,
    /// Reference-grid pixel the sample came from.
    pub source: Vector2<f64>,
    /// Warped position in the sampled image.
    pub warped: Vector2<f64>,
    /// Derivative of `value` with respect to `warped`.
    pub grad: Vector2<f64>,
}

#[derive(Debug, Clone)]
pub struct Patch {
    pub k: usize,
    pub samples: Vec<PatchSample>,
}

impl Patch {
    pub fn valid_count(&self) -> usize {
        self.samples.iter().filter(|s| s.valid).count()
    }

    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.value).collect()
    }

    pub fn from_values(k: usize, values: &[f64]) -> Patch {
        let samples = values.iter().map(|&value| PatchSample { value, valid: true, ..Default::default() }).collect();
        Patch { k, samples }
    }
}

/// Maps the `k × k` reference grid around `center` through `h` and samples
/// the single-channel `img` bilinearly. Samples falling outside the image
/// (or at infinity) are invalid.
pub fn warp_patch(img: &Image, h: &Matrix3<f64>, center: &Vector2<f64>, k: usize) -> Patch {
    let r = (k / 2) as f64;
    let mut samples = Vec::with_capacity(k * k);
    for j in 0..k {
        for i in 0..k {
            let source = Vector2::new(center.x + i as f64 - r, center.y + j as f64 - r);
            let mut s = PatchSample { source, ..Default::default() };
            let q = h * Vector3::new(source.x, source.y, 1.0);
            if q.z.abs() > 1e-12 {
                s.warped = Vector2::new(q.x / q.z, q.y / q.z);
                if let Ok((v, g)) = bilinear_sample(img, 0, s.warped.x, s.warped.y) {
                    s.value = v;
                    s.grad = g;
                    s.valid = true;
                }
            }
            samples.push(s);
        }
    }
    Patch { k, samples }
}

/// Crops the `k × k` patch of `img` (channel 0) centred at an integer pixel.
pub fn crop_patch(img: &Image, cx: usize, cy: usize, k: usize) -> Patch {
    warp_patch(img, &Matrix3::identity(), &Vector2::new(cx as f64, cy as f64), k)
}

/// NCC over jointly valid samples together with what the backward pass needs.
#[derive(Debug, Clone)]
pub struct NccResult {
    pub value: f64,
    /// `dNCC/d ps` per sample (zero for invalid samples or flat patches).
    pub grad_source: Vec<f64>,
}

/// Normalised cross-correlation. `None` when fewer than half of the samples
/// are jointly valid; `0` when either patch is flat.
pub fn ncc(pr: &Patch, ps: &Patch) -> Option<f64> {
    ncc_with_grad(pr, ps).map(|r| r.value)
}

pub fn ncc_with_grad(pr: &Patch, ps: &Patch) -> Option<NccResult> {
    let n = pr.samples.len().min(ps.samples.len());
    let joint: Vec<usize> = (0..n).filter(|&i| pr.samples[i].valid && ps.samples[i].valid).collect();
    if 2 * joint.len() < pr.k * pr.k || joint.is_empty() {
        return None;
    }
    let m = joint.len() as f64;
    let ma = joint.iter().map(|&i| pr.samples[i].value).sum::<f64>() / m;
    let mb = joint.iter().map(|&i| ps.samples[i].value).sum::<f64>() / m;
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for &i in &joint {
        let a = pr.samples[i].value - ma;
        let b = ps.samples[i].value - mb;
        saa += a * a;
        sbb += b * b;
        sab += a * b;
    }
    let mut grad_source = vec![0.0; n];
    if saa / m < NCC_MIN_VARIANCE || sbb / m < NCC_MIN_VARIANCE {
        return Some(NccResult { value: 0.0, grad_source });
    }
    let den = (saa * sbb).sqrt();
    let value = (sab / den).clamp(-1.0, 1.0);
    for &i in &joint {
        let a = pr.samples[i].value - ma;
        let b = ps.samples[i].value - mb;
        grad_source[i] = a / den - value * b / sbb;
    }
    Some(NccResult { value, grad_source })
}

/// Normal from the 4-neighbourhood of a depth map, with the derivative of
/// the normal with respect to each neighbour's depth.
#[derive(Debug, Clone, Copy)]
pub struct DepthNormal {
    pub normal: Vector3<f64>,
    /// Linear indices of the left, right, up and down neighbours.
    pub neighbors: [usize; 4],
    /// `dn/dz` for each neighbour, same order.
    pub jacobian: [Vector3<f64>; 4],
}

/// Camera-frame unit normal at `(x, y)` from the cross product of the
/// backprojected horizontal and vertical neighbour differences, oriented so
/// that `z ≤ 0`.
pub fn normal_from_depth(depth: &[f64], valid: &[bool], cam: &Camera, x: usize, y: usize) -> Result<DepthNormal> {
    let (w, h) = (cam.width(), cam.height());
    if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
        return Err(Error::InvalidNeighborhood(x, y));
    }
    let nb = [y * w + x - 1, y * w + x + 1, (y - 1) * w + x, (y + 1) * w + x];
    let px = [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)];
    if nb.iter().any(|&i| !valid[i] || !(depth[i] > 0.0)) {
        return Err(Error::InvalidNeighborhood(x, y));
    }
    let rays = px.map(|(u, v)| cam.intrinsics.ray(u as f64, v as f64));
    let pts: Vec<Vector3<f64>> = (0..4).map(|k| rays[k] * depth[nb[k]]).collect();
    let a = pts[1] - pts[0];
    let b = pts[3] - pts[2];
    let c = a.cross(&b);
    let len = c.norm();
    if !(len > 1e-300) {
        return Err(Error::InvalidNeighborhood(x, y));
    }
    let mut n = c / len;
    let sign = if n.z > 0.0 { -1.0 } else { 1.0 };
    n *= sign;
    // dn/dc = sign (I − n nᵀ)/|c| ; c = a × b.
    let proj = (Matrix3::identity() - (n * n.transpose())) * (sign / len);
    let mut jacobian = [Vector3::zeros(); 4];
    for (k, ray) in rays.iter().enumerate() {
        let (da, db) = match k {
            0 => (-ray, Vector3::zeros()),
            1 => (*ray, Vector3::zeros()),
            2 => (Vector3::zeros(), -ray),
            _ => (Vector3::zeros(), *ray),
        };
        let dc = da.cross(&b) + a.cross(&db);
        jacobian[k] = proj * dc;
    }
    Ok(DepthNormal { normal: n, neighbors: nb, jacobian })
}

/// Normals for every pixel with a valid neighbourhood.
pub fn normal_map_from_depth(depth: &[f64], valid: &[bool], cam: &Camera) -> Vec<Option<DepthNormal>> {
    let (w, h) = (cam.width(), cam.height());
    (0..w * h)
        .into_par_iter()
        .map(|i| normal_from_depth(depth, valid, cam, i % w, i / w).ok())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, CameraPose};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image_det(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * c).map(|_| rng.random::<f64>()).collect();
        Image::from_vec(w, h, c, data).unwrap()
    }

    #[test]
    fn gradient_examples() {
        let flat = Image::from_fn(8, 8, 1, |_, _, _| 0.4).unwrap();
        assert!(image_gradient(&flat).iter().all(|v| *v == 0.0));

        let step = Image::from_fn(10, 6, 1, |x, _, _| if x >= 5 { 1.0 } else { 0.0 }).unwrap();
        let g = image_gradient(&step);
        for y in 0..6 {
            assert_eq!(g[y * 10 + 4], 1.0);
            assert_eq!(g[y * 10 + 5], 1.0);
            assert_eq!(g[y * 10 + 1], 0.0);
            assert_eq!(g[y * 10 + 8], 0.0);
        }

        let ramp = Image::from_fn(9, 7, 1, |x, _, _| x as f64 / 8.0).unwrap();
        assert!(image_gradient(&ramp).iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn gradient_backward_matches_fd() {
        let img = random_image_det(9, 8, 3, 2);
        let gm = GradientMap::new(&img);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let up: Vec<f64> = (0..72).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grad = gm.backward(&img, &up);
        let f = |im: &Image| image_gradient(im).iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
        for k in (0..img.data.len()).step_by(5) {
            let h = 1e-6;
            let mut p = img.clone();
            p.data[k] += h;
            let mut m = img.clone();
            m.data[k] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = random_image_det(20, 20, 3, 1);
        let s = ssim(&a, &a).unwrap();
        assert!((s.mean - 1.0).abs() < 1e-12);
        assert!(s.map.iter().all(|v| (v - 1.0).abs() < 1e-12));

        // Fine checkerboard against its inverse: equal local means and
        // perfectly anti-correlated structure.
        let a = Image::from_fn(24, 24, 1, |x, y, _| ((x + y) % 2) as f64).unwrap();
        let b = Image::from_fn(24, 24, 1, |x, y, _| 1.0 - ((x + y) % 2) as f64).unwrap();
        let s = ssim(&a, &b).unwrap();
        let centre = s.map[12 * 24 + 12];
        assert!((centre + 1.0).abs() < 1e-2, "{centre}");
        assert!(matches!(ssim(&a, &random_image_det(24, 23, 1, 0)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn ssim_gradient_matches_fd() {
        let a = random_image_det(14, 12, 3, 4);
        let b = random_image_det(14, 12, 3, 5);
        let s = ssim(&a, &b).unwrap();
        let g = s.backward_mean(&a, &b, 1.0);
        for k in (0..a.data.len()).step_by(7) {
            let h = 1e-5;
            let mut p = a.clone();
            p.data[k] += h;
            let mut m = a.clone();
            m.data[k] -= h;
            let fd = (ssim(&p, &b).unwrap().mean - ssim(&m, &b).unwrap().mean) / (2.0 * h);
            let err = (fd - g[k]).abs() / (g[k].abs() + fd.abs()).max(1e-6);
            assert!(err < 1e-3, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn bilinear_examples() {
        let img = Image::from_vec(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(bilinear_sample(&img, 0, 0.5, 0.5).unwrap().0, 0.5);
        let img = random_image_det(6, 5, 1, 3);
        let (v, d) = bilinear_sample(&img, 0, 2.0, 3.0).unwrap();
        assert_eq!(v, img.get(2, 3, 0));
        assert_eq!(d.x, img.get(3, 3, 0) - img.get(2, 3, 0));
        assert_eq!(d.y, img.get(2, 4, 0) - img.get(2, 3, 0));
        assert!(matches!(bilinear_sample(&img, 0, 5.5, 1.0), Err(Error::OutOfBounds { .. })));
        assert!(bilinear_sample(&img, 0, 5.0, 4.0).is_ok());
    }

    #[test]
    fn bilinear_derivative_matches_fd() {
        let img = random_image_det(12, 10, 1, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x: f64 = rng.random_range(0.01..10.99);
            let y: f64 = rng.random_range(0.01..8.99);
            // Stay off the cell boundaries where the derivative jumps.
            if (x - x.round()).abs() < 1e-4 || (y - y.round()).abs() < 1e-4 {
                continue;
            }
            let (_, d) = bilinear_sample(&img, 0, x, y).unwrap();
            let h = 1e-7;
            let fx = (bilinear_sample(&img, 0, x + h, y).unwrap().0 - bilinear_sample(&img, 0, x - h, y).unwrap().0) / (2.0 * h);
            let fy = (bilinear_sample(&img, 0, x, y + h).unwrap().0 - bilinear_sample(&img, 0, x, y - h).unwrap().0) / (2.0 * h);
            assert!((fx - d.x).abs() <= 1e-6 * (fx.abs() + d.x.abs()).max(1e-3));
            assert!((fy - d.y).abs() <= 1e-6 * (fy.abs() + d.y.abs()).max(1e-3));
        }
    }

    #[test]
    fn warp_patch_examples() {
        let img = random_image_det(20, 20, 1, 6);
        let p = warp_patch(&img, &Matrix3::identity(), &Vector2::new(9.0, 8.0), 7);
        for j in 0..7 {
            for i in 0..7 {
                assert_eq!(p.samples[j * 7 + i].value, img.get(6 + i, 5 + j, 0));
            }
        }
        let shift = Matrix3::new(1.0, 0.0, 2.0, 0.0, 1.0, -1.0, 0.0, 0.0, 1.0);
        let q = warp_patch(&img, &shift, &Vector2::new(9.0, 8.0), 7);
        let r = crop_patch(&img, 11, 7, 7);
        assert_eq!(q.values(), r.values());
        let edge = warp_patch(&img, &Matrix3::identity(), &Vector2::new(1.0, 1.0), 7);
        assert!(edge.valid_count() < 49);
    }

    #[test]
    fn ncc_examples() {
        let a: Vec<f64> = (0..49).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        let pa = Patch::from_values(7, &a);
        assert!((ncc(&pa, &pa).unwrap() - 1.0).abs() < 1e-12);
        let b: Vec<f64> = a.iter().map(|v| 2.0 * v + 0.1).collect();
        assert!((ncc(&pa, &Patch::from_values(7, &b)).unwrap() - 1.0).abs() < 1e-12);
        let mean = a.iter().sum::<f64>() / 49.0;
        let za: Vec<f64> = a.iter().map(|v| v - mean).collect();
        let neg: Vec<f64> = za.iter().map(|v| -v).collect();
        assert!((ncc(&Patch::from_values(7, &za), &Patch::from_values(7, &neg)).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(ncc(&pa, &Patch::from_values(7, &[0.3; 49])), Some(0.0));
        let mut sparse = pa.clone();
        for s in sparse.samples.iter_mut().take(30) {
            s.valid = false;
        }
        assert_eq!(ncc(&pa, &sparse), None);
    }

    #[test]
    fn ncc_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a: Vec<f64> = (0..49).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..49).map(|_| rng.random::<f64>()).collect();
        let pa = Patch::from_values(7, &a);
        let r = ncc_with_grad(&pa, &Patch::from_values(7, &b)).unwrap();
        for k in 0..49 {
            let h = 1e-6;
            let mut p = b.clone();
            p[k] += h;
            let mut m = b.clone();
            m[k] -= h;
            let fd = (ncc(&pa, &Patch::from_values(7, &p)).unwrap() - ncc(&pa, &Patch::from_values(7, &m)).unwrap()) / (2.0 * h);
            assert!((fd - r.grad_source[k]).abs() < 1e-8);
        }
    }

    fn cam() -> Camera {
        Camera::new(0, CameraIntrinsics::new(50.0, 55.0, 15.5, 14.5, 32, 30).unwrap(), CameraPose::identity())
    }

    fn plane_depth(cam: &Camera, n: &Vector3<f64>, d: f64) -> Vec<f64> {
        (0..cam.width() * cam.height())
            .map(|i| d / n.dot(&cam.intrinsics.ray((i % cam.width()) as f64, (i / cam.width()) as f64)))
            .collect()
    }

    #[test]
    fn normal_from_depth_examples() {
        let c = cam();
        let valid = vec![true; 32 * 30];
        let flat = vec![3.0; 32 * 30];
        let n = normal_from_depth(&flat, &valid, &c, 10, 10).unwrap();
        assert!((n.normal - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert!(matches!(normal_from_depth(&flat, &valid, &c, 0, 5), Err(Error::InvalidNeighborhood(0, 5))));
        let mut holes = valid.clone();
        holes[10 * 32 + 11] = false;
        assert!(normal_from_depth(&flat, &holes, &c, 10, 10).is_err());

        let t = 15f64.to_radians();
        let nt = Vector3::new(t.sin(), 0.0, -t.cos());
        let depth = plane_depth(&c, &nt, -3.0 * t.cos());
        let got = normal_from_depth(&depth, &valid, &c, 16, 12).unwrap();
        assert!((got.normal - nt).norm() < 1e-3);
    }

    #[test]
    fn normal_jacobian_matches_fd() {
        let c = cam();
        let valid = vec![true; 32 * 30];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let depth: Vec<f64> = (0..32 * 30).map(|_| rng.random_range(2.0..2.3)).collect();
        let dn = normal_from_depth(&depth, &valid, &c, 7, 9).unwrap();
        for k in 0..4 {
            let h = 1e-6;
            let mut p = depth.clone();
            p[dn.neighbors[k]] += h;
            let mut m = depth.clone();
            m[dn.neighbors[k]] -= h;
            let fd = (normal_from_depth(&p, &valid, &c, 7, 9).unwrap().normal
                - normal_from_depth(&m, &valid, &c, 7, 9).unwrap().normal)
                / (2.0 * h);
            assert!((fd - dn.jacobian[k]).norm() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn ncc_symmetric_bounded_and_affine_invariant(seed in 0u64..5000, s in 0.1f64..10.0, t in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..49).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..49).map(|_| rng.random::<f64>()).collect();
            let (pa, pb) = (Patch::from_values(7, &a), Patch::from_values(7, &b));
            let ab = ncc(&pa, &pb).unwrap();
            prop_assert!((ab - ncc(&pb, &pa).unwrap()).abs() < 1e-12);
            prop_assert!(ab.abs() <= 1.0 + 1e-9);
            let b2: Vec<f64> = b.iter().map(|v| s * v + t).collect();
            let ab2 = ncc(&pa, &Patch::from_values(7, &b2)).unwrap();
            prop_assert!((ab - ab2).abs() <= 1e-9 * ab.abs().max(1e-3));
        }

        #[test]
        fn normal_recovered_on_tilted_planes(t in 0.0f64..60.0, phi in 0.0f64..6.28) {
            let c = cam();
            let t = t.to_radians();
            let n = Vector3::new(t.sin() * phi.cos(), t.sin() * phi.sin(), -t.cos());
            let depth = plane_depth(&c, &n, -3.0);
            let valid = vec![true; 32 * 30];
            let got = normal_from_depth(&depth, &valid, &c, 15, 14).unwrap();
            prop_assert!((got.normal - n).norm() < 1e-3);
        }

        #[test]
        fn gradient_ignores_constant_offset(seed in 0u64..1000, k in -0.5f64..0.5) {
            let img = random_image_det(10, 9, 1, seed);
            let shifted = Image::from_vec(10, 9, 1, img.data.iter().map(|v| v + k).collect()).unwrap();
            let (a, b) = (image_gradient(&img), image_gradient(&shifted));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn from_fn_builds_row_major() {
        let img = random_image_det(3, 2, 1, 0);
        assert_eq!(img.data.len(), 6);
        let idx = Image::from_fn(3, 2, 2, |x, y, c| (x * 100 + y * 10 + c) as f64).unwrap();
        assert_eq!(idx.get(2, 1, 1), 211.0);
        assert_eq!(idx.pixel(1, 1), &[110.0, 111.0]);
    }
}
