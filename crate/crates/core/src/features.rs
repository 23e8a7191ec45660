//! Dense per-view feature maps for the feature alignment loss.
//!
//! A deterministic hand-built descriptor stands in for a learned extractor;
//! externally computed maps can be loaded from disk instead.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DVector, Vector2};

use crate::error::{Error, Result};
use crate::imageproc::{bilinear_sample_all, convolve_clamped, gaussian_kernel, Image};

pub const FEATURE_MAGIC: &[u8; 15] = b"VASPLAT.FEAT.v1";
pub const BUILTIN_CHANNELS: usize = 10;
const VARIANCE_FLOOR: f64 = 1e-8;
const COSINE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub view: usize,
    /// `H × W × C` feature image.
    pub map: Image,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.map.channels
    }

    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        self.map.pixel(x, y)
    }
}

fn smooth(v: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    convolve_clamped(v, w, h, &gaussian_kernel(sigma, radius))
}

fn derivatives(v: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; w * h];
    let mut dy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (l, r) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (u, d) = (y.saturating_sub(1), (y + 1).min(h - 1));
            if r > l {
                dx[y * w + x] = (v[y * w + r] - v[y * w + l]) / (r - l) as f64;
            }
            if d > u {
                dy[y * w + x] = (v[d * w + x] - v[u * w + x]) / (d - u) as f64;
            }
        }
    }
    (dx, dy)
}

fn standardize(c: &mut [f64]) {
    let n = c.len() as f64;
    let mean = c.iter().sum::<f64>() / n;
    let var = c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var < VARIANCE_FLOOR {
        // Flat channel: nothing to describe.
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let sd = var.sqrt();
    c.iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

/// Unstandardised descriptor channels: luminance, x/y derivatives at σ = 1
/// and σ = 2, gradient magnitude at both scales, smoothed colour.
pub fn raw_builtin_channels(img: &Image) -> Vec<Vec<f64>> {
    let (w, h) = (img.width, img.height);
    let lum = img.luminance().data;
    let mut out = vec![lum.clone()];
    let mut mags = Vec::new();
    for sigma in [1.0, 2.0] {
        let (dx, dy) = derivatives(&smooth(&lum, w, h, sigma), w, h);
        mags.push(dx.iter().zip(&dy).map(|(a, b)| (a * a + b * b).sqrt()).collect::<Vec<_>>());
        out.push(dx);
        out.push(dy);
    }
    out.extend(mags);
    for c in 0..3 {
        let ch = img.channel(c.min(img.channels - 1)).data;
        out.push(smooth(&ch, w, h, 1.0));
    }
    out
}

/// Deterministic 10-channel descriptor, each channel standardised over the image.
pub fn builtin_features(img: &Image, view: usize) -> FeatureMap {
    let (w, h) = (img.width, img.height);
    let mut chans = raw_builtin_channels(img);
    chans.iter_mut().for_each(|c| standardize(c));
    let mut data = Vec::with_capacity(w * h * BUILTIN_CHANNELS);
    for i in 0..w * h {
        data.extend(chans.iter().map(|c| c[i]));
    }
    FeatureMap { view, map: Image { width: w, height: h, channels: BUILTIN_CHANNELS, data } }
}

pub fn save_features(path: &Path, f: &FeatureMap) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(FEATURE_MAGIC)?;
    for v in [f.map.height, f.map.width, f.map.channels] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    for v in &f.map.data {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a feature file as stored, without resampling.
pub fn read_features(path: &Path, view: usize) -> Result<FeatureMap> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 15];
    r.read_exact(&mut magic).map_err(|_| Error::BadHeader("truncated magic".into()))?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::BadHeader("not a feature file".into()));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| Error::BadHeader("truncated dimensions".into()))?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let [h, w, c] = dims;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::BadHeader(format!("empty feature map {h}x{w}x{c}")));
    }
    let mut bytes = vec![0u8; h * w * c * 4];
    r.read_exact(&mut bytes).map_err(|_| Error::BadHeader("payload shorter than header".into()))?;
    let data: Vec<f64> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::BadHeader("non-finite feature values".into()));
    }
    Ok(FeatureMap { view, map: Image::from_vec(w, h, c, data)? })
}

/// Bilinear resampling with pixel centres aligned.
pub fn resample(map: &FeatureMap, width: usize, height: usize) -> Result<FeatureMap> {
    let src = &map.map;
    if src.width == width && src.height == height {
        return Ok(map.clone());
    }
    let c = src.channels;
    let mut data = vec![0.0; width * height * c];
    let mut grad = vec![Vector2::zeros(); c];
    let sx = src.width as f64 / width as f64;
    let sy = src.height as f64 / height as f64;
    let (wm, hm) = ((src.width - 1) as f64, (src.height - 1) as f64);
    for y in 0..height {
        for x in 0..width {
            let u = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, wm);
            let v = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, hm);
            let out = &mut data[(y * width + x) * c..(y * width + x + 1) * c];
            if src.width < 2 || src.height < 2 {
                out.copy_from_slice(src.pixel(u.round() as usize, v.round() as usize));
            } else {
                bilinear_sample_all(src, u, v, out, &mut grad)?;
            }
        }
    }
    Ok(FeatureMap { view: map.view, map: Image::from_vec(width, height, c, data)? })
}

/// Loads feature files for a dataset, enforcing a common channel count.
#[derive(Debug, Default)]
pub struct FeatureLoader {
    channels: Option<usize>,
}

impl FeatureLoader {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads `path` for `view`, upsampling to `width × height` when stored at
    /// a different resolution.
    pub fn load(&mut self, path: &Path, view: usize, width: usize, height: usize) -> Result<FeatureMap> {
        let f = read_features(path, view)?;
        match self.channels {
            Some(c) if c != f.channels() => {
                return Err(Error::ChannelMismatch { expected: c, found: f.channels() });
            }
            _ => self.channels = Some(f.channels()),
        }
        resample(&f, width, height)
    }
}

/// `dot(a, b) / max(‖a‖‖b‖, 1e-8)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb).max(COSINE_FLOOR)
}

/// Cosine similarity and its gradient with respect to `b`.
pub fn cosine_similarity_grad(a: &[f64], b: &[f64]) -> (f64, DVector<f64>) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb2: f64 = b.iter().map(|v| v * v).sum();
    let nb = nb2.sqrt();
    let den = na * nb;
    if den > COSINE_FLOOR {
        let cos = dot / den;
        let g = DVector::from_iterator(b.len(), a.iter().zip(b).map(|(x, y)| x / den - cos * y / nb2));
        (cos, g)
    } else {
        (dot / COSINE_FLOOR, DVector::from_iterator(b.len(), a.iter().map(|x| x / COSINE_FLOOR)))
    }
}
