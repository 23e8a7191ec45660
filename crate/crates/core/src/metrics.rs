//! Reconstruction and image metrics.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::TriangleMesh;
use crate::imageproc::{ssim, Image};
use crate::spatial::PointGrid;

pub const PSNR_CAP: f64 = 99.0;
pub const DEFAULT_SAMPLES: usize = 100_000;

/// Distance from every query point to its nearest reference point.
pub fn nearest_distances(query: &[Vector3<f64>], reference: &[Vector3<f64>]) -> Result<Vec<f64>> {
    if query.is_empty() || reference.is_empty() {
        return Err(Error::EmptySet);
    }
    let grid = PointGrid::new(reference);
    Ok(query.par_iter().map(|q| grid.nearest(q).expect("non-empty reference").1).collect())
}

/// O(n·m) reference implementation of [`nearest_distances`].
pub fn nearest_distances_brute(query: &[Vector3<f64>], reference: &[Vector3<f64>]) -> Result<Vec<f64>> {
    if query.is_empty() || reference.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(query
        .iter()
        .map(|q| reference.iter().map(|r| (r - q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Chamfer {
    /// Mean distance from predicted points to the ground truth.
    pub accuracy: f64,
    /// Mean distance from ground-truth points to the prediction.
    pub completeness: f64,
    pub chamfer: f64,
}

/// Bidirectional mean nearest-neighbour distance. With `truncation`, each
/// distance is clipped to that value first.
pub fn chamfer(pred: &[Vector3<f64>], gt: &[Vector3<f64>], truncation: Option<f64>) -> Result<Chamfer> {
    let clip = |d: f64| truncation.map_or(d, |t| d.min(t));
    let mean = |v: Vec<f64>| v.iter().map(|d| clip(*d)).sum::<f64>() / v.len() as f64;
    let accuracy = mean(nearest_distances(pred, gt)?);
    let completeness = mean(nearest_distances(gt, pred)?);
    Ok(Chamfer { accuracy, completeness, chamfer: 0.5 * (accuracy + completeness) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn precision_recall_f1(pred: &[Vector3<f64>], gt: &[Vector3<f64>], threshold: f64) -> Result<FScore> {
    if !(threshold > 0.0) {
        return Err(Error::BadConfig(format!("F-score threshold must be positive, got {threshold}")));
    }
    let frac = |d: Vec<f64>| d.iter().filter(|v| **v <= threshold).count() as f64 / d.len() as f64;
    let precision = frac(nearest_distances(pred, gt)?);
    let recall = frac(nearest_distances(gt, pred)?);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(FScore { precision, recall, f1 })
}

/// Peak signal-to-noise ratio for images in `[0, 1]`, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch("PSNR of differently shaped images".into()));
    }
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len().max(1) as f64;
    Ok(if mse < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

pub fn ssim_score(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim(a, b)?.mean)
}

/// Default sample count for a mesh: 100k or ten per triangle, whichever is smaller.
pub fn default_sample_count(mesh: &TriangleMesh) -> usize {
    DEFAULT_SAMPLES.min(10 * mesh.triangles.len())
}

/// Uniform area-weighted surface samples, deterministic per seed.
pub fn sample_mesh(mesh: &TriangleMesh, count: usize, seed: u64) -> Result<Vec<Vector3<f64>>> {
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cdf.push(total);
    }
    if count == 0 || !(total > 0.0) {
        return Err(Error::EmptySet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let pick = rng.random::<f64>() * total;
            let t = cdf.partition_point(|c| *c <= pick).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangles[t].map(|i| mesh.vertices[i as usize]);
            let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            a + (b - a) * u + (c - a) * v
        })
        .collect())
}

/// Everything `eval` reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub completeness: f64,
    pub chamfer: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

impl EvalReport {
    pub fn from_parts(c: Chamfer, f: FScore, psnr: Option<f64>, ssim: Option<f64>) -> Self {
        Self {
            accuracy: c.accuracy,
            completeness: c.completeness,
            chamfer: c.chamfer,
            precision: f.precision,
            recall: f.recall,
            f1: f.f1,
            psnr,
            ssim,
        }
    }

    pub const CSV_HEADER: &'static str = "accuracy,completeness,chamfer,precision,recall,f1,psnr,ssim";

    pub fn csv_row(&self) -> String {
        let o = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.accuracy,
            self.completeness,
            self.chamfer,
            self.precision,
            self.recall,
            self.f1,
            o(self.psnr),
            o(self.ssim)
        )
    }
}
