//! End-to-end helpers: cloud → fused mesh → scores, and preset ablations.

use nalgebra::Vector3;
use serde::Serialize;

use crate::error::Result;
use crate::fusion::{fuse_cloud, marching_cubes, object_bounds, FusionParams, TriangleMesh};
use crate::gaussians::GaussianCloud;
use crate::geometry::Camera;
use crate::metrics::{chamfer, precision_recall_f1, sample_mesh, Chamfer, FScore};
use crate::rasterizer::RenderSettings;
use crate::trainer::{train, Preset, TrainConfig, TrainData, TrainOptions};

pub const DEFAULT_VOXEL: f64 = 0.02;
pub const DEFAULT_TRUNCATION: f64 = 0.08;
/// Distance threshold for precision/recall, in scene units.
pub const DEFAULT_F1_THRESHOLD: f64 = 0.02;
pub const MESH_SAMPLES: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshParams {
    pub voxel: f64,
    pub truncation: f64,
    /// Fusion box; defaults to [`object_bounds`] of the cameras.
    pub bounds: Option<(Vector3<f64>, Vector3<f64>)>,
}

impl Default for MeshParams {
    fn default() -> Self {
        Self { voxel: DEFAULT_VOXEL, truncation: DEFAULT_TRUNCATION, bounds: None }
    }
}

/// Renders every camera's depth, fuses, and extracts the zero level set.
pub fn reconstruct_mesh(cloud: &GaussianCloud, cameras: &[Camera], background: Vector3<f64>, p: &MeshParams) -> Result<TriangleMesh> {
    let settings = RenderSettings { background, keep_records: false, ..RenderSettings::default() };
    let fp = FusionParams {
        voxel: p.voxel,
        truncation: p.truncation,
        bounds: p.bounds.unwrap_or_else(|| object_bounds(cameras)),
        color: true,
    };
    let vol = fuse_cloud(cloud, cameras, &settings, &fp)?;
    let mut mesh = marching_cubes(&vol, 0.0)?;
    mesh.compute_normals();
    Ok(mesh)
}

/// Chamfer and F-score of area-uniform mesh samples against `gt`.
pub fn score_mesh(mesh: &TriangleMesh, gt: &[Vector3<f64>], threshold: f64, seed: u64) -> Result<(Chamfer, FScore)> {
    let pred = sample_mesh(mesh, MESH_SAMPLES, seed)?;
    Ok((chamfer(&pred, gt, None)?, precision_recall_f1(&pred, gt, threshold)?))
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub preset: String,
    pub gaussians: usize,
    pub final_loss: f64,
    pub accuracy: f64,
    pub completeness: f64,
    pub chamfer: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "preset,gaussians,final_loss,accuracy,completeness,chamfer,precision,recall,f1";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.preset,
            self.gaussians,
            self.final_loss,
            self.accuracy,
            self.completeness,
            self.chamfer,
            self.precision,
            self.recall,
            self.f1
        )
    }
}

/// Trains `base` under `preset`, meshes the result and scores it against `gt`.
pub fn run_preset(data: &TrainData, gt: &[Vector3<f64>], base: &TrainConfig, preset: Preset, mesh: &MeshParams, threshold: f64) -> Result<AblationRow> {
    let cfg = TrainConfig { preset, ..base.clone() };
    let out = train(data, &cfg, &TrainOptions::default())?;
    let m = reconstruct_mesh(&out.cloud, &data.cameras(), data.background, mesh)?;
    let (c, f) = score_mesh(&m, gt, threshold, cfg.seed)?;
    Ok(AblationRow {
        preset: preset.name().to_string(),
        gaussians: out.cloud.len(),
        final_loss: out.log.steps.last().map_or(f64::NAN, |r| r.total),
        accuracy: c.accuracy,
        completeness: c.completeness,
        chamfer: c.chamfer,
        precision: f.precision,
        recall: f.recall,
        f1: f.f1,
    })
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{}\n", AblationRow::CSV_HEADER);
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
