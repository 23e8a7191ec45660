//! Reverse-mode pass through compositing and projection.

use nalgebra::{Vector2, Vector3, Vector4};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussians::{sh_rest_count, GaussianCloud};

use super::project::{project_backward, SplatGrad};
use super::{DepthMode, RenderBuffers, Tile};

/// Upstream gradients with respect to each rendered map.
#[derive(Debug, Clone)]
pub struct MapGradients {
    pub color: Vec<Vector3<f64>>,
    pub alpha: Vec<f64>,
    pub normal: Vec<Vector3<f64>>,
    pub distance: Vec<f64>,
    pub gaussian_depth: Vec<f64>,
    /// Gradient of the active depth map; routed according to the depth mode.
    pub depth: Vec<f64>,
}

impl MapGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            color: vec![Vector3::zeros(); n],
            alpha: vec![0.0; n],
            normal: vec![Vector3::zeros(); n],
            distance: vec![0.0; n],
            gaussian_depth: vec![0.0; n],
            depth: vec![0.0; n],
        }
    }

    pub fn add(&mut self, o: &MapGradients) {
        for i in 0..self.alpha.len() {
            self.color[i] += o.color[i];
            self.alpha[i] += o.alpha[i];
            self.normal[i] += o.normal[i];
            self.distance[i] += o.distance[i];
            self.gaussian_depth[i] += o.gaussian_depth[i];
            self.depth[i] += o.depth[i];
        }
    }
}

/// Gradients with respect to every parameter of a [`GaussianCloud`].
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGradients {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<Vector4<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<Vector3<f64>>,
    pub sh_rest: Vec<Vector3<f64>>,
    /// Screen-space mean gradient per Gaussian (pixels), zero when culled.
    pub mean2d: Vec<Vector2<f64>>,
    pub visible: Vec<bool>,
}

impl CloudGradients {
    pub fn zeros(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        Self {
            positions: vec![Vector3::zeros(); n],
            rotations: vec![Vector4::zeros(); n],
            log_scales: vec![Vector3::zeros(); n],
            opacity_logits: vec![0.0; n],
            colors: vec![Vector3::zeros(); n],
            sh_rest: vec![Vector3::zeros(); cloud.sh_rest.len()],
            mean2d: vec![Vector2::zeros(); n],
            visible: vec![false; n],
        }
    }

    /// Adds parameter gradients; `mean2d` and `visible` are left alone since
    /// they are per-view quantities.
    pub fn add(&mut self, o: &CloudGradients) {
        for i in 0..self.positions.len() {
            self.positions[i] += o.positions[i];
            self.rotations[i] += o.rotations[i];
            self.log_scales[i] += o.log_scales[i];
            self.opacity_logits[i] += o.opacity_logits[i];
            self.colors[i] += o.colors[i];
        }
        for (a, b) in self.sh_rest.iter_mut().zip(&o.sh_rest) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.positions.iter_mut().for_each(|v| *v *= s);
        self.rotations.iter_mut().for_each(|v| *v *= s);
        self.log_scales.iter_mut().for_each(|v| *v *= s);
        self.opacity_logits.iter_mut().for_each(|v| *v *= s);
        self.colors.iter_mut().for_each(|v| *v *= s);
        self.sh_rest.iter_mut().for_each(|v| *v *= s);
    }

    /// Parameters in a fixed order: per Gaussian position(3), rotation(4),
    /// log-scale(3), opacity logit(1), colour(3), then all SH coefficients.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.positions.len() * 14 + self.sh_rest.len() * 3);
        for i in 0..self.positions.len() {
            out.extend(self.positions[i].iter());
            out.extend(self.rotations[i].iter());
            out.extend(self.log_scales[i].iter());
            out.push(self.opacity_logits[i]);
            out.extend(self.colors[i].iter());
        }
        for v in &self.sh_rest {
            out.extend(v.iter());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

// Feature channels blended per contributor: rgb, normal, distance, depth, 1.
type Feat = [f64; 9];

fn features(buf: &RenderBuffers, splat: u32) -> Feat {
    let s = &buf.splats[splat as usize];
    [
        s.color.x,
        s.color.y,
        s.color.z,
        s.normal.x,
        s.normal.y,
        s.normal.z,
        s.distance,
        s.depth,
        1.0,
    ]
}

fn tile_backward(buf: &RenderBuffers, tile: &Tile, g: &MapGradients) -> Vec<SplatGrad> {
    let mut acc = vec![SplatGrad::default(); tile.splats.len()];
    let records = buf.records.as_ref().expect("records checked by caller");
    let s = &buf.settings;
    for y in tile.y0..tile.y1 {
        for x in tile.x0..tile.x1 {
            let idx = y * buf.width + x;
            let contribs = records.pixel(idx);
            if contribs.is_empty() {
                continue;
            }
            let (mut gn, mut gd, mut ga, mut gz) =
                (g.normal[idx], g.distance[idx], g.alpha[idx], g.gaussian_depth[idx]);
            let dz = g.depth[idx];
            if dz != 0.0 && buf.depth_valid[idx] {
                match s.depth_mode {
                    DepthMode::Plane => {
                        let r = buf.camera.intrinsics.ray(x as f64, y as f64);
                        let den = buf.normal[idx].dot(&r);
                        gd += dz / den;
                        gn -= r * (dz * buf.distance[idx] / (den * den));
                    }
                    DepthMode::Blended => {
                        let a = buf.alpha[idx];
                        gz += dz / a;
                        ga -= dz * buf.gaussian_depth[idx] / (a * a);
                    }
                }
            }
            let gc = g.color[idx];
            let gfeat: Feat = [gc.x, gc.y, gc.z, gn.x, gn.y, gn.z, gd, gz, ga];
            let t_final = buf.transmittance[idx];
            // Suffix sums of blended features behind the current contributor.
            let mut suffix: Feat = [0.0; 9];
            for ch in 0..3 {
                suffix[ch] = s.background[ch] * t_final;
            }
            let (px, py) = (x as f64, y as f64);
            for c in contribs.iter().rev() {
                let f = features(buf, c.splat);
                let w = c.alpha * c.transmittance;
                let inv = 1.0 / (1.0 - c.alpha);
                let mut d_alpha = 0.0;
                for ch in 0..9 {
                    d_alpha += gfeat[ch] * (c.transmittance * f[ch] - suffix[ch] * inv);
                    suffix[ch] += f[ch] * w;
                }
                let sp = &buf.splats[c.splat as usize];
                let out = &mut acc[c.local as usize];
                out.color += Vector3::new(gfeat[0], gfeat[1], gfeat[2]) * w;
                out.normal += Vector3::new(gfeat[3], gfeat[4], gfeat[5]) * w;
                out.distance += gfeat[6] * w;
                out.depth += gfeat[7] * w;
                if c.clamped {
                    continue;
                }
                // alpha = o · exp(−q/2)
                let dx = px - sp.mean.x;
                let dy = py - sp.mean.y;
                let gauss = c.alpha / sp.opacity;
                out.opacity += d_alpha * gauss;
                let dq = -0.5 * c.alpha * d_alpha;
                let [a, b, cc] = sp.conic;
                out.conic[0] += dq * dx * dx;
                out.conic[1] += dq * 2.0 * dx * dy;
                out.conic[2] += dq * dy * dy;
                out.mean.x -= dq * 2.0 * (a * dx + b * dy);
                out.mean.y -= dq * 2.0 * (b * dx + cc * dy);
            }
        }
    }
    acc
}

/// Backpropagates map gradients into cloud parameters. Requires the buffers
/// produced by rendering this very `cloud`.
pub fn render_backward(cloud: &GaussianCloud, buf: &RenderBuffers, g: &MapGradients) -> Result<CloudGradients> {
    if buf.records.is_none() {
        return Err(Error::MissingContributorRecords);
    }
    let n = buf.width * buf.height;
    if g.color.len() != n || g.alpha.len() != n || g.depth.len() != n {
        return Err(Error::ShapeMismatch(format!("map gradients do not match {}x{}", buf.width, buf.height)));
    }
    let per_tile: Vec<Vec<SplatGrad>> = buf.tiles.par_iter().map(|t| tile_backward(buf, t, g)).collect();
    let mut splat_grads = vec![SplatGrad::default(); buf.splats.len()];
    for (tile, acc) in buf.tiles.iter().zip(&per_tile) {
        for (local, sg) in acc.iter().enumerate() {
            splat_grads[tile.splats[local] as usize].add(sg);
        }
    }

    let rest = sh_rest_count(cloud.sh_degree);
    let params: Vec<_> = buf
        .splats
        .par_iter()
        .zip(splat_grads.par_iter())
        .map(|(sp, sg)| {
            let mut sh = vec![Vector3::zeros(); rest];
            let pg = project_backward(cloud, sp, sg, &buf.camera, &mut sh);
            (pg, sh)
        })
        .collect();

    let mut out = CloudGradients::zeros(cloud);
    for ((sp, sg), (pg, sh)) in buf.splats.iter().zip(&splat_grads).zip(params) {
        let i = sp.gaussian;
        out.positions[i] += pg.position;
        out.rotations[i] += pg.rotation;
        out.log_scales[i] += pg.log_scale;
        out.opacity_logits[i] += pg.opacity_logit;
        out.colors[i] += pg.color;
        for (k, v) in sh.iter().enumerate() {
            out.sh_rest[i * rest + k] += v;
        }
        out.mean2d[i] = sg.mean;
        out.visible[i] = true;
    }
    if !out.is_finite() {
        return Err(Error::NonFiniteGradient("render_backward"));
    }
    Ok(out)
}
