//! Training objective: image reconstruction, normal consistency and
//! smoothness, multi-view photometric consistency and feature alignment.
//!
//! Every term writes its gradient into a [`MapGradients`] for the reference
//! render; [`render_backward`](crate::rasterizer::render_backward) carries it
//! to the Gaussians.

mod image;
mod multiview;
mod normal;

use std::hash::{DefaultHasher, Hasher};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::Camera;
use crate::imageproc::{image_gradient, normal_map_from_depth, Image};
use crate::rasterizer::{MapGradients, RenderBuffers};

pub use image::{loss_image, ImageLoss};
pub use multiview::{
    compute_gates, loss_feature, loss_photometric, occlusion_from_error, occlusion_weight, reprojection_error,
    reproject, visibility, Gates, MultiViewLoss, SourceData, OCCLUSION_CUTOFF,
};
pub use normal::{edge_weights, loss_normal_consistency, loss_normal_smooth, NormalLoss};

/// Accumulates the discrete decisions taken while evaluating a loss (L1
/// signs, ReLU and gate states, sample cells). Equal signatures mean two
/// evaluations share a smooth branch.
#[derive(Debug, Default)]
pub struct Signature(DefaultHasher);

impl Signature {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn push(&mut self, v: u64) {
        self.0.write_u64(v);
    }

    #[inline]
    pub fn push_bits(&mut self, bits: &[bool]) {
        let mut v = 0u64;
        for (k, b) in bits.iter().enumerate() {
            v |= (*b as u64) << k;
        }
        self.0.write_u64(v);
    }

    pub fn finish(&self) -> u64 {
        self.0.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_nc: f64,
    pub lambda_ns: f64,
    pub lambda_p: f64,
    pub lambda_f: f64,
    pub tau: f64,
    pub patch_size: usize,
    pub num_sources: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta1: 0.2,
            beta2: 0.03,
            lambda_nc: 0.015,
            lambda_ns: 0.3,
            lambda_p: 0.15,
            lambda_f: 1.0,
            tau: 0.01,
            patch_size: 7,
            num_sources: 3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.beta1, self.beta2, self.lambda_nc, self.lambda_ns, self.lambda_p, self.lambda_f];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::BadConfig("loss weights must be finite and non-negative".into()));
        }
        if self.beta1 > 1.0 {
            return Err(Error::BadConfig("beta1 must not exceed 1".into()));
        }
        if self.patch_size % 2 == 0 || self.patch_size < 3 {
            return Err(Error::BadConfig(format!("patch size {} must be odd and at least 3", self.patch_size)));
        }
        if self.num_sources == 0 {
            return Err(Error::BadConfig("at least one source view is required".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::BadConfig("tau must be positive".into()));
        }
        Ok(())
    }
}

/// Which regularisers take part in a step. The image term is always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ActiveTerms {
    pub normal_consistency: bool,
    pub normal_smooth: bool,
    pub photometric: bool,
    pub feature: bool,
}

impl ActiveTerms {
    pub const IMAGE_ONLY: ActiveTerms =
        ActiveTerms { normal_consistency: false, normal_smooth: false, photometric: false, feature: false };
    pub const ALL: ActiveTerms =
        ActiveTerms { normal_consistency: true, normal_smooth: true, photometric: true, feature: true };

    pub fn multi_view(&self) -> bool {
        self.photometric || self.feature
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub image: f64,
    pub normal_consistency: f64,
    pub normal_smooth: f64,
    pub photometric: f64,
    pub feature: f64,
}

/// Weighted sum; inactive terms contribute nothing.
pub fn total_loss(t: &LossTerms, w: &LossWeights, active: ActiveTerms) -> f64 {
    let mut total = t.image;
    if active.normal_consistency {
        total += w.lambda_nc * t.normal_consistency;
    }
    if active.normal_smooth {
        total += w.lambda_ns * t.normal_smooth;
    }
    if active.photometric {
        total += w.lambda_p * t.photometric;
    }
    if active.feature {
        total += w.lambda_f * t.feature;
    }
    total
}

/// Ground truth and derived per-view data.
#[derive(Debug, Clone)]
pub struct ViewTarget {
    pub camera: Camera,
    pub image: Image,
    pub gray: Image,
    /// Normalised target gradient magnitude.
    pub edges: Vec<f64>,
    /// `(1 − edges)²`.
    pub delta: Vec<f64>,
    pub features: Option<FeatureMap>,
}

impl ViewTarget {
    pub fn new(camera: Camera, image: Image, features: Option<FeatureMap>) -> Result<Self> {
        if image.width != camera.width() || image.height != camera.height() {
            return Err(Error::ResolutionMismatch {
                view: camera.id,
                expected: (camera.width() as u32, camera.height() as u32),
                found: (image.width as u32, image.height as u32),
            });
        }
        if image.channels != 3 {
            return Err(Error::ShapeMismatch(format!("view {} needs an RGB image", camera.id)));
        }
        if let Some(f) = &features {
            if f.map.width != image.width || f.map.height != image.height {
                return Err(Error::ShapeMismatch(format!("feature map of view {} has the wrong size", camera.id)));
            }
        }
        let gray = image.luminance();
        let edges = image_gradient(&image);
        let delta = edge_weights(&edges);
        Ok(Self { camera, image, gray, edges, delta, features })
    }
}

/// A source view with its freshly rendered depth.
#[derive(Debug, Clone, Copy)]
pub struct SourceFrame<'a> {
    pub target: &'a ViewTarget,
    pub depth: &'a [f64],
    pub depth_valid: &'a [bool],
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub terms: LossTerms,
    pub total: f64,
    pub active: ActiveTerms,
    /// Contributing pixels per source view for the photometric term.
    pub visible_photometric: Vec<usize>,
    /// Contributing pixels per source view for the feature term.
    pub visible_feature: Vec<usize>,
    pub grads: MapGradients,
    pub gates: Vec<Gates>,
    pub signature: u64,
}

/// Evaluates the active terms for one reference render. `frozen` replaces the
/// visibility/occlusion gates (one per source) instead of recomputing them.
pub fn evaluate(
    buf: &RenderBuffers,
    target: &ViewTarget,
    sources: &[SourceFrame],
    weights: &LossWeights,
    active: ActiveTerms,
    frozen: Option<&[Gates]>,
) -> Result<LossReport> {
    let n = buf.width * buf.height;
    if target.image.width != buf.width || target.image.height != buf.height {
        return Err(Error::ShapeMismatch("render and target differ in size".into()));
    }
    let mut sig = Signature::new();
    let mut grads = MapGradients::zeros(n);
    let mut terms = LossTerms::default();

    let rendered = Image::from_rgb(buf.width, buf.height, &buf.color)?;
    let li = loss_image(&rendered, &target.image, weights.beta1, weights.beta2, &mut sig)?;
    terms.image = li.value;
    grads.color = li.grad;

    let cam = &buf.camera;
    if active.normal_consistency || active.normal_smooth {
        let from_depth = normal_map_from_depth(&buf.depth, &buf.depth_valid, cam);
        let covered: Vec<bool> = buf.alpha.iter().map(|a| *a > buf.settings.alpha_floor).collect();
        for (i, d) in from_depth.iter().enumerate() {
            sig.push_bits(&[d.is_some(), covered[i]]);
        }
        if active.normal_consistency {
            let r = loss_normal_consistency(
                &buf.normal,
                &from_depth,
                &covered,
                &target.delta,
                weights.lambda_nc,
                &mut grads.normal,
                &mut grads.depth,
                &mut sig,
            );
            terms.normal_consistency = r.value;
        }
        if active.normal_smooth {
            let r = loss_normal_smooth(
                &buf.normal,
                &from_depth,
                &covered,
                &target.delta,
                weights.tau,
                buf.width,
                weights.lambda_ns,
                &mut grads.depth,
                &mut sig,
            );
            terms.normal_smooth = r.value;
        }
    }

    let mut gates = Vec::new();
    let mut visible_photometric = Vec::new();
    let mut visible_feature = Vec::new();
    if active.multi_view() {
        if sources.is_empty() {
            return Err(Error::NoSourceViews);
        }
        gates = match frozen {
            Some(g) if g.len() == sources.len() => g.to_vec(),
            Some(_) => return Err(Error::ShapeMismatch("one gate set per source view expected".into())),
            None => sources
                .iter()
                .map(|s| compute_gates(cam, &buf.depth, &buf.depth_valid, &s.target.camera, s.depth, s.depth_valid))
                .collect(),
        };
        let data: Vec<SourceData> = sources
            .iter()
            .zip(&gates)
            .map(|(s, g)| SourceData {
                camera: &s.target.camera,
                gray: &s.target.gray,
                features: s.target.features.as_ref(),
                gates: g,
            })
            .collect();
        for g in &gates {
            for w in &g.weight {
                sig.push_bits(&[*w > 0.0]);
            }
        }
        if active.photometric {
            let r = loss_photometric(
                cam,
                &target.gray,
                &buf.normal,
                &buf.distance,
                &data,
                weights.patch_size,
                weights.lambda_p,
                &mut grads.normal,
                &mut grads.distance,
                &mut sig,
            )?;
            terms.photometric = r.value;
            visible_photometric = r.visible;
        }
        if active.feature {
            let fr = target.features.as_ref().ok_or(Error::NoSourceViews)?;
            let r = loss_feature(cam, fr, &buf.depth, &data, weights.lambda_f, &mut grads.depth, &mut sig)?;
            terms.feature = r.value;
            visible_feature = r.visible;
        }
    }
    // Depth gradients only exist where the depth is defined.
    for (g, v) in grads.depth.iter_mut().zip(&buf.depth_valid) {
        if !v {
            *g = 0.0;
        }
    }

    let total = total_loss(&terms, weights, active);
    Ok(LossReport {
        terms,
        total,
        active,
        visible_photometric,
        visible_feature,
        grads,
        gates,
        signature: sig.finish(),
    })
}
