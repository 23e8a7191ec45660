//! Seeded end-to-end scenes: cloud → render → losses → backward, checked
//! term by term against central differences.

use nalgebra::{UnitQuaternion, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{check_cloud_multi, GradCheckConfig, GradCheckReport, ParamCheck};
use crate::error::Result;
use crate::features::builtin_features;
use crate::gaussians::GaussianCloud;
use crate::geometry::{Camera, CameraIntrinsics, CameraPose};
use crate::imageproc::Image;
use crate::losses::{evaluate, ActiveTerms, Gates, LossReport, LossWeights, SourceFrame, ViewTarget};
use crate::rasterizer::{render, render_backward, MapGradients, RenderBuffers, RenderSettings};

pub const TERMS: [&str; 5] = ["image", "normal_consistency", "normal_smooth", "photometric", "feature"];
pub const SIZE: u32 = 32;
pub const MAX_GAUSSIANS: usize = 50;

/// Tolerance on the maximum relative error of a term.
pub fn tolerance(term: &str) -> f64 {
    if term == "image" {
        1e-3
    } else {
        1e-2
    }
}

/// At most this fraction of parameters may sit on a kink.
pub const MAX_KINK_FRACTION: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct SuiteScene {
    pub cloud: GaussianCloud,
    pub settings: RenderSettings,
    pub reference: ViewTarget,
    pub sources: Vec<ViewTarget>,
    pub weights: LossWeights,
}

fn smooth_image(rng: &mut ChaCha8Rng) -> Image {
    let waves: Vec<[f64; 4]> = (0..9)
        .map(|_| [rng.random_range(0.1..0.6), rng.random_range(0.1..0.6), rng.random_range(0.0..6.3), rng.random_range(0.05..0.2)])
        .collect();
    Image::from_fn(SIZE as usize, SIZE as usize, 3, |x, y, c| {
        let mut v = 0.5;
        for w in &waves[c * 3..c * 3 + 3] {
            v += w[3] * (w[0] * x as f64 + w[1] * y as f64 + w[2]).sin();
        }
        v
    })
    .expect("fixed image size")
}

/// Up to [`MAX_GAUSSIANS`] flattened splats on a bumpy sheet three units in
/// front of a reference camera, seen from two offset source cameras.
pub fn suite_scene(seed: u64, gaussians: usize) -> Result<SuiteScene> {
    let n = gaussians.clamp(1, MAX_GAUSSIANS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::empty();
    for _ in 0..n {
        let (x, y): (f64, f64) = (rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8));
        let z = 3.0 + 0.15 * (2.0 * x).sin() * (1.5 * y).cos();
        let q = UnitQuaternion::from_euler_angles(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-3.1..3.1));
        cloud.push(
            Vector3::new(x, y, z),
            Vector4::new(q.w, q.i, q.j, q.k) * rng.random_range(0.8..1.2),
            Vector3::new(rng.random_range(-2.4..-1.8), rng.random_range(-2.4..-1.8), rng.random_range(-4.5..-3.5)),
            rng.random_range(0.5..3.0),
            Vector3::new(rng.random(), rng.random(), rng.random()),
        );
    }
    let k = CameraIntrinsics::new(40.0, 40.0, 15.5, 15.5, SIZE, SIZE)?;
    let target = Vector3::new(0.0, 0.0, 3.0);
    let up = Vector3::new(0.0, -1.0, 0.0);
    let eyes = [Vector3::zeros(), Vector3::new(0.45, 0.05, 0.1), Vector3::new(-0.1, 0.4, -0.05)];
    let mut views = Vec::new();
    for (id, eye) in eyes.iter().enumerate() {
        let cam = Camera::new(id, k.clone(), CameraPose::look_at(*eye, target, up)?);
        let img = smooth_image(&mut rng);
        let f = builtin_features(&img, id);
        views.push(ViewTarget::new(cam, img, Some(f))?);
    }
    let reference = views.remove(0);
    Ok(SuiteScene {
        cloud,
        settings: RenderSettings::exact(),
        reference,
        sources: views,
        weights: LossWeights { num_sources: 2, ..LossWeights::default() },
    })
}

fn only(term: usize) -> ActiveTerms {
    let mut a = ActiveTerms::IMAGE_ONLY;
    match term {
        1 => a.normal_consistency = true,
        2 => a.normal_smooth = true,
        3 => a.photometric = true,
        4 => a.feature = true,
        _ => {}
    }
    a
}

fn difference(a: &MapGradients, b: &MapGradients) -> MapGradients {
    let mut d = a.clone();
    for i in 0..d.alpha.len() {
        d.color[i] -= b.color[i];
        d.alpha[i] -= b.alpha[i];
        d.normal[i] -= b.normal[i];
        d.distance[i] -= b.distance[i];
        d.gaussian_depth[i] -= b.gaussian_depth[i];
        d.depth[i] -= b.depth[i];
    }
    d
}

fn weighted_terms(r: &LossReport, w: &LossWeights) -> Vec<Vec<f64>> {
    let t = &r.terms;
    vec![
        vec![t.image],
        vec![w.lambda_nc * t.normal_consistency],
        vec![w.lambda_ns * t.normal_smooth],
        vec![w.lambda_p * t.photometric],
        vec![w.lambda_f * t.feature],
    ]
}

/// One report per entry of [`TERMS`]. Source depths and visibility gates are
/// held at their values for the unperturbed cloud, as in training.
pub fn check_scene(scene: &SuiteScene, cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let s = &scene.settings;
    let src_bufs: Vec<RenderBuffers> = scene.sources.iter().map(|v| render(&scene.cloud, &v.camera, s)).collect::<Result<_>>()?;
    let frames: Vec<SourceFrame> = src_bufs
        .iter()
        .zip(&scene.sources)
        .map(|(b, v)| SourceFrame { target: v, depth: &b.depth, depth_valid: &b.depth_valid })
        .collect();
    let base = render(&scene.cloud, &scene.reference.camera, s)?;
    let gates: Vec<Gates> = evaluate(&base, &scene.reference, &frames, &scene.weights, ActiveTerms::ALL, None)?.gates;
    let reports: Vec<LossReport> = (0..TERMS.len())
        .map(|t| evaluate(&base, &scene.reference, &frames, &scene.weights, only(t), Some(&gates)))
        .collect::<Result<_>>()?;
    let mut analytic = Vec::with_capacity(TERMS.len());
    for (t, r) in reports.iter().enumerate() {
        let g = if t == 0 { r.grads.clone() } else { difference(&r.grads, &reports[0].grads) };
        analytic.push(render_backward(&scene.cloud, &base, &g)?);
    }
    check_cloud_multi(&scene.cloud, &analytic, None, cfg, |c| {
        let b = render(c, &scene.reference.camera, s)?;
        let r = evaluate(&b, &scene.reference, &frames, &scene.weights, ActiveTerms::ALL, Some(&gates))?;
        let sig = b.branch_signature() ^ r.signature.rotate_left(17);
        Ok((weighted_terms(&r, &scene.weights), sig))
    })
}

/// Aggregate over all scenes for one loss term.
#[derive(Debug, Clone)]
pub struct TermSummary {
    pub term: &'static str,
    pub tolerance: f64,
    pub checks: usize,
    pub kinks: usize,
    pub max_rel_err: f64,
    pub worst: Option<ParamCheck>,
}

impl TermSummary {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance && (self.kinks as f64) <= MAX_KINK_FRACTION * (self.checks + self.kinks) as f64
    }
}

/// Checks `scenes` scenes seeded `first_seed, first_seed + 1, …`.
pub fn run_suite(first_seed: u64, scenes: usize, gaussians: usize, cfg: &GradCheckConfig) -> Result<Vec<TermSummary>> {
    let per_scene: Vec<Vec<GradCheckReport>> = (0..scenes as u64)
        .into_par_iter()
        .map(|i| check_scene(&suite_scene(first_seed + i, gaussians)?, cfg))
        .collect::<Result<_>>()?;
    Ok(TERMS
        .iter()
        .enumerate()
        .map(|(t, &term)| {
            let mut merged = GradCheckReport::default();
            for r in &per_scene {
                merged.merge(r[t].clone());
            }
            TermSummary {
                term,
                tolerance: tolerance(term),
                checks: merged.checks.len(),
                kinks: merged.kinks.len(),
                max_rel_err: merged.max_rel_err(),
                worst: merged.worst().cloned(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_is_seeded_and_covers_the_reference() {
        let a = suite_scene(3, 40).unwrap();
        let b = suite_scene(3, 40).unwrap();
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.cloud.len(), 40);
        let buf = render(&a.cloud, &a.reference.camera, &a.settings).unwrap();
        let valid = buf.depth_valid.iter().filter(|v| **v).count();
        assert!(valid > 300, "{valid}");
        assert_eq!(suite_scene(1, 500).unwrap().cloud.len(), MAX_GAUSSIANS);
    }

    #[test]
    fn small_scene_gradients_match() {
        let scene = suite_scene(5, 12).unwrap();
        let reports = check_scene(&scene, &GradCheckConfig::default()).unwrap();
        for (t, r) in TERMS.iter().zip(&reports) {
            let worst = r.worst().unwrap();
            assert!(worst.rel_err < tolerance(t), "{t}: {worst:?}");
            assert!(r.checks.iter().any(|c| c.analytic.abs() > 1e-6), "{t} has no signal");
        }
    }
}
