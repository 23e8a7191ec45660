//! Gradient-driven cloning/splitting and opacity pruning.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::gaussians::{rotation_matrix, GaussianCloud};
use crate::rasterizer::CloudGradients;

use super::adam::AdamState;

/// Running screen-space gradient statistics between densification passes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self { grad_sum: vec![0.0; n], count: vec![0; n] }
    }

    /// Accumulates `|∂L/∂μ₂ᴅ|` for visible primitives. `scale` converts pixel
    /// gradients into half-image units (`0.5 · max(W, H)`).
    pub fn accumulate(&mut self, g: &CloudGradients, scale: f64) {
        for i in 0..self.grad_sum.len() {
            if g.visible[i] {
                self.grad_sum[i] += g.mean2d[i].norm() * scale;
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.count[i] as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensifyParams {
    pub grad_threshold: f64,
    /// Primitives whose largest scale exceeds this are split, others cloned.
    pub split_scale: f64,
    pub prune_opacity: f64,
    pub max_gaussians: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DensifyOutcome {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

fn normal3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::from_fn(|_, _| StandardNormal.sample(rng))
}

/// Clones small and splits large primitives whose mean gradient exceeds the
/// threshold, then removes those with opacity below `prune_opacity`. New
/// primitives get zero optimiser moments. Deterministic per seed.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    adam: &mut AdamState,
    stats: &DensifyStats,
    p: &DensifyParams,
    seed: u64,
) -> DensifyOutcome {
    let n = cloud.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<usize> = (0..n).filter(|&i| stats.mean(i) > p.grad_threshold).collect();
    // Largest gradients first when the budget is tight; ties by index.
    candidates.sort_by(|&a, &b| stats.mean(b).total_cmp(&stats.mean(a)).then(a.cmp(&b)));
    let mut budget = p.max_gaussians.saturating_sub(n);
    let mut out = DensifyOutcome::default();
    let mut remove = vec![false; n];
    let k = crate::gaussians::sh_rest_count(cloud.sh_degree);
    let mut added = 0;
    for &i in &candidates {
        if budget == 0 {
            break;
        }
        let scales = cloud.scales(i);
        let rot = rotation_matrix(&cloud.rotations[i]).unwrap_or_else(|_| nalgebra::Matrix3::identity());
        let sh: Vec<Vector3<f64>> = cloud.sh_coeffs(i).to_vec();
        let (pos, q, o, c) = (cloud.positions[i], cloud.rotations[i], cloud.opacity_logits[i], cloud.colors[i]);
        if scales.max() > p.split_scale {
            // Two children drawn from the parent's distribution, 1.6× smaller.
            let ls = (scales / 1.6).map(f64::ln);
            for _ in 0..2 {
                let offset = rot * scales.component_mul(&normal3(&mut rng));
                cloud.push(pos + offset, q, ls, o, c);
                let base = cloud.sh_rest.len() - k;
                cloud.sh_rest[base..].copy_from_slice(&sh);
            }
            remove[i] = true;
            added += 2;
            budget = budget.saturating_sub(1);
            out.split += 1;
        } else {
            let offset = rot * (scales * 0.5).component_mul(&normal3(&mut rng));
            cloud.push(pos + offset, q, cloud.log_scales[i], o, c);
            let base = cloud.sh_rest.len() - k;
            cloud.sh_rest[base..].copy_from_slice(&sh);
            added += 1;
            budget -= 1;
            out.cloned += 1;
        }
    }
    adam.extend(added, cloud.sh_degree);
    remove.extend(std::iter::repeat_n(false, added));
    let keep: Vec<bool> = (0..cloud.len()).map(|i| !remove[i] && cloud.opacity(i) >= p.prune_opacity).collect();
    out.pruned = keep.iter().filter(|k| !**k).count() - out.split;
    if keep.iter().any(|k| !k) {
        cloud.retain_mask(&keep);
        adam.retain(&keep, cloud.sh_degree);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::{logit, Quat};

    fn cloud3() -> GaussianCloud {
        let mut c = GaussianCloud::empty();
        for i in 0..3 {
            c.push(Vector3::new(i as f64, 0.0, 0.0), Quat::new(1.0, 0.0, 0.0, 0.0), Vector3::repeat(0.01f64.ln()), logit(0.5), Vector3::repeat(0.5));
        }
        c
    }

    fn params() -> DensifyParams {
        DensifyParams { grad_threshold: 1e-3, split_scale: 0.05, prune_opacity: 0.005, max_gaussians: 100 }
    }

    #[test]
    fn quiet_cloud_is_unchanged() {
        let mut c = cloud3();
        let before = c.clone();
        let mut adam = AdamState::new(&c);
        let stats = DensifyStats { grad_sum: vec![1e-4; 3], count: vec![1; 3] };
        let o = densify_and_prune(&mut c, &mut adam, &stats, &params(), 1);
        assert_eq!(o, DensifyOutcome::default());
        assert_eq!(c, before);
    }

    #[test]
    fn small_primitive_over_threshold_is_cloned() {
        let mut c = cloud3();
        let mut adam = AdamState::new(&c);
        adam.moments[0].m.iter_mut().for_each(|m| *m = 1.0);
        let stats = DensifyStats { grad_sum: vec![0.0, 5e-3, 0.0], count: vec![1; 3] };
        let o = densify_and_prune(&mut c, &mut adam, &stats, &params(), 1);
        assert_eq!(o.cloned, 1);
        assert_eq!(c.len(), 4);
        assert!((c.positions[3] - c.positions[1]).norm() < 0.01 * 5.0);
        assert_ne!(c.positions[3], c.positions[1]);
        assert_eq!(c.log_scales[3], c.log_scales[1]);
        assert_eq!(adam.moments[0].m.len(), 12);
        assert_eq!(&adam.moments[0].m[9..], &[0.0; 3]);
    }

    #[test]
    fn large_primitive_over_threshold_is_split() {
        let mut c = cloud3();
        c.log_scales[0] = Vector3::repeat(0.2f64.ln());
        let mut adam = AdamState::new(&c);
        let stats = DensifyStats { grad_sum: vec![5e-3, 0.0, 0.0], count: vec![1; 3] };
        let o = densify_and_prune(&mut c, &mut adam, &stats, &params(), 1);
        assert_eq!(o.split, 1);
        assert_eq!(c.len(), 4);
        assert!((c.scales(3).x - 0.2 / 1.6).abs() < 1e-12);
        assert_eq!(adam.moments[2].v.len(), 12);
    }

    #[test]
    fn transparent_primitive_is_pruned() {
        let mut c = cloud3();
        c.opacity_logits[2] = logit(0.001);
        let mut adam = AdamState::new(&c);
        let o = densify_and_prune(&mut c, &mut adam, &DensifyStats::new(3), &params(), 1);
        assert_eq!(o.pruned, 1);
        assert_eq!(c.len(), 2);
        assert_eq!(adam.moments[3].m.len(), 2);
    }

    #[test]
    fn budget_caps_growth_and_is_deterministic() {
        let run = || {
            let mut c = cloud3();
            let mut adam = AdamState::new(&c);
            let stats = DensifyStats { grad_sum: vec![2e-3, 9e-3, 5e-3], count: vec![1; 3] };
            let p = DensifyParams { max_gaussians: 4, ..params() };
            densify_and_prune(&mut c, &mut adam, &stats, &p, 9);
            c
        };
        let c = run();
        assert_eq!(c.len(), 4);
        // The largest gradient (primitive 1) wins the single slot.
        assert!((c.positions[3] - c.positions[1]).norm() < 0.1);
        assert_eq!(c, run());
    }
}
