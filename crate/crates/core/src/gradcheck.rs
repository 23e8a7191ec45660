//! Central finite-difference verification of analytic gradients.
//!
//! The objective returns its loss as a list of terms plus a branch signature.
//! Differencing term by term keeps round-off far below the tolerance even
//! for large image sums, and a signature change between the base point and a
//! probe means the step crossed a discrete decision (a contributor entering
//! a footprint, an alpha clamp toggling, a gate flipping). Such probes are
//! retried with smaller steps and reported as kinks when no clean step exists.

pub mod suite;

use crate::error::Result;
use crate::gaussians::GaussianCloud;
use crate::rasterizer::CloudGradients;

pub const PARAMS_PER_GAUSSIAN: usize = 14;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the error denominator.
    pub floor: f64,
    /// Step halvings tried when a probe crosses a branch.
    pub max_halvings: u32,
    /// Parameters whose error exceeds this are re-estimated with Richardson
    /// extrapolation over `h` and `h/2`, cancelling the O(h²) truncation term.
    pub refine_above: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-4, tolerance: 1e-3, floor: 1e-6, max_halvings: 6, refine_above: 1e-4 }
    }
}

/// `|a − f| / max(floor, |a| + |f|)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / floor.max(analytic.abs() + numeric.abs())
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub index: usize,
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checks: Vec<ParamCheck>,
    /// Parameters where every tried step crossed a branch.
    pub kinks: Vec<usize>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        // NaN (a non-finite difference) must not vanish in the maximum.
        self.checks.iter().map(|c| c.rel_err).fold(0.0, |m, e| if e.is_nan() || m.is_nan() { f64::NAN } else { m.max(e) })
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.checks.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn failures(&self, tolerance: f64) -> Vec<&ParamCheck> {
        self.checks.iter().filter(|c| !(c.rel_err < tolerance)).collect()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checks.extend(other.checks);
        self.kinks.extend(other.kinks);
    }
}

/// Number of scalar parameters in `cloud` in [`CloudGradients::flatten`] order.
pub fn param_count(cloud: &GaussianCloud) -> usize {
    cloud.len() * PARAMS_PER_GAUSSIAN + cloud.sh_rest.len() * 3
}

/// Mutable access to parameter `k` in [`CloudGradients::flatten`] order.
pub fn param_mut(cloud: &mut GaussianCloud, k: usize) -> &mut f64 {
    let base = cloud.len() * PARAMS_PER_GAUSSIAN;
    if k >= base {
        let j = k - base;
        return &mut cloud.sh_rest[j / 3][j % 3];
    }
    let (i, o) = (k / PARAMS_PER_GAUSSIAN, k % PARAMS_PER_GAUSSIAN);
    match o {
        0..=2 => &mut cloud.positions[i][o],
        3..=6 => &mut cloud.rotations[i][o - 3],
        7..=9 => &mut cloud.log_scales[i][o - 7],
        10 => &mut cloud.opacity_logits[i],
        _ => &mut cloud.colors[i][o - 11],
    }
}

pub fn param_name(cloud: &GaussianCloud, k: usize) -> String {
    let base = cloud.len() * PARAMS_PER_GAUSSIAN;
    if k >= base {
        return format!("sh_rest[{}][{}]", (k - base) / 3, (k - base) % 3);
    }
    let (i, o) = (k / PARAMS_PER_GAUSSIAN, k % PARAMS_PER_GAUSSIAN);
    let field = match o {
        0..=2 => format!("position[{o}]"),
        3..=6 => format!("rotation[{}]", o - 3),
        7..=9 => format!("log_scale[{}]", o - 7),
        10 => "opacity_logit".to_string(),
        _ => format!("color[{}]", o - 11),
    };
    format!("g{i}.{field}")
}

/// Objective evaluated at a perturbed cloud: loss terms and branch signature.
pub type Evaluation = (Vec<f64>, u64);

fn term_difference(plus: &[f64], minus: &[f64]) -> f64 {
    if plus.len() != minus.len() {
        return f64::NAN;
    }
    plus.iter().zip(minus).map(|(a, b)| a - b).sum()
}

/// Checks `analytic` against central differences of `eval` for the listed
/// parameter indices (all when `params` is `None`).
pub fn check_cloud<F>(
    cloud: &GaussianCloud,
    analytic: &CloudGradients,
    params: Option<&[usize]>,
    cfg: &GradCheckConfig,
    eval: F,
) -> Result<GradCheckReport>
where
    F: Fn(&GaussianCloud) -> Result<Evaluation>,
{
    let mut r = check_cloud_multi(cloud, std::slice::from_ref(analytic), params, cfg, |c| {
        let (terms, sig) = eval(c)?;
        Ok((vec![terms], sig))
    })?;
    Ok(r.pop().unwrap_or_default())
}

/// Several objectives sharing one evaluation: `eval` returns the terms of
/// each objective, and `analytic[j]` is the gradient of objective `j`. One
/// report per objective.
pub fn check_cloud_multi<F>(
    cloud: &GaussianCloud,
    analytic: &[CloudGradients],
    params: Option<&[usize]>,
    cfg: &GradCheckConfig,
    eval: F,
) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&GaussianCloud) -> Result<(Vec<Vec<f64>>, u64)>,
{
    let flat: Vec<Vec<f64>> = analytic.iter().map(CloudGradients::flatten).collect();
    let (_, base_sig) = eval(cloud)?;
    let all: Vec<usize> = (0..param_count(cloud)).collect();
    let list = params.unwrap_or(&all);
    let mut reports = vec![GradCheckReport::default(); analytic.len()];
    let mut work = cloud.clone();
    for &k in list {
        let orig = *param_mut(&mut work, k);
        let mut h = cfg.step;
        let mut found = None;
        for _ in 0..=cfg.max_halvings {
            *param_mut(&mut work, k) = orig + h;
            let (fp, sp) = eval(&work)?;
            *param_mut(&mut work, k) = orig - h;
            let (fm, sm) = eval(&work)?;
            *param_mut(&mut work, k) = orig;
            if sp == base_sig && sm == base_sig {
                found = Some((fp, fm, h));
                break;
            }
            h *= 0.5;
        }
        match found {
            Some((fp, fm, step)) => {
                let central = |p: &[Vec<f64>], m: &[Vec<f64>], h: f64| -> Vec<f64> {
                    (0..reports.len())
                        .map(|j| match (p.get(j), m.get(j)) {
                            (Some(p), Some(m)) => term_difference(p, m) / (2.0 * h),
                            _ => f64::NAN,
                        })
                        .collect()
                };
                let mut numeric = central(&fp, &fm, step);
                let rough = (0..numeric.len()).any(|j| !(relative_error(flat[j][k], numeric[j], cfg.floor) <= cfg.refine_above));
                if rough {
                    let half = 0.5 * step;
                    *param_mut(&mut work, k) = orig + half;
                    let (hp, sp) = eval(&work)?;
                    *param_mut(&mut work, k) = orig - half;
                    let (hm, sm) = eval(&work)?;
                    *param_mut(&mut work, k) = orig;
                    if sp == base_sig && sm == base_sig {
                        let fine = central(&hp, &hm, half);
                        numeric = fine.iter().zip(&numeric).map(|(f, c)| (4.0 * f - c) / 3.0).collect();
                    }
                }
                for (j, report) in reports.iter_mut().enumerate() {
                    let a = flat[j][k];
                    report.checks.push(ParamCheck {
                        index: k,
                        name: param_name(cloud, k),
                        analytic: a,
                        numeric: numeric[j],
                        rel_err: relative_error(a, numeric[j], cfg.floor),
                        step,
                    });
                }
            }
            None => reports.iter_mut().for_each(|r| r.kinks.push(k)),
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Vector3, Vector4};

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(1.0, 1.001, 1e-6) - 0.001 / 2.001).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn param_indexing_matches_flatten_order() {
        let mut c = GaussianCloud::empty();
        for i in 0..2 {
            let f = i as f64;
            c.push(Vector3::new(f, f + 0.1, f + 0.2), Vector4::new(1.0, f, 0.0, 0.0), Vector3::repeat(-f), f, Vector3::repeat(f));
        }
        c.set_sh_degree(1).unwrap();
        let mut g = CloudGradients::zeros(&c);
        for k in 0..param_count(&c) {
            *param_mut(&mut c, k) = k as f64;
        }
        g.positions.clone_from(&c.positions);
        g.rotations.clone_from(&c.rotations);
        g.log_scales.clone_from(&c.log_scales);
        g.opacity_logits.clone_from(&c.opacity_logits);
        g.colors.clone_from(&c.colors);
        g.sh_rest.clone_from(&c.sh_rest);
        let flat = g.flatten();
        for (k, v) in flat.iter().enumerate() {
            assert_eq!(*v, k as f64);
        }
        assert_eq!(param_name(&c, 10), "g0.opacity_logit");
        assert_eq!(param_name(&c, 28), "sh_rest[0][0]");
    }

    #[test]
    fn quadratic_objective_passes() {
        let mut c = GaussianCloud::empty();
        c.push(Vector3::new(0.5, -0.3, 2.0), Vector4::new(1.0, 0.0, 0.0, 0.0), Vector3::zeros(), 0.0, Vector3::repeat(0.2));
        let mut g = CloudGradients::zeros(&c);
        g.positions[0] = c.positions[0] * 2.0;
        let eval = |c: &GaussianCloud| Ok((vec![c.positions[0].norm_squared()], 0));
        let r = check_cloud(&c, &g, Some(&[0, 1, 2, 11]), &GradCheckConfig::default(), eval).unwrap();
        assert_eq!(r.checks.len(), 4);
        assert!(r.max_rel_err() < 1e-9);
    }

    #[test]
    fn branch_change_is_reported_as_kink() {
        let mut c = GaussianCloud::empty();
        c.push(Vector3::zeros(), Vector4::new(1.0, 0.0, 0.0, 0.0), Vector3::zeros(), 0.0, Vector3::zeros());
        let g = CloudGradients::zeros(&c);
        let eval = |c: &GaussianCloud| {
            let x = c.positions[0].x;
            Ok((vec![x.abs()], (x >= 0.0) as u64))
        };
        let cfg = GradCheckConfig { max_halvings: 3, ..Default::default() };
        let r = check_cloud(&c, &g, Some(&[0]), &cfg, eval).unwrap();
        assert_eq!(r.kinks, vec![0]);
    }

    #[test]
    fn richardson_refinement_removes_truncation_error() {
        let mut c = GaussianCloud::empty();
        c.push(Vector3::new(0.3, 0.0, 0.0), Vector4::new(1.0, 0.0, 0.0, 0.0), Vector3::zeros(), 0.0, Vector3::zeros());
        let mut g = CloudGradients::zeros(&c);
        g.positions[0].x = 40.0 * (40.0f64 * 0.3).cos();
        let eval = |c: &GaussianCloud| Ok((vec![(40.0 * c.positions[0].x).sin()], 0));
        let cfg = GradCheckConfig { step: 1e-3, ..Default::default() };
        let plain = GradCheckConfig { refine_above: f64::INFINITY, ..cfg };
        let rough = check_cloud(&c, &g, Some(&[0]), &plain, eval).unwrap().max_rel_err();
        let refined = check_cloud(&c, &g, Some(&[0]), &cfg, eval).unwrap().max_rel_err();
        assert!(rough > 1e-4, "{rough}");
        assert!(refined < 1e-7, "{refined}");
    }
}
