//! Adam with per-group learning rates over a [`GaussianCloud`].

use crate::error::{Error, Result};
use crate::gaussians::{sh_rest_count, GaussianCloud};
use crate::rasterizer::CloudGradients;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

/// First and second moments of one parameter tensor, flattened.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One bias-corrected Adam update of `params` at step `t` (1-based).
pub fn adam_update(params: &mut [f64], grads: &[f64], state: &mut Moments, lr: f64, t: u64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if t == 0 {
        return Err(Error::BadConfig("Adam steps are 1-based".into()));
    }
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        params[i] -= lr * mh / (vh.sqrt() + EPSILON);
    }
    Ok(())
}

/// Learning rate per parameter group for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub position: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub sh: f64,
}

pub const GROUPS: [&str; 6] = ["positions", "rotations", "log_scales", "opacity_logits", "colors", "sh_rest"];
const WIDTHS: [usize; 5] = [3, 4, 3, 1, 3];

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// One entry per group in [`GROUPS`] order.
    pub moments: [Moments; 6],
    pub step: u64,
}

fn flat3<const D: usize>(v: &[nalgebra::SVector<f64, D>]) -> Vec<f64> {
    v.iter().flat_map(|x| x.iter().copied()).collect()
}

fn unflat<const D: usize>(src: &[f64], dst: &mut [nalgebra::SVector<f64, D>]) {
    for (d, c) in dst.iter_mut().zip(src.chunks_exact(D)) {
        *d = nalgebra::SVector::<f64, D>::from_column_slice(c);
    }
}

impl AdamState {
    pub fn new(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        let mut moments: [Moments; 6] = Default::default();
        for (k, w) in WIDTHS.iter().enumerate() {
            moments[k] = Moments::zeros(n * w);
        }
        moments[5] = Moments::zeros(cloud.sh_rest.len() * 3);
        Self { moments, step: 0 }
    }

    fn widths(sh_degree: usize) -> [usize; 6] {
        [3, 4, 3, 1, 3, 3 * sh_rest_count(sh_degree)]
    }

    /// Keeps the moments of primitives with `keep[i]`.
    pub fn retain(&mut self, keep: &[bool], sh_degree: usize) {
        for (mom, w) in self.moments.iter_mut().zip(Self::widths(sh_degree)) {
            if w == 0 {
                continue;
            }
            for buf in [&mut mom.m, &mut mom.v] {
                let mut out = Vec::with_capacity(buf.len());
                for (i, k) in keep.iter().enumerate() {
                    if *k {
                        out.extend_from_slice(&buf[i * w..(i + 1) * w]);
                    }
                }
                *buf = out;
            }
        }
    }

    /// Zero moments for `count` appended primitives.
    pub fn extend(&mut self, count: usize, sh_degree: usize) {
        for (mom, w) in self.moments.iter_mut().zip(Self::widths(sh_degree)) {
            mom.m.extend(std::iter::repeat_n(0.0, count * w));
            mom.v.extend(std::iter::repeat_n(0.0, count * w));
        }
    }

    /// Applies one step to every group, then renormalises quaternions and
    /// clamps scales. A non-finite gradient aborts the step before any
    /// parameter changes.
    pub fn step(&mut self, cloud: &mut GaussianCloud, g: &CloudGradients, lr: &GroupRates) -> Result<()> {
        let grads = [
            flat3(&g.positions),
            flat3(&g.rotations),
            flat3(&g.log_scales),
            g.opacity_logits.clone(),
            flat3(&g.colors),
            flat3(&g.sh_rest),
        ];
        for (k, gr) in grads.iter().enumerate() {
            if gr.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(GROUPS[k]));
            }
            if gr.len() != self.moments[k].m.len() {
                return Err(Error::ShapeMismatch(format!(
                    "group {}: {} gradients for {} moments",
                    GROUPS[k],
                    gr.len(),
                    self.moments[k].m.len()
                )));
            }
        }
        self.step += 1;
        let t = self.step;
        let rates = [lr.position, lr.rotation, lr.log_scale, lr.opacity, lr.color, lr.sh];

        let mut p = flat3(&cloud.positions);
        adam_update(&mut p, &grads[0], &mut self.moments[0], rates[0], t)?;
        unflat(&p, &mut cloud.positions);
        let mut p = flat3(&cloud.rotations);
        adam_update(&mut p, &grads[1], &mut self.moments[1], rates[1], t)?;
        unflat(&p, &mut cloud.rotations);
        let mut p = flat3(&cloud.log_scales);
        adam_update(&mut p, &grads[2], &mut self.moments[2], rates[2], t)?;
        unflat(&p, &mut cloud.log_scales);
        adam_update(&mut cloud.opacity_logits, &grads[3], &mut self.moments[3], rates[3], t)?;
        let mut p = flat3(&cloud.colors);
        adam_update(&mut p, &grads[4], &mut self.moments[4], rates[4], t)?;
        unflat(&p, &mut cloud.colors);
        let mut p = flat3(&cloud.sh_rest);
        adam_update(&mut p, &grads[5], &mut self.moments[5], rates[5], t)?;
        unflat(&p, &mut cloud.sh_rest);

        cloud.project_constraints();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::init_random_sphere;
    use nalgebra::Vector3;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = Moments::zeros(2);
        adam_update(&mut p, &[0.0, 0.0], &mut s, 0.1, 1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let mut cloud = init_random_sphere(5, 1.0, Vector3::zeros(), 1).unwrap();
        let before = cloud.clone();
        let mut st = AdamState::new(&cloud);
        let g = CloudGradients::zeros(&cloud);
        let lr = GroupRates { position: 0.1, rotation: 0.1, log_scale: 0.1, opacity: 0.1, color: 0.1, sh: 0.1 };
        st.step(&mut cloud, &g, &lr).unwrap();
        assert_eq!(st.step, 1);
        assert_eq!(cloud, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the update is lr·g/|g|.
        for g in [0.3, -7.0, 1e-6] {
            let mut p = vec![0.5];
            let mut s = Moments::zeros(1);
            adam_update(&mut p, &[g], &mut s, 0.01, 1).unwrap();
            assert!((p[0] - (0.5 - 0.01 * g.signum())).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut cloud = init_random_sphere(3, 1.0, Vector3::zeros(), 1).unwrap();
        let before = cloud.clone();
        let mut st = AdamState::new(&cloud);
        let mut g = CloudGradients::zeros(&cloud);
        g.positions[0] = Vector3::new(1.0, 0.0, 0.0);
        g.colors[1].y = f64::NAN;
        let lr = GroupRates { position: 0.1, rotation: 0.1, log_scale: 0.1, opacity: 0.1, color: 0.1, sh: 0.1 };
        assert!(matches!(st.step(&mut cloud, &g, &lr), Err(Error::NonFiniteGradient("colors"))));
        assert_eq!(cloud, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![0.0; 3];
        assert!(matches!(adam_update(&mut p, &[1.0], &mut Moments::zeros(3), 0.1, 1), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn quaternions_stay_unit() {
        let mut cloud = init_random_sphere(4, 1.0, Vector3::zeros(), 2).unwrap();
        let mut st = AdamState::new(&cloud);
        let mut g = CloudGradients::zeros(&cloud);
        g.rotations.iter_mut().for_each(|q| *q = nalgebra::Vector4::new(0.3, -1.0, 2.0, 0.5));
        let lr = GroupRates { position: 0.1, rotation: 0.5, log_scale: 0.1, opacity: 0.1, color: 0.1, sh: 0.1 };
        for _ in 0..5 {
            st.step(&mut cloud, &g, &lr).unwrap();
        }
        assert!(cloud.rotations.iter().all(|q| (q.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn retain_and_extend_track_shapes() {
        let mut cloud = init_random_sphere(4, 1.0, Vector3::zeros(), 2).unwrap();
        cloud.set_sh_degree(1).unwrap();
        let mut st = AdamState::new(&cloud);
        st.moments[0].m[3] = 9.0;
        st.retain(&[false, true, true, false], 1);
        assert_eq!(st.moments[0].m.len(), 6);
        assert_eq!(st.moments[0].m[0], 9.0);
        assert_eq!(st.moments[5].m.len(), 2 * 9);
        st.extend(3, 1);
        assert_eq!(st.moments[1].v.len(), 5 * 4);
        assert_eq!(st.moments[5].v.len(), 5 * 9);
    }
}
