//! Normal consistency and normal smoothing terms.
//!
//! `rendered` is the blended camera-frame normal map; `from_depth` holds the
//! unit normals reconstructed from the rendered depth. Differences are
//! measured with the L1 norm.

use nalgebra::Vector3;

use crate::imageproc::DepthNormal;

use super::Signature;

#[inline]
fn l1(v: &Vector3<f64>) -> f64 {
    v.x.abs() + v.y.abs() + v.z.abs()
}

#[inline]
fn sign3(v: &Vector3<f64>) -> Vector3<f64> {
    v.map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
}

/// Edge-aware weight `(1 − ∇I)²` from the normalised target gradient.
pub fn edge_weights(gt_gradient: &[f64]) -> Vec<f64> {
    gt_gradient.iter().map(|g| (1.0 - g) * (1.0 - g)).collect()
}

#[derive(Debug, Clone, Default)]
pub struct NormalLoss {
    pub value: f64,
    /// Number of pixels (or pixel pairs) averaged over.
    pub count: usize,
}

/// Scatters `dL/dN̂` at a pixel into the depth gradient of its neighbours.
fn push_depth_grad(dn: &DepthNormal, g: &Vector3<f64>, depth_grad: &mut [f64]) {
    for k in 0..4 {
        depth_grad[dn.neighbors[k]] += g.dot(&dn.jacobian[k]);
    }
}

/// Mean over covered pixels with a depth normal of `δ·‖N̂ − Ñ‖₁`.
#[allow(clippy::too_many_arguments)]
pub fn loss_normal_consistency(
    rendered: &[Vector3<f64>],
    from_depth: &[Option<DepthNormal>],
    covered: &[bool],
    delta: &[f64],
    scale: f64,
    grad_normal: &mut [Vector3<f64>],
    grad_depth: &mut [f64],
    sig: &mut Signature,
) -> NormalLoss {
    let valid: Vec<usize> = (0..rendered.len()).filter(|&i| covered[i] && from_depth[i].is_some()).collect();
    if valid.is_empty() {
        return NormalLoss::default();
    }
    let inv = 1.0 / valid.len() as f64;
    let mut value = 0.0;
    for &i in &valid {
        let dn = from_depth[i].as_ref().expect("filtered above");
        let diff = dn.normal - rendered[i];
        value += delta[i] * l1(&diff);
        let s = sign3(&diff);
        sig.push_bits(&[s.x > 0.0, s.x < 0.0, s.y > 0.0, s.y < 0.0, s.z > 0.0, s.z < 0.0]);
        let g = s * (delta[i] * inv * scale);
        grad_normal[i] -= g;
        push_depth_grad(dn, &g, grad_depth);
    }
    NormalLoss { value: value * inv, count: valid.len() }
}

/// Mean over valid (pixel, right/down neighbour) pairs of
/// `δ_k · ReLU(‖N̂_k − N̂‖₁ − τ²) · [‖Ñ_k − Ñ‖₁ > τ]`. The gate is constant;
/// the gradient reaches the depth normals only.
#[allow(clippy::too_many_arguments)]
pub fn loss_normal_smooth(
    rendered: &[Vector3<f64>],
    from_depth: &[Option<DepthNormal>],
    covered: &[bool],
    delta: &[f64],
    tau: f64,
    width: usize,
    scale: f64,
    grad_depth: &mut [f64],
    sig: &mut Signature,
) -> NormalLoss {
    let n = rendered.len();
    let height = n / width;
    let ok = |i: usize| covered[i] && from_depth[i].is_some();
    let mut pairs = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !ok(i) {
                continue;
            }
            if x + 1 < width && ok(i + 1) {
                pairs.push((i, i + 1));
            }
            if y + 1 < height && ok(i + width) {
                pairs.push((i, i + width));
            }
        }
    }
    if pairs.is_empty() {
        return NormalLoss::default();
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut value = 0.0;
    for &(i, k) in &pairs {
        let gate = l1(&(rendered[k] - rendered[i])) > tau;
        let (ni, nk) = (from_depth[i].as_ref().unwrap(), from_depth[k].as_ref().unwrap());
        let diff = nk.normal - ni.normal;
        let excess = l1(&diff) - tau * tau;
        let active = gate && excess > 0.0;
        sig.push_bits(&[gate, excess > 0.0]);
        if !active {
            continue;
        }
        value += delta[k] * excess;
        let s = sign3(&diff);
        sig.push_bits(&[s.x > 0.0, s.x < 0.0, s.y > 0.0, s.y < 0.0, s.z > 0.0, s.z < 0.0]);
        let g = s * (delta[k] * inv * scale);
        push_depth_grad(nk, &g, grad_depth);
        push_depth_grad(ni, &(-g), grad_depth);
    }
    NormalLoss { value: value * inv, count: pairs.len() }
}
