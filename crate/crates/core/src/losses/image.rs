//! Edge-aware image reconstruction term.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::imageproc::{ssim, GradientMap, Image};

use super::Signature;

#[derive(Debug, Clone)]
pub struct ImageLoss {
    pub value: f64,
    pub l1: f64,
    pub ssim: f64,
    pub edge: f64,
    /// `dL/d rendered` per pixel.
    pub grad: Vec<Vector3<f64>>,
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(1 − β1)·L1 + β1·(1 − SSIM) + β2·L1(∇rendered − ∇gt)`, with means taken
/// over pixels (and channels for the colour terms).
pub fn loss_image(rendered: &Image, gt: &Image, beta1: f64, beta2: f64, sig: &mut Signature) -> Result<ImageLoss> {
    if !rendered.same_shape(gt) {
        return Err(Error::ShapeMismatch(format!(
            "rendered {}x{}x{} vs target {}x{}x{}",
            rendered.width, rendered.height, rendered.channels, gt.width, gt.height, gt.channels
        )));
    }
    let n = rendered.data.len() as f64;
    let mut g = vec![0.0; rendered.data.len()];
    let mut l1 = 0.0;
    for (i, (a, b)) in rendered.data.iter().zip(&gt.data).enumerate() {
        let d = a - b;
        l1 += d.abs();
        g[i] = (1.0 - beta1) * sign(d) / n;
        sig.push_bits(&[d > 0.0, d < 0.0]);
    }
    l1 /= n;

    let mut ssim_mean = 1.0;
    if beta1 > 0.0 {
        let s = ssim(rendered, gt)?;
        ssim_mean = s.mean;
        for (gi, v) in g.iter_mut().zip(s.backward_mean(rendered, gt, -beta1)) {
            *gi += v;
        }
    }

    let mut edge = 0.0;
    if beta2 > 0.0 {
        let gr = GradientMap::new(rendered);
        let gg = GradientMap::new(gt);
        let m = gr.values.len() as f64;
        let mut up = vec![0.0; gr.values.len()];
        for (i, (a, b)) in gr.values.iter().zip(&gg.values).enumerate() {
            let d = a - b;
            edge += d.abs();
            up[i] = beta2 * sign(d) / m;
            sig.push_bits(&[d > 0.0, d < 0.0]);
        }
        edge /= m;
        sig.push(gr.argmax() as u64);
        for (gi, v) in g.iter_mut().zip(gr.backward(rendered, &up)) {
            *gi += v;
        }
    }

    let value = (1.0 - beta1) * l1 + beta1 * (1.0 - ssim_mean) + beta2 * edge;
    let ch = rendered.channels;
    let grad = (0..rendered.width * rendered.height)
        .map(|i| {
            let p = &g[i * ch..(i + 1) * ch];
            if ch >= 3 {
                Vector3::new(p[0], p[1], p[2])
            } else {
                Vector3::repeat(p[0])
            }
        })
        .collect();
    Ok(ImageLoss { value, l1, ssim: ssim_mean, edge, grad })
}
