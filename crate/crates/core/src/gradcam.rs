//! Grad-CAM: gradient-weighted class activation heatmaps over a stem feature
//! map. Channel weights are the spatial means of the target-logit gradient;
//! the weighted activation sum is rectified, bilinearly upsampled to input
//! resolution, and min-max normalized.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::imageproc::{ChannelOrder, Image};
use crate::model::{Model, Phase};
use crate::tensor::Tensor;

/// Heatmap at input resolution, values in [0,1], row-major.
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Weighted-activation CAM at feature-map resolution:
/// cam(y,x) = ReLU(sum_k alpha_k A_k(y,x)) with alpha_k the spatial mean of
/// the gradient for channel k.
pub fn cam_from_activations(acts: &[f64], grads: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let mut alpha = vec![0.0; k];
    for px in 0..h * w {
        for c in 0..k {
            alpha[c] += grads[px * k + c];
        }
    }
    for a in alpha.iter_mut() {
        *a /= (h * w) as f64;
    }
    (0..h * w)
        .map(|px| {
            let mut v = 0.0;
            for c in 0..k {
                v += alpha[c] * acts[px * k + c];
            }
            v.max(0.0)
        })
        .collect()
}

/// Corner-aligned bilinear upsampling of a real-valued map.
pub fn upsample_bilinear(src: &[f64], sh: usize, sw: usize, oh: usize, ow: usize) -> Vec<f64> {
    let scale_r = if oh > 1 { (sh as f64 - 1.0) / (oh as f64 - 1.0) } else { 0.0 };
    let scale_c = if ow > 1 { (sw as f64 - 1.0) / (ow as f64 - 1.0) } else { 0.0 };
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let sr = r as f64 * scale_r;
            let sc = c as f64 * scale_c;
            let r0 = sr.floor() as usize;
            let c0 = sc.floor() as usize;
            let r1 = (r0 + 1).min(sh - 1);
            let c1 = (c0 + 1).min(sw - 1);
            let fr = sr - r0 as f64;
            let fc = sc - c0 as f64;
            out[r * ow + c] = src[r0 * sw + c0] * (1.0 - fr) * (1.0 - fc)
                + src[r0 * sw + c1] * (1.0 - fr) * fc
                + src[r1 * sw + c0] * fr * (1.0 - fc)
                + src[r1 * sw + c1] * fr * fc;
        }
    }
    out
}

/// Min-max normalization to [0,1]; an all-zero map stays all-zero and a
/// constant positive map saturates to ones.
pub fn minmax_normalize(values: &mut [f64]) {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else if (max - min).abs() < 1e-300 {
        values.iter_mut().for_each(|v| *v = 1.0);
    } else {
        values.iter_mut().for_each(|v| *v = (*v - min) / (max - min));
    }
}

/// Full Grad-CAM for one `[H,W,3]` input in [0,1]. `layer` must name a stem
/// stage (see [`Model::gradcam_layers`]).
pub fn grad_cam(model: &Model, image: &Tensor, target_class: usize, layer: &str) -> Result<Heatmap> {
    let valid = model.gradcam_layers();
    if !valid.iter().any(|l| l == layer) {
        return Err(Error::Config(format!(
            "unknown Grad-CAM layer {}; valid layers: {}",
            layer,
            valid.join(", ")
        )));
    }
    if target_class >= model.cfg.classes {
        return Err(Error::Config(format!(
            "target class {} out of range (model has {} classes)",
            target_class, model.cfg.classes
        )));
    }
    let mut g = Graph::new();
    let mut phase = Phase::Eval;
    let (fwd, _binder) = model.forward_batch(&mut g, std::slice::from_ref(image), &mut phase, true)?;
    let act_id = fwd
        .stem_activations
        .iter()
        .find(|(name, _)| name == layer)
        .map(|(_, id)| *id)
        .expect("validated layer name is registered");
    let logit = g.narrow(fwd.logits, 1, target_class, 1)?;
    g.backward(logit)?;
    let shape = g.shape(act_id).to_vec();
    let (h, w, k) = (shape[0], shape[1], shape[2]);
    let acts = g.data(act_id).to_vec();
    let grads = g
        .grad(act_id)
        .map(|s| s.to_vec())
        .unwrap_or_else(|| vec![0.0; acts.len()]);
    let cam = cam_from_activations(&acts, &grads, h, w, k);
    let (oh, ow) = (image.shape[0], image.shape[1]);
    let mut up = upsample_bilinear(&cam, h, w, oh, ow);
    minmax_normalize(&mut up);
    Ok(Heatmap {
        height: oh,
        width: ow,
        values: up,
    })
}

/// Alpha-blends the heatmap (red-hot) over the input at 0.5 for a PNG dump.
pub fn overlay(image: &Tensor, heat: &Heatmap) -> Image {
    let (h, w) = (heat.height, heat.width);
    let mut out = Image::new(h, w, 3, ChannelOrder::Rgb, 0);
    for r in 0..h {
        for c in 0..w {
            let v = heat.values[r * w + c];
            let hot = [255.0 * v, 40.0 * v, 255.0 * (1.0 - v) * 0.25];
            for ch in 0..3 {
                let base = image.data[(r * w + c) * 3 + ch] * 255.0;
                let px = 0.5 * base + 0.5 * hot[ch];
                out.set(r, c, ch, px.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Raw 16-bit heatmap as binary PGM (P5, maxval 65535, big-endian samples per
/// the netpbm format).
pub fn write_pgm16(path: &Path, heat: &Heatmap) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n65535\n", heat.width, heat.height).into_bytes();
    for &v in &heat.values {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}
