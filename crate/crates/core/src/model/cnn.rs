//! Local-feature branch: a compact convolutional stem of MBConv stages,
//! CBAM channel and spatial attention, and a dense projection to the branch
//! feature width.
//!
//! Stage 0 is a plain strided convolution; later stages are MBConv blocks
//! (pointwise expand, depthwise 3x3, pointwise project — linear inside, with
//! a Swish between stages). Stage outputs are recorded by name for Grad-CAM.

use rand::rngs::StdRng;

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, ReduceKind, TensorId};
use crate::model::{init_conv, init_proj, init_zeros, Binder, ModelConfig, ModelParams, Phase};
use crate::tensor::Tensor;

/// Stage-0 kernel: wide enough to cover its stride.
fn stage0_kernel(stride: usize) -> (usize, usize) {
    if stride >= 3 {
        (5, 2)
    } else {
        (3, 1)
    }
}

pub fn init_params(cfg: &ModelConfig, params: &mut ModelParams, rng: &mut StdRng) {
    let widths = &cfg.stem_widths;
    let (k0, _) = stage0_kernel(cfg.stem_strides[0]);
    init_conv(params, "cnn.stem.stage0.conv.w", &[k0, k0, 3, widths[0]], rng);
    init_zeros(params, "cnn.stem.stage0.conv.b", &[widths[0]]);
    for i in 1..widths.len() {
        let cin = widths[i - 1];
        let cout = widths[i];
        let exp = cin * cfg.mbconv_expansion;
        let p = format!("cnn.stem.stage{}", i);
        init_conv(params, &format!("{}.expand.w", p), &[1, 1, cin, exp], rng);
        init_zeros(params, &format!("{}.expand.b", p), &[exp]);
        init_conv(params, &format!("{}.depthwise.w", p), &[3, 3, 1, exp], rng);
        init_zeros(params, &format!("{}.depthwise.b", p), &[exp]);
        init_conv(params, &format!("{}.project.w", p), &[1, 1, exp, cout], rng);
        init_zeros(params, &format!("{}.project.b", p), &[cout]);
    }
    let c = *widths.last().unwrap();
    let hidden = cbam_hidden(c, cfg.cbam_reduction);
    init_proj(params, "cnn.cbam.mlp.w1", &[c, hidden], rng);
    init_zeros(params, "cnn.cbam.mlp.b1", &[hidden]);
    init_proj(params, "cnn.cbam.mlp.w2", &[hidden, c], rng);
    init_zeros(params, "cnn.cbam.mlp.b2", &[c]);
    init_conv(params, "cnn.cbam.spatial.w", &[7, 7, 2, 1], rng);
    init_zeros(params, "cnn.cbam.spatial.b", &[1]);
    init_proj(params, "cnn.proj.w", &[c, cfg.feature_dim], rng);
    init_zeros(params, "cnn.proj.b", &[cfg.feature_dim]);
}

/// Channel-attention MLP hidden width: channels / reduction, rounded up, >= 1.
pub fn cbam_hidden(channels: usize, reduction: usize) -> usize {
    channels.div_ceil(reduction).max(1)
}

/// Inverted-bottleneck block: 1x1 expand, depthwise 3x3 (carrying the
/// stride), 1x1 project; the residual joins when the stride is 1 and widths
/// match. All three convolutions are linear.
#[allow(clippy::too_many_arguments)]
pub fn mbconv_block(
    g: &mut Graph,
    x: TensorId,
    expand_w: TensorId,
    expand_b: TensorId,
    depthwise_w: TensorId,
    depthwise_b: TensorId,
    project_w: TensorId,
    project_b: TensorId,
    stride: usize,
) -> Result<TensorId> {
    let cin = self_channels(g, x);
    let exp_channels = g.shape(expand_w)[3];
    let h = g.conv2d(x, expand_w, 1, 0, 1)?;
    let h = g.add(h, expand_b)?;
    let h = g.conv2d(h, depthwise_w, stride, 1, exp_channels)?;
    let h = g.add(h, depthwise_b)?;
    let h = g.conv2d(h, project_w, 1, 0, 1)?;
    let h = g.add(h, project_b)?;
    let cout = g.shape(h)[2];
    if stride == 1 && cin == cout {
        g.add(h, x)
    } else {
        Ok(h)
    }
}

fn self_channels(g: &Graph, x: TensorId) -> usize {
    g.shape(x)[2]
}

/// Channel attention: Mc = sigma(MLP(GAP(f)) + MLP(GMP(f))), Fc = Mc (x) f.
/// Returns (Mc as [1,1,c], Fc).
pub fn channel_attention(
    g: &mut Graph,
    f: TensorId,
    mlp_w1: TensorId,
    mlp_b1: TensorId,
    mlp_w2: TensorId,
    mlp_b2: TensorId,
) -> Result<(TensorId, TensorId)> {
    let c = g.shape(f)[2];
    let mlp = |g: &mut Graph, pooled: TensorId| -> Result<TensorId> {
        let row = g.reshape(pooled, &[1, c])?;
        let h = g.matmul(row, mlp_w1)?;
        let h = g.add(h, mlp_b1)?;
        let h = g.activation(h, Activation::Relu);
        let h = g.matmul(h, mlp_w2)?;
        g.add(h, mlp_b2)
    };
    let gap = g.reduce(f, ReduceKind::Gap, &[0, 1])?;
    let gmp = g.reduce(f, ReduceKind::Gmp, &[0, 1])?;
    let a = mlp(g, gap)?;
    let b = mlp(g, gmp)?;
    let sum = g.add(a, b)?;
    let mc = g.activation(sum, Activation::Sigmoid);
    let mc = g.reshape(mc, &[1, 1, c])?;
    let fc = g.mul(f, mc)?;
    Ok((mc, fc))
}

/// Spatial attention: channel-mean and channel-max maps concatenated (average
/// first), 7x7 conv with padding 3, sigmoid; Fout = Ms (x) fc.
/// Returns (Ms as [h,w,1], Fout).
pub fn spatial_attention(
    g: &mut Graph,
    fc: TensorId,
    conv_w: TensorId,
    conv_b: TensorId,
) -> Result<(TensorId, TensorId)> {
    let (h, w) = (g.shape(fc)[0], g.shape(fc)[1]);
    let avg = g.reduce(fc, ReduceKind::Gap, &[2])?;
    let avg = g.reshape(avg, &[h, w, 1])?;
    let max = g.reduce(fc, ReduceKind::Gmp, &[2])?;
    let max = g.reshape(max, &[h, w, 1])?;
    let stacked = g.concat(&[avg, max], 2)?;
    let conv = g.conv2d(stacked, conv_w, 1, 3, 1)?;
    let conv = g.add(conv, conv_b)?;
    let ms = g.activation(conv, Activation::Sigmoid);
    let fout = g.mul(fc, ms)?;
    Ok((ms, fout))
}

/// Full branch: stem stages, CBAM, global average pool, dropout, dense
/// projection to the branch feature. Returns the `[1, feature_dim]` feature
/// row and the named stem stage outputs.
pub fn branch_forward(
    g: &mut Graph,
    binder: &mut Binder,
    cfg: &ModelConfig,
    x: TensorId,
    phase: &mut Phase,
) -> Result<(TensorId, Vec<(String, TensorId)>)> {
    let shape = g.shape(x).to_vec();
    if shape != [cfg.input_hw, cfg.input_hw, 3] {
        return Err(Error::Shape(format!(
            "cnn branch expects [{0},{0},3] input, got {1:?}",
            cfg.input_hw, shape
        )));
    }
    let mut acts = Vec::new();
    // ink-positive polarity: strokes are dark on light paper, and stroke
    // detectors (and their activation maps) should fire on ink, not paper
    let neg = g.scale(x, -1.0);
    let ones = g.constant(Tensor::from_vec(vec![1], vec![1.0]).expect("scalar"));
    let x = g.add(neg, ones)?;
    let (_, pad0) = stage0_kernel(cfg.stem_strides[0]);
    let w0 = binder.bind(g, "cnn.stem.stage0.conv.w");
    let b0 = binder.bind(g, "cnn.stem.stage0.conv.b");
    let mut h = g.conv2d(x, w0, cfg.stem_strides[0], pad0, 1)?;
    h = g.add(h, b0)?;
    h = g.activation(h, Activation::Swish);
    acts.push(("cnn.stem.stage0".to_string(), h));
    for i in 1..cfg.stem_widths.len() {
        let p = format!("cnn.stem.stage{}", i);
        let ew = binder.bind(g, &format!("{}.expand.w", p));
        let eb = binder.bind(g, &format!("{}.expand.b", p));
        let dw = binder.bind(g, &format!("{}.depthwise.w", p));
        let db = binder.bind(g, &format!("{}.depthwise.b", p));
        let pw = binder.bind(g, &format!("{}.project.w", p));
        let pb = binder.bind(g, &format!("{}.project.b", p));
        h = mbconv_block(g, h, ew, eb, dw, db, pw, pb, cfg.stem_strides[i])?;
        h = g.activation(h, Activation::Swish);
        acts.push((p, h));
    }
    let w1 = binder.bind(g, "cnn.cbam.mlp.w1");
    let b1 = binder.bind(g, "cnn.cbam.mlp.b1");
    let w2 = binder.bind(g, "cnn.cbam.mlp.w2");
    let b2 = binder.bind(g, "cnn.cbam.mlp.b2");
    let (_, fc) = channel_attention(g, h, w1, b1, w2, b2)?;
    let sw = binder.bind(g, "cnn.cbam.spatial.w");
    let sb = binder.bind(g, "cnn.cbam.spatial.b");
    let (_, fout) = spatial_attention(g, fc, sw, sb)?;
    let pooled = g.reduce(fout, ReduceKind::Gap, &[0, 1])?;
    let c = g.shape(pooled)[0];
    let mut row = g.reshape(pooled, &[1, c])?;
    if phase.is_train() && cfg.cnn_dropout > 0.0 {
        let seed = phase.next_seed();
        row = g.dropout(row, cfg.cnn_dropout, seed)?;
    }
    let pw = binder.bind(g, "cnn.proj.w");
    let pb = binder.bind(g, "cnn.proj.b");
    let out = g.matmul(row, pw)?;
    let out = g.add(out, pb)?;
    Ok((out, acts))
}
