//! Hybrid-feature branch: Macaron-style Conformer blocks over a patch-token
//! sequence. Block order is half-step FFN, self-attention, convolution
//! module, half-step FFN, with pre-norm inside each residual path and one
//! closing LayerNorm per block.

use rand::rngs::StdRng;

use crate::error::Result;
use crate::graph::{Activation, BatchStats, Graph, ReduceKind, TensorId};
use crate::model::{
    init_bn, init_ln, init_proj, init_zeros, vit, Binder, ModelConfig, ModelParams, Phase,
};
use crate::tensor::Tensor;

pub fn init_params(cfg: &ModelConfig, params: &mut ModelParams, rng: &mut StdRng) {
    let d = cfg.embed_dim;
    init_proj(params, "conf.embed.e", &[cfg.patch_len(), d], rng);
    init_zeros(params, "conf.embed.b", &[d]);
    init_proj(params, "conf.embed.pos", &[cfg.token_count(), d], rng);
    let dk = d / cfg.heads;
    for i in 0..cfg.conf_depth {
        let p = format!("conf.block{}", i);
        for ffn in ["ffn1", "ffn2"] {
            init_ln(params, &format!("{}.{}.ln", p, ffn), d);
            init_proj(params, &format!("{}.{}.w1", p, ffn), &[d, cfg.conf_ffn_dim], rng);
            init_zeros(params, &format!("{}.{}.b1", p, ffn), &[cfg.conf_ffn_dim]);
            init_proj(params, &format!("{}.{}.w2", p, ffn), &[cfg.conf_ffn_dim, d], rng);
            init_zeros(params, &format!("{}.{}.b2", p, ffn), &[d]);
        }
        init_ln(params, &format!("{}.attn.ln", p), d);
        for h in 0..cfg.heads {
            init_proj(params, &format!("{}.attn.h{}.wq", p, h), &[d, dk], rng);
            init_proj(params, &format!("{}.attn.h{}.wk", p, h), &[d, dk], rng);
            init_proj(params, &format!("{}.attn.h{}.wv", p, h), &[d, dk], rng);
        }
        init_proj(params, &format!("{}.attn.wo", p), &[d, d], rng);
        init_ln(params, &format!("{}.conv.ln", p), d);
        init_proj(params, &format!("{}.conv.pw1.w", p), &[d, 2 * d], rng);
        init_zeros(params, &format!("{}.conv.pw1.b", p), &[2 * d]);
        params.insert(
            &format!("{}.conv.dw.w", p),
            Tensor::trunc_normal(&[cfg.conf_conv_kernel, 1, 1, 2 * d], (2.0 / cfg.conf_conv_kernel as f64).sqrt(), rng),
            true,
        );
        init_zeros(params, &format!("{}.conv.dw.b", p), &[2 * d]);
        init_bn(params, &format!("{}.conv.bn", p), 2 * d);
        init_proj(params, &format!("{}.conv.pw2.w", p), &[2 * d, d], rng);
        init_zeros(params, &format!("{}.conv.pw2.b", p), &[d]);
        init_ln(params, &format!("{}.ln_out", p), d);
    }
    init_proj(params, "conf.proj.w", &[d, cfg.feature_dim], rng);
    init_zeros(params, "conf.proj.b", &[cfg.feature_dim]);
}

/// Half-step feed-forward residual: x + (1/2)(Swish(x W_a + b_a) W_b + b_b).
pub fn macaron_ffn_half(
    g: &mut Graph,
    x: TensorId,
    w_a: TensorId,
    b_a: TensorId,
    w_b: TensorId,
    b_b: TensorId,
) -> Result<TensorId> {
    let path = ffn_half_path(g, x, w_a, b_a, w_b, b_b)?;
    g.add(x, path)
}

fn ffn_half_path(
    g: &mut Graph,
    x: TensorId,
    w_a: TensorId,
    b_a: TensorId,
    w_b: TensorId,
    b_b: TensorId,
) -> Result<TensorId> {
    let h = g.matmul(x, w_a)?;
    let h = g.add(h, b_a)?;
    let h = g.activation(h, Activation::Swish);
    let h = g.matmul(h, w_b)?;
    let h = g.add(h, b_b)?;
    Ok(g.scale(h, 0.5))
}

/// Parameter handles for one convolution module.
pub struct ConvModuleIds {
    pub pw1_w: TensorId,
    pub pw1_b: TensorId,
    pub dw_w: TensorId,
    pub dw_b: TensorId,
    pub bn_gamma: TensorId,
    pub bn_beta: TensorId,
    pub pw2_w: TensorId,
    pub pw2_b: TensorId,
}

/// Batch-norm dispatch for the conv module: train computes token-axis
/// statistics (recorded under the given prefix), eval consumes running ones.
pub enum ConvBnMode {
    Train { prefix: String },
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

/// Depthwise 1-D convolution along the token axis via explicit zero padding:
/// tokens are padded, viewed as a [N+2p, 1, C] map, and convolved per
/// channel.
fn depthwise_tokens(g: &mut Graph, x: TensorId, dw_w: TensorId, kernel: usize) -> Result<TensorId> {
    let (n, c) = (g.shape(x)[0], g.shape(x)[1]);
    let pad = kernel / 2;
    let padded = if pad > 0 {
        let zeros = g.constant(Tensor::zeros(&[pad, c]));
        g.concat(&[zeros, x, zeros], 0)?
    } else {
        x
    };
    let as_map = g.reshape(padded, &[n + 2 * pad, 1, c])?;
    let conv = g.conv2d(as_map, dw_w, 1, 0, c)?;
    g.reshape(conv, &[n, c])
}

fn conv_module_path(
    g: &mut Graph,
    x: TensorId,
    ids: &ConvModuleIds,
    kernel: usize,
    bn_eps: f64,
    mode: &ConvBnMode,
    updates: &mut Vec<(String, BatchStats)>,
) -> Result<TensorId> {
    let h = g.matmul(x, ids.pw1_w)?;
    let h = g.add(h, ids.pw1_b)?;
    let gate = g.activation(h, Activation::Gelu);
    let dw = depthwise_tokens(g, gate, ids.dw_w, kernel)?;
    let dw = g.add(dw, ids.dw_b)?;
    let normed = match mode {
        ConvBnMode::Train { prefix } => {
            let (y, stats) = g.batch_norm_train(dw, ids.bn_gamma, ids.bn_beta, bn_eps)?;
            updates.push((prefix.clone(), stats));
            y
        }
        ConvBnMode::Eval { mean, var } => {
            g.batch_norm_eval(dw, ids.bn_gamma, ids.bn_beta, mean, var, bn_eps)?
        }
    };
    let sw = g.activation(normed, Activation::Swish);
    let h = g.matmul(sw, ids.pw2_w)?;
    g.add(h, ids.pw2_b)
}

/// Convolution module with its residual: pointwise expand to 2d, GELU,
/// depthwise along tokens, batch norm, Swish, pointwise back to d, plus x.
pub fn conformer_conv_module(
    g: &mut Graph,
    x: TensorId,
    ids: &ConvModuleIds,
    kernel: usize,
    bn_eps: f64,
    mode: &ConvBnMode,
    updates: &mut Vec<(String, BatchStats)>,
) -> Result<TensorId> {
    if kernel % 2 == 0 {
        return Err(crate::error::Error::Config(format!(
            "depthwise kernel width must be odd, got {}",
            kernel
        )));
    }
    let path = conv_module_path(g, x, ids, kernel, bn_eps, mode, updates)?;
    g.add(x, path)
}

fn bind_conv_ids(g: &mut Graph, binder: &mut Binder, prefix: &str) -> ConvModuleIds {
    ConvModuleIds {
        pw1_w: binder.bind(g, &format!("{}.pw1.w", prefix)),
        pw1_b: binder.bind(g, &format!("{}.pw1.b", prefix)),
        dw_w: binder.bind(g, &format!("{}.dw.w", prefix)),
        dw_b: binder.bind(g, &format!("{}.dw.b", prefix)),
        bn_gamma: binder.bind(g, &format!("{}.bn.gamma", prefix)),
        bn_beta: binder.bind(g, &format!("{}.bn.beta", prefix)),
        pw2_w: binder.bind(g, &format!("{}.pw2.w", prefix)),
        pw2_b: binder.bind(g, &format!("{}.pw2.b", prefix)),
    }
}

fn pre_norm(
    g: &mut Graph,
    binder: &mut Binder,
    prefix: &str,
    x: TensorId,
    eps: f64,
) -> Result<TensorId> {
    let gamma = binder.bind(g, &format!("{}.gamma", prefix));
    let beta = binder.bind(g, &format!("{}.beta", prefix));
    g.layer_norm(x, gamma, beta, eps)
}

/// One full block: each sub-module reads a pre-normed copy of its input and
/// adds its (half-step, for the FFNs) contribution back; a final LayerNorm
/// closes the block.
pub fn conformer_block(
    g: &mut Graph,
    binder: &mut Binder,
    cfg: &ModelConfig,
    prefix: &str,
    x: TensorId,
    phase: &Phase,
    bn_updates: &mut Vec<(String, BatchStats)>,
) -> Result<TensorId> {
    // first half-step FFN
    let normed = pre_norm(g, binder, &format!("{}.ffn1.ln", prefix), x, cfg.ln_eps)?;
    let w1 = binder.bind(g, &format!("{}.ffn1.w1", prefix));
    let b1 = binder.bind(g, &format!("{}.ffn1.b1", prefix));
    let w2 = binder.bind(g, &format!("{}.ffn1.w2", prefix));
    let b2 = binder.bind(g, &format!("{}.ffn1.b2", prefix));
    let path = ffn_half_path(g, normed, w1, b1, w2, b2)?;
    let x = g.add(x, path)?;
    // self-attention
    let normed = pre_norm(g, binder, &format!("{}.attn.ln", prefix), x, cfg.ln_eps)?;
    let heads: Vec<(TensorId, TensorId, TensorId)> = (0..cfg.heads)
        .map(|h| {
            (
                binder.bind(g, &format!("{}.attn.h{}.wq", prefix, h)),
                binder.bind(g, &format!("{}.attn.h{}.wk", prefix, h)),
                binder.bind(g, &format!("{}.attn.h{}.wv", prefix, h)),
            )
        })
        .collect();
    let wo = binder.bind(g, &format!("{}.attn.wo", prefix));
    let attn = vit::mhsa(g, normed, &heads, wo)?;
    let x = g.add(x, attn)?;
    // convolution module
    let normed = pre_norm(g, binder, &format!("{}.conv.ln", prefix), x, cfg.ln_eps)?;
    let conv_prefix = format!("{}.conv", prefix);
    let ids = bind_conv_ids(g, binder, &conv_prefix);
    let mode = if phase.is_train() {
        ConvBnMode::Train {
            prefix: format!("{}.bn", conv_prefix),
        }
    } else {
        ConvBnMode::Eval {
            mean: binder.params().get(&format!("{}.bn.running_mean", conv_prefix)).data.clone(),
            var: binder.params().get(&format!("{}.bn.running_var", conv_prefix)).data.clone(),
        }
    };
    let path = conv_module_path(g, normed, &ids, cfg.conf_conv_kernel, cfg.bn_eps, &mode, bn_updates)?;
    let x = g.add(x, path)?;
    // second half-step FFN
    let normed = pre_norm(g, binder, &format!("{}.ffn2.ln", prefix), x, cfg.ln_eps)?;
    let w1 = binder.bind(g, &format!("{}.ffn2.w1", prefix));
    let b1 = binder.bind(g, &format!("{}.ffn2.b1", prefix));
    let w2 = binder.bind(g, &format!("{}.ffn2.w2", prefix));
    let b2 = binder.bind(g, &format!("{}.ffn2.b2", prefix));
    let path = ffn_half_path(g, normed, w1, b1, w2, b2)?;
    let x = g.add(x, path)?;
    // closing LayerNorm
    pre_norm(g, binder, &format!("{}.ln_out", prefix), x, cfg.ln_eps)
}

/// Full branch: independent patch tokenization, the block stack, token-mean
/// pooling, dropout, dense projection to the branch feature.
pub fn branch_forward(
    g: &mut Graph,
    binder: &mut Binder,
    cfg: &ModelConfig,
    x: TensorId,
    phase: &mut Phase,
    bn_updates: &mut Vec<(String, BatchStats)>,
) -> Result<TensorId> {
    let e = binder.bind(g, "conf.embed.e");
    let b = binder.bind(g, "conf.embed.b");
    let pos = binder.bind(g, "conf.embed.pos");
    let mut z = vit::patch_embed(g, x, e, b, pos, cfg.patch)?;
    for i in 0..cfg.conf_depth {
        z = conformer_block(g, binder, cfg, &format!("conf.block{}", i), z, phase, bn_updates)?;
    }
    let pooled = g.reduce(z, ReduceKind::Gap, &[0])?;
    let d = g.shape(pooled)[0];
    let mut row = g.reshape(pooled, &[1, d])?;
    if phase.is_train() && cfg.conf_dropout > 0.0 {
        let seed = phase.next_seed();
        row = g.dropout(row, cfg.conf_dropout, seed)?;
    }
    let pw = binder.bind(g, "conf.proj.w");
    let pb = binder.bind(g, "conf.proj.b");
    let out = g.matmul(row, pw)?;
    g.add(out, pb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check;
    use crate::model::Model;
    use rand::{Rng, SeedableRng};

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = StdRng::seed_from_u64(seed);
        let numel: usize = shape.iter().product();
        Tensor::from_vec(
            shape.to_vec(),
            (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn macaron_zero_parameters_is_exact_identity() {
        let mut g = Graph::new();
        let x_t = rand_t(&[3, 4], 1);
        let x = g.leaf(x_t.clone());
        let wa = g.leaf(Tensor::zeros(&[4, 8]));
        let ba = g.leaf(Tensor::zeros(&[8]));
        let wb = g.leaf(Tensor::zeros(&[8, 4]));
        let bb = g.leaf(Tensor::zeros(&[4]));
        let y = macaron_ffn_half(&mut g, x, wa, ba, wb, bb).unwrap();
        assert_eq!(g.data(y), &x_t.data[..]);
    }

    #[test]
    fn macaron_zero_inner_bias_leaves_half_outer_bias() {
        let mut g = Graph::new();
        let x_t = rand_t(&[2, 3], 2);
        let x = g.leaf(x_t.clone());
        let wa = g.leaf(Tensor::zeros(&[3, 5]));
        let ba = g.leaf(Tensor::zeros(&[5]));
        let wb = g.leaf(rand_t(&[5, 3], 3));
        let bb_t = rand_t(&[3], 4);
        let bb = g.leaf(bb_t.clone());
        let y = macaron_ffn_half(&mut g, x, wa, ba, wb, bb).unwrap();
        for (row, xrow) in g.data(y).chunks(3).zip(x_t.data.chunks(3)) {
            for j in 0..3 {
                assert!((row[j] - (xrow[j] + 0.5 * bb_t.data[j])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn macaron_matches_explicit_half_step_composition() {
        let mut g = Graph::new();
        let x = g.leaf(rand_t(&[3, 4], 5));
        let wa = g.leaf(rand_t(&[4, 6], 6));
        let ba = g.leaf(rand_t(&[6], 7));
        let wb = g.leaf(rand_t(&[6, 4], 8));
        let bb = g.leaf(rand_t(&[4], 9));
        let got = macaron_ffn_half(&mut g, x, wa, ba, wb, bb).unwrap();
        let h = g.matmul(x, wa).unwrap();
        let h = g.add(h, ba).unwrap();
        let h = g.activation(h, Activation::Swish);
        let h = g.matmul(h, wb).unwrap();
        let h = g.add(h, bb).unwrap();
        let half = g.scale(h, 0.5);
        let expect = g.add(x, half).unwrap();
        assert_eq!(g.data(got), g.data(expect));
    }

    fn zero_conv_ids(g: &mut Graph, d: usize) -> ConvModuleIds {
        ConvModuleIds {
            pw1_w: g.leaf(Tensor::zeros(&[d, 2 * d])),
            pw1_b: g.leaf(Tensor::zeros(&[2 * d])),
            dw_w: g.leaf(Tensor::zeros(&[3, 1, 1, 2 * d])),
            dw_b: g.leaf(Tensor::zeros(&[2 * d])),
            bn_gamma: g.leaf(Tensor::zeros(&[2 * d])),
            bn_beta: g.leaf(Tensor::zeros(&[2 * d])),
            pw2_w: g.leaf(Tensor::zeros(&[2 * d, d])),
            pw2_b: g.leaf(Tensor::zeros(&[d])),
        }
    }

    #[test]
    fn conv_module_zero_parameters_keeps_residual() {
        let mut g = Graph::new();
        let x_t = rand_t(&[4, 3], 10);
        let x = g.leaf(x_t.clone());
        let ids = zero_conv_ids(&mut g, 3);
        let mode = ConvBnMode::Eval {
            mean: vec![0.0; 6],
            var: vec![1.0; 6],
        };
        let y = conformer_conv_module(&mut g, x, &ids, 3, 1e-5, &mode, &mut Vec::new()).unwrap();
        assert_eq!(g.data(y), &x_t.data[..]);
        assert_eq!(g.shape(y), &[4, 3]);
    }

    #[test]
    fn conv_module_rejects_even_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(rand_t(&[4, 3], 11));
        let ids = zero_conv_ids(&mut g, 3);
        let mode = ConvBnMode::Eval {
            mean: vec![0.0; 6],
            var: vec![1.0; 6],
        };
        assert!(conformer_conv_module(&mut g, x, &ids, 4, 1e-5, &mode, &mut Vec::new()).is_err());
    }

    #[test]
    fn conv_module_identity_depthwise_reduces_to_pointwise_chain() {
        let d = 3;
        let mut g = Graph::new();
        let x_t = rand_t(&[5, 3], 12);
        let x = g.leaf(x_t.clone());
        let pw1_w_t = rand_t(&[3, 6], 13);
        let pw1_b_t = rand_t(&[6], 14);
        let pw2_w_t = rand_t(&[6, 3], 15);
        let pw2_b_t = rand_t(&[3], 16);
        // depthwise identity: center tap 1 per channel
        let mut dw = vec![0.0; 3 * 6];
        for c in 0..6 {
            dw[6 + c] = 1.0;
        }
        let ids = ConvModuleIds {
            pw1_w: g.leaf(pw1_w_t.clone()),
            pw1_b: g.leaf(pw1_b_t.clone()),
            dw_w: g.leaf(Tensor::from_vec(vec![3, 1, 1, 6], dw).unwrap()),
            dw_b: g.leaf(Tensor::zeros(&[6])),
            bn_gamma: g.leaf(Tensor::ones(&[6])),
            bn_beta: g.leaf(Tensor::zeros(&[6])),
            pw2_w: g.leaf(pw2_w_t.clone()),
            pw2_b: g.leaf(pw2_b_t.clone()),
        };
        let mode = ConvBnMode::Eval {
            mean: vec![0.0; 6],
            var: vec![1.0; 6],
        };
        let y = conformer_conv_module(&mut g, x, &ids, 3, 1e-5, &mode, &mut Vec::new()).unwrap();
        // oracle: x + pw2(swish(gelu(pw1(x)))) (batch norm with unit stats is
        // identity up to the eps factor)
        let pw1 = g.leaf(pw1_w_t);
        let pb1 = g.leaf(pw1_b_t);
        let pw2 = g.leaf(pw2_w_t);
        let pb2 = g.leaf(pw2_b_t);
        let h = g.matmul(x, pw1).unwrap();
        let h = g.add(h, pb1).unwrap();
        let h = g.activation(h, Activation::Gelu);
        let h = g.activation(h, Activation::Swish);
        let h = g.matmul(h, pw2).unwrap();
        let h = g.add(h, pb2).unwrap();
        let expect = g.add(x, h).unwrap();
        for (a, b) in g.data(y).iter().zip(g.data(expect).iter()) {
            assert!((a - b).abs() < 1e-4, "{} vs {}", a, b);
        }
        let _ = d;
    }

    #[test]
    fn conv_module_residual_vanishes_with_parameter_scale() {
        let x_t = rand_t(&[4, 3], 17);
        let mut norms = Vec::new();
        for &scale in &[1e-1, 1e-3, 1e-5] {
            let mut g = Graph::new();
            let x = g.leaf(x_t.clone());
            let scale_t = |t: Tensor| -> Tensor {
                Tensor::from_vec(t.shape.clone(), t.data.iter().map(|v| v * scale).collect())
                    .unwrap()
            };
            let ids = ConvModuleIds {
                pw1_w: g.leaf(scale_t(rand_t(&[3, 6], 18))),
                pw1_b: g.leaf(scale_t(rand_t(&[6], 19))),
                dw_w: g.leaf(scale_t(rand_t(&[3, 1, 1, 6], 20))),
                dw_b: g.leaf(scale_t(rand_t(&[6], 21))),
                bn_gamma: g.leaf(scale_t(rand_t(&[6], 22))),
                bn_beta: g.leaf(scale_t(rand_t(&[6], 23))),
                pw2_w: g.leaf(scale_t(rand_t(&[6, 3], 24))),
                pw2_b: g.leaf(scale_t(rand_t(&[3], 25))),
            };
            let mode = ConvBnMode::Eval {
                mean: vec![0.0; 6],
                var: vec![1.0; 6],
            };
            let y = conformer_conv_module(&mut g, x, &ids, 3, 1e-5, &mode, &mut Vec::new()).unwrap();
            let dist: f64 = g
                .data(y)
                .iter()
                .zip(x_t.data.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            norms.push(dist);
        }
        assert!(norms[0] > norms[1] && norms[1] > norms[2]);
        assert!(norms[2] < 1e-4);
    }

    #[test]
    fn running_stat_update_matches_hand_recurrence() {
        let cfg = ModelConfig::tiny(3);
        let mut model = Model::init(cfg, 1).unwrap();
        let prefix = "conf.block0.conv.bn";
        let c = model.params.get(&format!("{}.running_mean", prefix)).numel();
        let stats1 = BatchStats {
            mean: vec![0.4; c],
            var_unbiased: vec![2.0; c],
        };
        let stats2 = BatchStats {
            mean: vec![-0.2; c],
            var_unbiased: vec![0.5; c],
        };
        model.apply_bn_updates(&[(prefix.to_string(), stats1)], 0.1);
        model.apply_bn_updates(&[(prefix.to_string(), stats2)], 0.1);
        // hand recurrence: m1 = 0.9*0 + 0.1*0.4; m2 = 0.9*m1 + 0.1*(-0.2)
        let m = 0.9 * (0.1 * 0.4) + 0.1 * (-0.2);
        let v = 0.9 * (0.9 * 1.0 + 0.1 * 2.0) + 0.1 * 0.5;
        let rm = model.params.get(&format!("{}.running_mean", prefix));
        let rv = model.params.get(&format!("{}.running_var", prefix));
        assert!((rm.data[0] - m).abs() < 1e-15);
        assert!((rv.data[0] - v).abs() < 1e-15);
    }

    #[test]
    fn block_with_zero_paths_is_layer_norm_of_input() {
        let cfg = ModelConfig::tiny(3);
        let mut model = Model::init(cfg.clone(), 2).unwrap();
        // zero every block0 parameter except the LayerNorm affines
        let names: Vec<String> = model
            .params
            .entries()
            .iter()
            .map(|e| e.name.clone())
            .filter(|n| n.starts_with("conf.block0") && !n.contains(".ln"))
            .collect();
        for n in names {
            model.params.get_mut(&n).data.fill(0.0);
        }
        let d = cfg.embed_dim;
        let x_t = rand_t(&[6, d], 26);
        let mut g = Graph::new();
        let mut binder = Binder::new(&model.params, false);
        let x = g.leaf(x_t.clone());
        let mut updates = Vec::new();
        let y = conformer_block(
            &mut g,
            &mut binder,
            &cfg,
            "conf.block0",
            x,
            &Phase::Eval,
            &mut updates,
        )
        .unwrap();
        assert_eq!(g.shape(y), &[6, d]);
        let ones = g.leaf(Tensor::ones(&[d]));
        let zeros = g.leaf(Tensor::zeros(&[d]));
        let expect = g.layer_norm(x, ones, zeros, cfg.ln_eps).unwrap();
        for (a, b) in g.data(y).iter().zip(g.data(expect).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn block_gradient_check_at_reduced_dims() {
        let cfg = ModelConfig {
            embed_dim: 8,
            heads: 2,
            conf_ffn_dim: 16,
            ..ModelConfig::tiny(3)
        };
        let model = Model::init(cfg.clone(), 3).unwrap();
        let x = rand_t(&[4, 8], 27);
        let err = grad_check(
            |g, id| {
                let mut binder = Binder::new(&model.params, false);
                let mut updates = Vec::new();
                let y = conformer_block(
                    g,
                    &mut binder,
                    &cfg,
                    "conf.block0",
                    id,
                    &Phase::Eval,
                    &mut updates,
                )?;
                g.sum_all(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "conformer block grad err {}", err);
    }

    #[test]
    fn block_output_is_finite_for_wide_inputs() {
        let cfg = ModelConfig::tiny(3);
        let model = Model::init(cfg.clone(), 4).unwrap();
        let d = cfg.embed_dim;
        let mut rng = StdRng::seed_from_u64(28);
        let data: Vec<f64> = (0..6 * d).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let mut g = Graph::new();
        let mut binder = Binder::new(&model.params, false);
        let x = g.leaf(Tensor::from_vec(vec![6, d], data).unwrap());
        let mut updates = Vec::new();
        let y = conformer_block(
            &mut g,
            &mut binder,
            &cfg,
            "conf.block0",
            x,
            &Phase::Eval,
            &mut updates,
        )
        .unwrap();
        assert!(g.tensor(y).all_finite());
    }

    #[test]
    fn branch_default_config_and_determinism() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.conf_depth, 4);
        assert_eq!(cfg.embed_dim, 64);
        assert_eq!(cfg.heads, 4);
        let cfg = ModelConfig::tiny(3);
        let model = Model::init(cfg.clone(), 5).unwrap();
        let img = rand_t(&[128, 128, 3], 29);
        let run = || {
            let mut g = Graph::new();
            let mut binder = Binder::new(&model.params, false);
            let x = g.constant(img.clone());
            let mut updates = Vec::new();
            let out =
                branch_forward(&mut g, &mut binder, &cfg, x, &mut Phase::Eval, &mut updates)
                    .unwrap();
            g.data(out).to_vec()
        };
        let a = run();
        assert_eq!(a.len(), cfg.feature_dim);
        assert_eq!(a, run());
    }

    #[test]
    fn default_branch_outputs_512() {
        let cfg = ModelConfig::default();
        let model = Model::init(cfg.clone(), 6).unwrap();
        let mut g = Graph::new();
        let mut binder = Binder::new(&model.params, false);
        let x = g.constant(rand_t(&[128, 128, 3], 30));
        let mut updates = Vec::new();
        let out =
            branch_forward(&mut g, &mut binder, &cfg, x, &mut Phase::Eval, &mut updates).unwrap();
        assert_eq!(g.shape(out), &[1, 512]);
    }
}
