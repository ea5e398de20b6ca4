//! Multi-head cross-attention interaction module: batch-normalizes the three
//! branch features, runs the directed interactions (vit<-eff, eff<-conf,
//! conf<-vit), concatenates, and fuses through a ReLU dense layer.
//!
//! Each 512-dim feature is treated as a single token by default, which makes
//! every attention weight exactly 1 (softmax over one key); `TokenMode::
//! Reshaped` instead views it as a short token sequence.

use rand::rngs::StdRng;

use crate::error::Result;
use crate::graph::{Activation, BatchStats, Graph, ReduceKind, TensorId};
use crate::model::{
    batch_norm_layer, init_bn, init_ln, init_proj, init_zeros, vit, Binder, ModelConfig,
    ModelParams, Phase, TokenMode,
};

/// Graph handles of the three stacked branch features, each `[B, F]`.
#[derive(Debug, Clone, Copy)]
pub struct BranchFeatureIds {
    pub eff: TensorId,
    pub vit: TensorId,
    pub conf: TensorId,
}

fn attn_dims(cfg: &ModelConfig) -> (usize, usize) {
    match cfg.token_mode {
        TokenMode::Single => (cfg.feature_dim, cfg.feature_dim / cfg.fusion_heads),
        TokenMode::Reshaped => (
            cfg.reshaped_token_dim(),
            cfg.reshaped_token_dim() / cfg.fusion_heads,
        ),
    }
}

pub fn init_params(cfg: &ModelConfig, params: &mut ModelParams, rng: &mut StdRng) {
    for b in ["eff", "vit", "conf"] {
        init_bn(params, &format!("fusion.bn.{}", b), cfg.feature_dim);
    }
    let (width, dk) = attn_dims(cfg);
    for i in 1..=3 {
        let p = format!("fusion.mha{}", i);
        for h in 0..cfg.fusion_heads {
            init_proj(params, &format!("{}.h{}.wq", p, h), &[width, dk], rng);
            init_proj(params, &format!("{}.h{}.wk", p, h), &[width, dk], rng);
            init_proj(params, &format!("{}.h{}.wv", p, h), &[width, dk], rng);
        }
        init_proj(params, &format!("{}.wo", p), &[width, width], rng);
        init_ln(params, &format!("{}.ln", p), cfg.feature_dim);
    }
    init_proj(params, "fusion.dense.w", &[3 * cfg.feature_dim, cfg.feature_dim], rng);
    init_zeros(params, "fusion.dense.b", &[cfg.feature_dim]);
}

/// One directed interaction: queries from `f_q`, keys and values from
/// `f_kv`, residual around the attention, closed by LayerNorm.
/// Both inputs are `[B, F]`.
pub fn cross_attend(
    g: &mut Graph,
    binder: &mut Binder,
    cfg: &ModelConfig,
    prefix: &str,
    f_q: TensorId,
    f_kv: TensorId,
) -> Result<TensorId> {
    let sq = g.shape(f_q).to_vec();
    let skv = g.shape(f_kv).to_vec();
    if sq != skv || sq.len() != 2 || sq[1] != cfg.feature_dim {
        return Err(crate::error::Error::Shape(format!(
            "cross_attend expects matching [B, {}] features, got {:?} and {:?}",
            cfg.feature_dim, sq, skv
        )));
    }
    let heads: Vec<(TensorId, TensorId, TensorId)> = (0..cfg.fusion_heads)
        .map(|h| {
            (
                binder.bind(g, &format!("{}.h{}.wq", prefix, h)),
                binder.bind(g, &format!("{}.h{}.wk", prefix, h)),
                binder.bind(g, &format!("{}.h{}.wv", prefix, h)),
            )
        })
        .collect();
    let wo = binder.bind(g, &format!("{}.wo", prefix));
    let attn = match cfg.token_mode {
        TokenMode::Single => single_token_attention(g, f_q, f_kv, &heads, wo)?,
        TokenMode::Reshaped => reshaped_attention(g, cfg, f_q, f_kv, &heads, wo)?,
    };
    let sum = g.add(f_q, attn)?;
    let gamma = binder.bind(g, &format!("{}.ln.gamma", prefix));
    let beta = binder.bind(g, &format!("{}.ln.beta", prefix));
    g.layer_norm(sum, gamma, beta, cfg.ln_eps)
}

/// Every sample is a one-token sequence, so the softmax over the single
/// query-key logit is exactly one; the computation is still performed
/// literally so the logit path stays on the graph.
fn single_token_attention(
    g: &mut Graph,
    f_q: TensorId,
    f_kv: TensorId,
    heads: &[(TensorId, TensorId, TensorId)],
    wo: TensorId,
) -> Result<TensorId> {
    let rows = g.shape(f_q)[0];
    let mut outs = Vec::with_capacity(heads.len());
    for &(wq, wk, wv) in heads {
        let q = g.matmul(f_q, wq)?;
        let k = g.matmul(f_kv, wk)?;
        let v = g.matmul(f_kv, wv)?;
        let dk = g.shape(q)[1];
        let qk = g.mul(q, k)?;
        let logits = g.reduce(qk, ReduceKind::Sum, &[1])?;
        let logits = g.reshape(logits, &[rows, 1])?;
        let scaled = g.scale(logits, 1.0 / (dk as f64).sqrt());
        let weights = g.softmax(scaled)?;
        outs.push(g.mul(weights, v)?);
    }
    let cat = g.concat(&outs, 1)?;
    g.matmul(cat, wo)
}

fn reshaped_attention(
    g: &mut Graph,
    cfg: &ModelConfig,
    f_q: TensorId,
    f_kv: TensorId,
    heads: &[(TensorId, TensorId, TensorId)],
    wo: TensorId,
) -> Result<TensorId> {
    let rows = g.shape(f_q)[0];
    let td = cfg.reshaped_token_dim();
    let tokens = cfg.feature_dim / td;
    let mut row_outs = Vec::with_capacity(rows);
    for b in 0..rows {
        let q_row = g.narrow(f_q, 0, b, 1)?;
        let q_seq = g.reshape(q_row, &[tokens, td])?;
        let kv_row = g.narrow(f_kv, 0, b, 1)?;
        let kv_seq = g.reshape(kv_row, &[tokens, td])?;
        let mut outs = Vec::with_capacity(heads.len());
        for &(wq, wk, wv) in heads {
            let q = g.matmul(q_seq, wq)?;
            let k = g.matmul(kv_seq, wk)?;
            let v = g.matmul(kv_seq, wv)?;
            outs.push(vit::scaled_dot_attention(g, q, k, v)?);
        }
        let cat = g.concat(&outs, 1)?;
        let proj = g.matmul(cat, wo)?;
        row_outs.push(g.reshape(proj, &[1, cfg.feature_dim])?);
    }
    g.concat(&row_outs, 0)
}

/// Batch-normalizes each branch feature, performs the three directed
/// interactions, concatenates `[MHA1 || MHA2 || MHA3]`, and applies the ReLU
/// dense fusion. Returns `[B, F]`.
pub fn fuse(
    g: &mut Graph,
    binder: &mut Binder,
    cfg: &ModelConfig,
    features: &BranchFeatureIds,
    phase: &Phase,
    bn_updates: &mut Vec<(String, BatchStats)>,
) -> Result<TensorId> {
    let eff = batch_norm_layer(g, binder, "fusion.bn.eff", features.eff, phase, cfg.bn_eps, bn_updates)?;
    let vit_f = batch_norm_layer(g, binder, "fusion.bn.vit", features.vit, phase, cfg.bn_eps, bn_updates)?;
    let conf = batch_norm_layer(g, binder, "fusion.bn.conf", features.conf, phase, cfg.bn_eps, bn_updates)?;
    let mha1 = cross_attend(g, binder, cfg, "fusion.mha1", vit_f, eff)?;
    let mha2 = cross_attend(g, binder, cfg, "fusion.mha2", eff, conf)?;
    let mha3 = cross_attend(g, binder, cfg, "fusion.mha3", conf, vit_f)?;
    let cat = g.concat(&[mha1, mha2, mha3], 1)?;
    debug_assert_eq!(g.shape(cat)[1], 3 * cfg.feature_dim);
    let w = binder.bind(g, "fusion.dense.w");
    let b = binder.bind(g, "fusion.dense.b");
    let dense = g.matmul(cat, w)?;
    let dense = g.add(dense, b)?;
    Ok(g.activation(dense, Activation::Relu))
}
