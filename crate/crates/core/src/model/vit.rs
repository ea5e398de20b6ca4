//! Global-feature branch: patch embedding with learned positional terms,
//! pre-norm transformer encoder blocks, token-mean pooling, and a dense
//! projection to the branch feature width. The scaled-dot-product attention
//! here is the primitive reused by the Conformer branch and the fusion
//! module.

use rand::rngs::StdRng;

use crate::error::Result;
use crate::graph::{Activation, Graph, ReduceKind, TensorId};
use crate::model::{init_ln, init_proj, init_zeros, Binder, ModelConfig, ModelParams, Phase};

pub fn init_params(cfg: &ModelConfig, params: &mut ModelParams, rng: &mut StdRng) {
    let d = cfg.embed_dim;
    init_proj(params, "vit.embed.e", &[cfg.patch_len(), d], rng);
    init_zeros(params, "vit.embed.b", &[d]);
    init_proj(params, "vit.embed.pos", &[cfg.token_count(), d], rng);
    let dk = d / cfg.heads;
    for i in 0..cfg.vit_depth {
        let p = format!("vit.block{}", i);
        init_ln(params, &format!("{}.ln1", p), d);
        for h in 0..cfg.heads {
            init_proj(params, &format!("{}.attn.h{}.wq", p, h), &[d, dk], rng);
            init_proj(params, &format!("{}.attn.h{}.wk", p, h), &[d, dk], rng);
            init_proj(params, &format!("{}.attn.h{}.wv", p, h), &[d, dk], rng);
        }
        init_proj(params, &format!("{}.attn.wo", p), &[d, d], rng);
        init_ln(params, &format!("{}.ln2", p), d);
        init_proj(params, &format!("{}.ffn.w1", p), &[d, cfg.vit_ffn_dim], rng);
        init_zeros(params, &format!("{}.ffn.b1", p), &[cfg.vit_ffn_dim]);
        init_proj(params, &format!("{}.ffn.w2", p), &[cfg.vit_ffn_dim, d], rng);
        init_zeros(params, &format!("{}.ffn.b2", p), &[d]);
    }
    init_proj(params, "vit.proj.w", &[d, cfg.feature_dim], rng);
    init_zeros(params, "vit.proj.b", &[cfg.feature_dim]);
}

/// Flattens non-overlapping patches row-major, projects them with `e` and
/// `b`, and adds the positional table: Z0 = [x_i E + b] + E_pos.
pub fn patch_embed(
    g: &mut Graph,
    x: TensorId,
    e: TensorId,
    b: TensorId,
    pos: TensorId,
    patch: usize,
) -> Result<TensorId> {
    let flat = g.patches(x, patch)?;
    let tokens = g.matmul(flat, e)?;
    let tokens = g.add(tokens, b)?;
    g.add(tokens, pos)
}

/// softmax(Q K^T / sqrt(dk)) V with row-max stabilization inside the softmax.
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: TensorId,
    k: TensorId,
    v: TensorId,
) -> Result<TensorId> {
    let dk = g.shape(q)[1];
    let kt = g.transpose2d(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = g.softmax(scaled)?;
    g.matmul(weights, v)
}

/// Multi-head self-attention: independent per-head projections, concatenated
/// heads, output projection.
pub fn mhsa(
    g: &mut Graph,
    z: TensorId,
    head_weights: &[(TensorId, TensorId, TensorId)],
    wo: TensorId,
) -> Result<TensorId> {
    let mut heads = Vec::with_capacity(head_weights.len());
    for &(wq, wk, wv) in head_weights {
        let q = g.matmul(z, wq)?;
        let k = g.matmul(z, wk)?;
        let v = g.matmul(z, wv)?;
        heads.push(scaled_dot_attention(g, q, k, v)?);
    }
    let cat = g.concat(&heads, 1)?;
    g.matmul(cat, wo)
}

/// GELU(x W1 + b1) W2 + b2
pub fn ffn(
    g: &mut Graph,
    x: TensorId,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
) -> Result<TensorId> {
    let h = g.matmul(x, w1)?;
    let h = g.add(h, b1)?;
    let h = g.activation(h, Activation::Gelu);
    let h = g.matmul(h, w2)?;
    g.add(h, b2)
}

fn bind_heads(
    g: &mut Graph,
    binder: &mut Binder,
    prefix: &str,
    heads: usize,
) -> Vec<(TensorId, TensorId, TensorId)> {
    (0..heads)
        .map(|h| {
            (
                binder.bind(g, &format!("{}.h{}.wq", prefix, h)),
                binder.bind(g, &format!("{}.h{}.wk", prefix, h)),
                binder.bind(g, &format!("{}.h{}.wv", prefix, h)),
            )
        })
        .collect()
}

/// One pre-norm encoder block: LN, MHSA, residual; LN, FFN, residual.
pub fn encoder_block(
    g: &mut Graph,
    binder: &mut Binder,
    cfg: &ModelConfig,
    prefix: &str,
    z: TensorId,
) -> Result<TensorId> {
    let g1 = binder.bind(g, &format!("{}.ln1.gamma", prefix));
    let b1 = binder.bind(g, &format!("{}.ln1.beta", prefix));
    let normed = g.layer_norm(z, g1, b1, cfg.ln_eps)?;
    let heads = bind_heads(g, binder, &format!("{}.attn", prefix), cfg.heads);
    let wo = binder.bind(g, &format!("{}.attn.wo", prefix));
    let attn = mhsa(g, normed, &heads, wo)?;
    let z = g.add(z, attn)?;
    let g2 = binder.bind(g, &format!("{}.ln2.gamma", prefix));
    let b2 = binder.bind(g, &format!("{}.ln2.beta", prefix));
    let normed = g.layer_norm(z, g2, b2, cfg.ln_eps)?;
    let w1 = binder.bind(g, &format!("{}.ffn.w1", prefix));
    let fb1 = binder.bind(g, &format!("{}.ffn.b1", prefix));
    let w2 = binder.bind(g, &format!("{}.ffn.w2", prefix));
    let fb2 = binder.bind(g, &format!("{}.ffn.b2", prefix));
    let f = ffn(g, normed, w1, fb1, w2, fb2)?;
    g.add(z, f)
}

/// Full branch: patch embedding, encoder stack, token-mean pooling, dropout,
/// dense projection. Returns a `[1, feature_dim]` row.
pub fn branch_forward(
    g: &mut Graph,
    binder: &mut Binder,
    cfg: &ModelConfig,
    x: TensorId,
    phase: &mut Phase,
) -> Result<TensorId> {
    let e = binder.bind(g, "vit.embed.e");
    let b = binder.bind(g, "vit.embed.b");
    let pos = binder.bind(g, "vit.embed.pos");
    let mut z = patch_embed(g, x, e, b, pos, cfg.patch)?;
    for i in 0..cfg.vit_depth {
        z = encoder_block(g, binder, cfg, &format!("vit.block{}", i), z)?;
    }
    let pooled = g.reduce(z, ReduceKind::Gap, &[0])?;
    let d = g.shape(pooled)[0];
    let mut row = g.reshape(pooled, &[1, d])?;
    if phase.is_train() && cfg.vit_dropout > 0.0 {
        let seed = phase.next_seed();
        row = g.dropout(row, cfg.vit_dropout, seed)?;
    }
    let pw = binder.bind(g, "vit.proj.w");
    let pb = binder.bind(g, "vit.proj.b");
    let out = g.matmul(row, pw)?;
    g.add(out, pb)
}
