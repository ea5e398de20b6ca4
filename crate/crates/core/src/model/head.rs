//! Classification head: three hidden dense layers with ReLU, batch norm, and
//! dropout between them, then the final logit layer with nothing after it.

use rand::rngs::StdRng;

use crate::error::Result;
use crate::graph::{Activation, BatchStats, Graph, TensorId};
use crate::model::{
    batch_norm_layer, init_bn, init_proj, init_zeros, Binder, ModelConfig, ModelParams, Phase,
};

pub fn init_params(cfg: &ModelConfig, params: &mut ModelParams, rng: &mut StdRng) {
    let dims = [
        cfg.feature_dim,
        cfg.head_widths[0],
        cfg.head_widths[1],
        cfg.head_widths[2],
    ];
    for i in 0..3 {
        init_proj(params, &format!("head.fc{}.w", i + 1), &[dims[i], dims[i + 1]], rng);
        init_zeros(params, &format!("head.fc{}.b", i + 1), &[dims[i + 1]]);
        init_bn(params, &format!("head.bn{}", i + 1), dims[i + 1]);
    }
    init_proj(params, "head.fc4.w", &[dims[3], cfg.classes], rng);
    init_zeros(params, "head.fc4.b", &[cfg.classes]);
}

/// `[B, F] -> [B, classes]` logits.
pub fn forward(
    g: &mut Graph,
    binder: &mut Binder,
    cfg: &ModelConfig,
    x: TensorId,
    phase: &mut Phase,
    bn_updates: &mut Vec<(String, BatchStats)>,
) -> Result<TensorId> {
    let mut h = x;
    for i in 1..=3 {
        let w = binder.bind(g, &format!("head.fc{}.w", i));
        let b = binder.bind(g, &format!("head.fc{}.b", i));
        h = g.matmul(h, w)?;
        h = g.add(h, b)?;
        h = g.activation(h, Activation::Relu);
        h = batch_norm_layer(g, binder, &format!("head.bn{}", i), h, phase, cfg.bn_eps, bn_updates)?;
        if phase.is_train() && cfg.head_dropout > 0.0 {
            let seed = phase.next_seed();
            h = g.dropout(h, cfg.head_dropout, seed)?;
        }
    }
    let w = binder.bind(g, "head.fc4.w");
    let b = binder.bind(g, "head.fc4.b");
    h = g.matmul(h, w)?;
    g.add(h, b)
}
