//! Model assembly: three parallel feature branches, cross-attention fusion,
//! and the classification head, all parameterized by a [`ModelConfig`] and a
//! flat named [`ModelParams`] registry that doubles as the checkpoint unit.

pub mod cnn;
pub mod conformer;
pub mod fusion;
pub mod head;
pub mod vit;

use std::collections::HashMap;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, TensorId};
use crate::tensor::Tensor;

/// How the fusion cross-attention treats a 512-dim branch feature: as one
/// 512-wide token (the literal reading of the fusion equations) or reshaped
/// into 8 tokens of 64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenMode {
    Single,
    Reshaped,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub input_hw: usize,
    pub classes: usize,
    /// Width of every branch feature vector (F_eff / F_vit / F_conf).
    pub feature_dim: usize,
    // convolutional branch
    pub stem_widths: Vec<usize>,
    pub stem_strides: Vec<usize>,
    pub mbconv_expansion: usize,
    pub cbam_reduction: usize,
    pub cnn_dropout: f64,
    // vision-transformer branch
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub vit_depth: usize,
    pub vit_ffn_dim: usize,
    pub vit_dropout: f64,
    // conformer branch
    pub conf_depth: usize,
    pub conf_ffn_dim: usize,
    pub conf_conv_kernel: usize,
    pub conf_dropout: f64,
    // fusion + head
    pub fusion_heads: usize,
    pub token_mode: TokenMode,
    pub head_widths: Vec<usize>,
    pub head_dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ln_eps: f64,
    /// Parameter-name prefixes excluded from optimization.
    pub freeze: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_hw: 128,
            classes: 78,
            feature_dim: 512,
            stem_widths: vec![32, 64, 128, 256],
            stem_strides: vec![4, 2, 2, 2],
            mbconv_expansion: 2,
            cbam_reduction: 16,
            cnn_dropout: 0.3,
            patch: 16,
            embed_dim: 64,
            heads: 4,
            vit_depth: 4,
            vit_ffn_dim: 512,
            vit_dropout: 0.2,
            conf_depth: 4,
            conf_ffn_dim: 256,
            conf_conv_kernel: 3,
            conf_dropout: 0.2,
            fusion_heads: 4,
            token_mode: TokenMode::Single,
            head_widths: vec![512, 256, 128],
            head_dropout: 0.3,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            ln_eps: 1e-5,
            freeze: Vec::new(),
        }
    }
}

impl ModelConfig {
    /// A small configuration for fast tests: same topology, tiny widths.
    pub fn tiny(classes: usize) -> Self {
        ModelConfig {
            classes,
            feature_dim: 32,
            stem_widths: vec![8, 16],
            stem_strides: vec![4, 4],
            embed_dim: 16,
            heads: 2,
            vit_depth: 1,
            vit_ffn_dim: 32,
            conf_depth: 1,
            conf_ffn_dim: 32,
            fusion_heads: 2,
            head_widths: vec![32, 16, 8],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} does not divide embedding dim {}",
                self.heads, self.embed_dim
            )));
        }
        if self.feature_dim % self.fusion_heads != 0 {
            return Err(Error::Config(format!(
                "fusion head count {} does not divide feature dim {}",
                self.fusion_heads, self.feature_dim
            )));
        }
        if self.token_mode == TokenMode::Reshaped {
            let d = self.reshaped_token_dim();
            if self.feature_dim % d != 0 || d % self.fusion_heads != 0 {
                return Err(Error::Config(
                    "reshaped fusion requires feature_dim divisible into tokens of embed width".into(),
                ));
            }
        }
        if self.input_hw % self.patch != 0 {
            return Err(Error::Config(format!(
                "input size {} not divisible by patch size {}",
                self.input_hw, self.patch
            )));
        }
        if self.stem_widths.len() != self.stem_strides.len() || self.stem_widths.is_empty() {
            return Err(Error::Config(
                "stem widths and strides must be non-empty and equal length".into(),
            ));
        }
        if self.conf_conv_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "conformer depthwise kernel width must be odd, got {}",
                self.conf_conv_kernel
            )));
        }
        if self.head_widths.len() != 3 {
            return Err(Error::Config("classification head takes exactly 3 hidden widths".into()));
        }
        Ok(())
    }

    /// Token width used by the reshaped fusion mode (64 for the default 512).
    pub fn reshaped_token_dim(&self) -> usize {
        self.embed_dim
    }

    /// Number of tokens produced by the patch embedding.
    pub fn token_count(&self) -> usize {
        (self.input_hw / self.patch) * (self.input_hw / self.patch)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Spatial side length after the stem (4 for the default 128 input).
    pub fn stem_out_hw(&self) -> usize {
        let mut hw = self.input_hw;
        for &s in &self.stem_strides {
            hw = (hw - 1) / s + 1;
        }
        hw
    }
}

/// One named parameter tensor. Non-trainable entries hold state such as batch
/// norm running statistics; they are checkpointed but never optimized.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered, named collection of parameter tensors; iteration order is the
/// insertion order and defines the checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {}",
            name
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor,
            trainable,
        });
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {}", name));
        &self.entries[idx].tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {}", name));
        &mut self.entries[idx].tensor
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn idx(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Marks every parameter whose name starts with one of the prefixes as
    /// non-trainable.
    pub fn freeze_matching(&mut self, prefixes: &[String]) {
        for e in self.entries.iter_mut() {
            if prefixes.iter().any(|p| e.name.starts_with(p.as_str())) {
                e.trainable = false;
            }
        }
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }
}

/// Forward-pass mode. Train mode enables dropout (drawing per-op seeds from
/// the given rng) and batch-statistics normalization.
pub enum Phase<'r> {
    Train(&'r mut StdRng),
    Eval,
}

impl Phase<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Phase::Train(_))
    }

    /// Dropout seed for the next stochastic op; only valid in train mode.
    pub fn next_seed(&mut self) -> u64 {
        match self {
            Phase::Train(rng) => rng.gen(),
            Phase::Eval => unreachable!("dropout seeds are only drawn in train mode"),
        }
    }
}

/// Binds named parameters into a graph as leaves, once each, remembering the
/// mapping so gradients can be collected after backward.
pub struct Binder<'p> {
    params: &'p ModelParams,
    with_grads: bool,
    cache: Vec<Option<TensorId>>,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p ModelParams, with_grads: bool) -> Self {
        Binder {
            params,
            with_grads,
            cache: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    pub fn bind(&mut self, g: &mut Graph, name: &str) -> TensorId {
        let idx = self
            .params
            .idx(name)
            .unwrap_or_else(|| panic!("unknown parameter {}", name));
        if let Some(id) = self.cache[idx] {
            return id;
        }
        let entry = &self.params.entries()[idx];
        let mut t = entry.tensor.clone();
        t.grad = None;
        t.requires_grad = self.with_grads && entry.trainable;
        let id = g.leaf(t);
        self.cache[idx] = Some(id);
        id
    }

    /// Gradients of every trainable parameter bound into this graph, keyed by
    /// registry index, in registry order. Bound-but-untouched parameters
    /// report zeros (backward fills them); unbound ones are absent. The
    /// buffers are moved out of the graph rather than copied.
    pub fn collect_grads(&self, g: &mut Graph) -> Vec<(usize, Vec<f64>)> {
        let mut out = Vec::new();
        for (idx, slot) in self.cache.iter().enumerate() {
            if let Some(id) = slot {
                if self.params.entries()[idx].trainable && self.with_grads {
                    if let Some(grad) = g.take_grad(*id) {
                        out.push((idx, grad));
                    }
                }
            }
        }
        out
    }
}

/// Batch-norm layer helper: binds affine parameters and dispatches on phase;
/// train-mode statistics are recorded under the layer prefix for the running
/// update at step end.
pub fn batch_norm_layer(
    g: &mut Graph,
    binder: &mut Binder,
    prefix: &str,
    x: TensorId,
    phase: &Phase,
    eps: f64,
    updates: &mut Vec<(String, BatchStats)>,
) -> Result<TensorId> {
    let gamma = binder.bind(g, &format!("{}.gamma", prefix));
    let beta = binder.bind(g, &format!("{}.beta", prefix));
    if phase.is_train() {
        let (y, stats) = g.batch_norm_train(x, gamma, beta, eps)?;
        updates.push((prefix.to_string(), stats));
        Ok(y)
    } else {
        let mean = binder.params().get(&format!("{}.running_mean", prefix)).data.clone();
        let var = binder.params().get(&format!("{}.running_var", prefix)).data.clone();
        g.batch_norm_eval(x, gamma, beta, &mean, &var, eps)
    }
}

/// Registers the four batch-norm tensors for a layer.
pub fn init_bn(params: &mut ModelParams, prefix: &str, c: usize) {
    params.insert(&format!("{}.gamma", prefix), Tensor::ones(&[c]), true);
    params.insert(&format!("{}.beta", prefix), Tensor::zeros(&[c]), true);
    params.insert(&format!("{}.running_mean", prefix), Tensor::zeros(&[c]), false);
    params.insert(&format!("{}.running_var", prefix), Tensor::ones(&[c]), false);
}

/// Registers layer-norm affine parameters.
pub fn init_ln(params: &mut ModelParams, prefix: &str, d: usize) {
    params.insert(&format!("{}.gamma", prefix), Tensor::ones(&[d]), true);
    params.insert(&format!("{}.beta", prefix), Tensor::zeros(&[d]), true);
}

/// Truncated-normal std 0.02: projection / embedding matrices.
pub fn init_proj(params: &mut ModelParams, name: &str, shape: &[usize], rng: &mut StdRng) {
    params.insert(name, Tensor::trunc_normal(shape, 0.02, rng), true);
}

/// Fan-in-scaled init for convolution kernels `[kh,kw,cg,cout]`.
pub fn init_conv(params: &mut ModelParams, name: &str, shape: &[usize], rng: &mut StdRng) {
    let fan_in = (shape[0] * shape[1] * shape[2]) as f64;
    let std = (2.0 / fan_in).sqrt();
    params.insert(name, Tensor::trunc_normal(shape, std, rng), true);
}

pub fn init_zeros(params: &mut ModelParams, name: &str, shape: &[usize]) {
    params.insert(name, Tensor::zeros(shape), true);
}

/// Everything the combined forward pass exposes to callers: logits, branch
/// features, named stem activations (for Grad-CAM), and pending batch-norm
/// running-stat updates.
pub struct ForwardOut {
    pub logits: TensorId,
    pub features: fusion::BranchFeatureIds,
    pub stem_activations: Vec<(String, TensorId)>,
    pub bn_updates: Vec<(String, BatchStats)>,
}

/// The full three-branch fusion classifier.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    /// Fresh parameters from the given seed.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        cnn::init_params(&cfg, &mut params, &mut rng);
        vit::init_params(&cfg, &mut params, &mut rng);
        conformer::init_params(&cfg, &mut params, &mut rng);
        fusion::init_params(&cfg, &mut params, &mut rng);
        head::init_params(&cfg, &mut params, &mut rng);
        params.freeze_matching(&cfg.freeze);
        Ok(Model { cfg, params })
    }

    /// Runs the three branches on each image, fuses, and classifies, returning
    /// the binder so parameter gradients can be collected after backward.
    /// Images are `[H,W,3]` tensors in [0,1]; the batch must be non-empty (and
    /// at least 2 in train mode, for the fusion/head batch norms).
    pub fn forward_batch<'p>(
        &'p self,
        g: &mut Graph,
        images: &[Tensor],
        phase: &mut Phase,
        with_grads: bool,
    ) -> Result<(ForwardOut, Binder<'p>)> {
        if images.is_empty() {
            return Err(Error::Contract("forward_batch on empty batch".into()));
        }
        let mut binder = Binder::new(&self.params, with_grads);
        let mut bn_updates = Vec::new();
        let mut stem_activations = Vec::new();
        let mut eff_rows = Vec::with_capacity(images.len());
        let mut vit_rows = Vec::with_capacity(images.len());
        let mut conf_rows = Vec::with_capacity(images.len());
        for (si, img) in images.iter().enumerate() {
            let x = g.constant(img.clone());
            let (f_eff, acts) = cnn::branch_forward(g, &mut binder, &self.cfg, x, phase)?;
            if si == 0 {
                stem_activations = acts;
            }
            let f_vit = vit::branch_forward(g, &mut binder, &self.cfg, x, phase)?;
            let f_conf = conformer::branch_forward(g, &mut binder, &self.cfg, x, phase, &mut bn_updates)?;
            eff_rows.push(f_eff);
            vit_rows.push(f_vit);
            conf_rows.push(f_conf);
        }
        let f_eff = g.concat(&eff_rows, 0)?;
        let f_vit = g.concat(&vit_rows, 0)?;
        let f_conf = g.concat(&conf_rows, 0)?;
        let features = fusion::BranchFeatureIds {
            eff: f_eff,
            vit: f_vit,
            conf: f_conf,
        };
        let fused = fusion::fuse(g, &mut binder, &self.cfg, &features, phase, &mut bn_updates)?;
        let logits = head::forward(g, &mut binder, &self.cfg, fused, phase, &mut bn_updates)?;
        Ok((
            ForwardOut {
                logits,
                features,
                stem_activations,
                bn_updates,
            },
            binder,
        ))
    }

    /// Applies accumulated train-mode batch statistics to the running
    /// estimates: per layer, the statistics recorded during the step are
    /// averaged in encounter order, then one momentum update is applied.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)], momentum: f64) {
        let mut grouped: Vec<(&str, Vec<&BatchStats>)> = Vec::new();
        for (name, stats) in updates {
            match grouped.iter_mut().find(|(n, _)| *n == name.as_str()) {
                Some((_, v)) => v.push(stats),
                None => grouped.push((name.as_str(), vec![stats])),
            }
        }
        for (prefix, stats) in grouped {
            let c = stats[0].mean.len();
            let k = stats.len() as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for s in &stats {
                for j in 0..c {
                    mean[j] += s.mean[j] / k;
                    var[j] += s.var_unbiased[j] / k;
                }
            }
            let rm = self.params.get_mut(&format!("{}.running_mean", prefix));
            for (slot, m) in rm.data.iter_mut().zip(mean.iter()) {
                *slot = (1.0 - momentum) * *slot + momentum * m;
            }
            let rv = self.params.get_mut(&format!("{}.running_var", prefix));
            for (slot, v) in rv.data.iter_mut().zip(var.iter()) {
                *slot = (1.0 - momentum) * *slot + momentum * v;
            }
        }
    }

    /// Names of layers Grad-CAM can target, in stem order.
    pub fn gradcam_layers(&self) -> Vec<String> {
        (0..self.cfg.stem_widths.len())
            .map(|i| format!("cnn.stem.stage{}", i))
            .collect()
    }
}
