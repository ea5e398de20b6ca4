//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its number and name. Run with `cargo test --test acceptance -- --nocapture`.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mhcaf_core::dataset::{synth, LoadedDataset};
use mhcaf_core::eval::{self, ConfusionMatrix};
use mhcaf_core::gradcam;
use mhcaf_core::graph::{grad_check, Activation, Graph, ReduceKind};
use mhcaf_core::imageproc::{self, ChannelOrder, Image, PipelineConfig};
use mhcaf_core::model::{conformer, fusion, head, vit, Binder, Model, ModelConfig, Phase};
use mhcaf_core::tensor::Tensor;
use mhcaf_core::train::{self, class_weights, EarlyStopping, ReduceLrOnPlateau, TrainConfig};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn setup() {
    static ONCE: OnceLock<()> = OnceLock::new();
    ONCE.get_or_init(|| {
        mhcaf_core::tune_allocator();
    });
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = StdRng::seed_from_u64(seed);
    let numel: usize = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn pass(n: usize, name: &str) {
    println!("ACCEPTANCE {:>2} ({}): PASS", n, name);
}

// ── criterion 1 ─────────────────────────────────────────────────────

#[test]
fn criterion_01_gradient_integrity() {
    setup();
    let started = Instant::now();
    let mut worst: (String, f64) = (String::new(), 0.0);
    let mut check = |name: &str, err: f64| {
        assert!(err < 1e-4, "{} gradient error {} exceeds 1e-4", name, err);
        if err > worst.1 {
            worst = (name.to_string(), err);
        }
    };

    // every differentiable op
    check(
        "matmul",
        grad_check(
            |g, id| {
                let w = g.leaf(rand_t(&[5, 3], 2));
                let y = g.matmul(id, w)?;
                g.sum_all(y)
            },
            &rand_t(&[4, 5], 1),
            1e-5,
        )
        .unwrap(),
    );
    check(
        "conv2d",
        grad_check(
            |g, id| {
                let k = g.leaf(rand_t(&[3, 3, 2, 6], 4));
                let y = g.conv2d(id, k, 2, 1, 1)?;
                g.sum_all(y)
            },
            &rand_t(&[6, 6, 2], 3),
            1e-5,
        )
        .unwrap(),
    );
    check(
        "conv2d_depthwise_kernel",
        grad_check(
            |g, id| {
                let x = g.leaf(rand_t(&[6, 6, 4], 5));
                let y = g.conv2d(x, id, 1, 1, 4)?;
                g.sum_all(y)
            },
            &rand_t(&[3, 3, 1, 4], 6),
            1e-5,
        )
        .unwrap(),
    );
    for (kind, name) in [
        (Activation::Relu, "relu"),
        (Activation::Gelu, "gelu"),
        (Activation::Swish, "swish"),
        (Activation::Sigmoid, "sigmoid"),
    ] {
        check(
            name,
            grad_check(
                |g, id| {
                    let y = g.activation(id, kind);
                    let sq = g.mul(y, y)?;
                    g.sum_all(sq)
                },
                &rand_t(&[9], 7),
                1e-5,
            )
            .unwrap(),
        );
    }
    for (kind, name) in [
        (ReduceKind::Gap, "reduce_gap"),
        (ReduceKind::Gmp, "reduce_gmp"),
        (ReduceKind::Mean, "reduce_mean"),
        (ReduceKind::Var, "reduce_var"),
        (ReduceKind::Sum, "reduce_sum"),
    ] {
        check(
            name,
            grad_check(
                |g, id| {
                    let y = g.reduce(id, kind, &[0])?;
                    let sq = g.mul(y, y)?;
                    g.sum_all(sq)
                },
                &rand_t(&[5, 3], 8),
                1e-5,
            )
            .unwrap(),
        );
    }
    check(
        "softmax_layer_norm_batch_norm",
        grad_check(
            |g, id| {
                let gamma = g.leaf(rand_t(&[4], 10));
                let beta = g.leaf(rand_t(&[4], 11));
                let ln = g.layer_norm(id, gamma, beta, 1e-5)?;
                let (bn, _) = g.batch_norm_train(ln, gamma, beta, 1e-5)?;
                let sm = g.softmax(bn)?;
                let w = g.leaf(rand_t(&[3, 4], 12));
                let p = g.mul(sm, w)?;
                g.sum_all(p)
            },
            &rand_t(&[3, 4], 9),
            1e-5,
        )
        .unwrap(),
    );
    check(
        "elementwise_concat_narrow_patches",
        grad_check(
            |g, id| {
                let p = g.patches(id, 2)?;
                let left = g.narrow(p, 1, 0, 6)?;
                let right = g.narrow(p, 1, 6, 6)?;
                let swapped = g.concat(&[right, left], 1)?;
                let sc = g.scale(swapped, 0.7);
                let sq = g.mul(sc, sc)?;
                g.sum_all(sq)
            },
            &rand_t(&[4, 4, 3], 13),
            1e-5,
        )
        .unwrap(),
    );
    check(
        "dropout_cross_entropy",
        grad_check(
            |g, id| {
                let d = g.dropout(id, 0.3, 77)?;
                let sm = g.softmax(d)?;
                let one_hot = Tensor::from_vec(vec![6], vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
                g.cross_entropy(sm, &one_hot, 1.3)
            },
            &rand_t(&[6], 14),
            1e-5,
        )
        .unwrap(),
    );

    // each branch at reduced dims: stem 16x16, d=8, N=4
    let cnn_cfg = ModelConfig {
        input_hw: 16,
        patch: 16,
        ..ModelConfig::tiny(3)
    };
    let cnn_model = Model::init(cnn_cfg.clone(), 20).unwrap();
    check(
        "cnn_branch",
        grad_check(
            |g, id| {
                let mut binder = Binder::new(&cnn_model.params, false);
                let (out, _) =
                    mhcaf_core::model::cnn::branch_forward(g, &mut binder, &cnn_cfg, id, &mut Phase::Eval)?;
                g.sum_all(out)
            },
            &rand_t(&[16, 16, 3], 21),
            1e-5,
        )
        .unwrap(),
    );
    let vit_cfg = ModelConfig {
        input_hw: 32,
        embed_dim: 8,
        heads: 2,
        vit_depth: 1,
        vit_ffn_dim: 16,
        feature_dim: 8,
        stem_widths: vec![4],
        stem_strides: vec![4],
        head_widths: vec![8, 8, 4],
        ..ModelConfig::tiny(3)
    };
    let vit_model = Model::init(vit_cfg.clone(), 22).unwrap();
    check(
        "vit_branch",
        grad_check(
            |g, id| {
                let mut binder = Binder::new(&vit_model.params, false);
                let out = vit::branch_forward(g, &mut binder, &vit_cfg, id, &mut Phase::Eval)?;
                g.sum_all(out)
            },
            &rand_t(&[32, 32, 3], 23),
            1e-5,
        )
        .unwrap(),
    );
    let conf_cfg = ModelConfig {
        embed_dim: 8,
        heads: 2,
        conf_ffn_dim: 16,
        ..ModelConfig::tiny(3)
    };
    let conf_model = Model::init(conf_cfg.clone(), 24).unwrap();
    check(
        "conformer_block",
        grad_check(
            |g, id| {
                let mut binder = Binder::new(&conf_model.params, false);
                let y = conformer::conformer_block(
                    g,
                    &mut binder,
                    &conf_cfg,
                    "conf.block0",
                    id,
                    &Phase::Eval,
                    &mut Vec::new(),
                )?;
                g.sum_all(y)
            },
            &rand_t(&[4, 8], 25),
            1e-5,
        )
        .unwrap(),
    );
    let fuse_cfg = ModelConfig {
        feature_dim: 16,
        fusion_heads: 2,
        ..ModelConfig::tiny(3)
    };
    let fuse_model = Model::init(fuse_cfg.clone(), 26).unwrap();
    check(
        "fusion",
        grad_check(
            |g, id| {
                let mut binder = Binder::new(&fuse_model.params, false);
                let ids = fusion::BranchFeatureIds {
                    eff: g.narrow(id, 0, 0, 1)?,
                    vit: g.narrow(id, 0, 1, 1)?,
                    conf: g.narrow(id, 0, 2, 1)?,
                };
                let out = fusion::fuse(g, &mut binder, &fuse_cfg, &ids, &Phase::Eval, &mut Vec::new())?;
                g.sum_all(out)
            },
            &rand_t(&[3, 16], 27),
            1e-5,
        )
        .unwrap(),
    );
    let head_cfg = ModelConfig {
        feature_dim: 8,
        head_widths: vec![8, 8, 4],
        classes: 3,
        fusion_heads: 2,
        ..ModelConfig::tiny(3)
    };
    let head_model = Model::init(head_cfg.clone(), 28).unwrap();
    check(
        "head",
        grad_check(
            |g, id| {
                let mut binder = Binder::new(&head_model.params, false);
                let out = head::forward(g, &mut binder, &head_cfg, id, &mut Phase::Eval, &mut Vec::new())?;
                let sq = g.mul(out, out)?;
                g.sum_all(sq)
            },
            &rand_t(&[2, 8], 29),
            1e-5,
        )
        .unwrap(),
    );

    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(60),
        "gradient suite took {:?}, budget is 60 s",
        elapsed
    );
    println!(
        "  worst gradient error: {} at {:.3e}; suite time {:?}",
        worst.0, worst.1, elapsed
    );
    pass(1, "gradient integrity");
}

// ── criterion 2 ─────────────────────────────────────────────────────

#[test]
fn criterion_02_shape_contract_ladder() {
    setup();
    let cfg = ModelConfig::default();
    assert_eq!(cfg.token_count(), 64, "N = 64 tokens");
    assert_eq!(cfg.classes, 78);
    let model = Model::init(cfg.clone(), 1).unwrap();
    let mut g = Graph::new();
    let mut phase = Phase::Eval;
    let img = rand_t(&[128, 128, 3], 2);
    let (fwd, _) = model
        .forward_batch(&mut g, std::slice::from_ref(&img), &mut phase, false)
        .unwrap();
    let (_, last_stage) = fwd.stem_activations.last().unwrap();
    assert_eq!(g.shape(*last_stage), &[4, 4, 256], "stem ends at 4x4xw");
    assert_eq!(g.shape(fwd.features.eff), &[1, 512], "F_eff length 512");
    assert_eq!(g.shape(fwd.features.vit), &[1, 512], "F_vit length 512");
    assert_eq!(g.shape(fwd.features.conf), &[1, 512], "F_conf length 512");
    assert_eq!(
        model.params.get("fusion.dense.w").shape,
        vec![1536, 512],
        "W_f is 1536x512 (concat width 1536)"
    );
    assert_eq!(g.shape(fwd.logits), &[1, 78], "78 output logits");
    pass(2, "shape contract ladder");
}

// ── criterion 3 ─────────────────────────────────────────────────────

#[test]
fn criterion_03_normalization_laws() {
    setup();
    let mut g = Graph::new();
    // softmax rows sum to 1
    let z = g.leaf(rand_t(&[20, 11], 1));
    let sm = g.softmax(z).unwrap();
    for row in g.data(sm).chunks(11) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
    // attention weight rows are row-stochastic
    let q = g.leaf(rand_t(&[6, 4], 2));
    let k = g.leaf(rand_t(&[5, 4], 3));
    let kt = g.transpose2d(k).unwrap();
    let scores = g.matmul(q, kt).unwrap();
    let scaled = g.scale(scores, 0.5);
    let w = g.softmax(scaled).unwrap();
    for row in g.data(w).chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
    // layer norm per-token statistics under identity affine
    let x = g.leaf(rand_t(&[10, 16], 4));
    let ones = g.leaf(Tensor::ones(&[16]));
    let zeros = g.leaf(Tensor::zeros(&[16]));
    let ln = g.layer_norm(x, ones, zeros, 1e-9).unwrap();
    for row in g.data(ln).chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() <= 1e-9);
        assert!((var - 1.0).abs() <= 1e-6);
    }
    // gaussian kernel sums to one
    for &sigma in &[0.5, 1.0, 2.0] {
        let k = imageproc::gaussian_kernel(sigma, 2).unwrap();
        assert!((k.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
    pass(3, "normalization laws");
}

// ── criterion 4 ─────────────────────────────────────────────────────

#[test]
fn criterion_04_oracle_equivalence() {
    setup();
    let mut rng = StdRng::seed_from_u64(40);

    // conv2d including depthwise vs direct nested loops
    for trial in 0..100 {
        let depthwise = trial % 2 == 0;
        let h = rng.gen_range(3..8usize);
        let w = rng.gen_range(3..8usize);
        let (cin, groups, cout) = if depthwise {
            let c = rng.gen_range(1..4usize);
            (c, c, c)
        } else {
            (2, 1, rng.gen_range(1..4usize))
        };
        let x: Vec<f64> = (0..h * w * cin).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..9 * (cin / groups) * cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let tx = g.leaf(Tensor::from_vec(vec![h, w, cin], x.clone()).unwrap());
        let tk = g.leaf(Tensor::from_vec(vec![3, 3, cin / groups, cout], k.clone()).unwrap());
        let out = g.conv2d(tx, tk, 1, 1, groups).unwrap();
        // oracle
        for oy in 0..h {
            for ox in 0..w {
                for co in 0..cout {
                    let grp = co / (cout / groups);
                    let mut acc = 0.0;
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            let iy = oy as isize + ky as isize - 1;
                            let ix = ox as isize + kx as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for cl in 0..cin / groups {
                                let ci = grp * (cin / groups) + cl;
                                acc += x[(iy as usize * w + ix as usize) * cin + ci]
                                    * k[((ky * 3 + kx) * (cin / groups) + cl) * cout + co];
                            }
                        }
                    }
                    let got = g.data(out)[(oy * w + ox) * cout + co];
                    assert!((got - acc).abs() <= 1e-12, "conv trial {}", trial);
                }
            }
        }
    }

    // dilation vs naive min filter (exact, integral)
    for trial in 0..100 {
        let h = rng.gen_range(4..12usize);
        let w = rng.gen_range(4..12usize);
        let mut img = Image::new(h, w, 1, ChannelOrder::Gray, 255);
        for p in img.pixels.iter_mut() {
            *p = if rng.gen_bool(0.4) { rng.gen_range(0..255) } else { 255 };
        }
        let out = imageproc::dilate(&img, 3).unwrap();
        for r in 0..h as isize {
            for c in 0..w as isize {
                let mut min = 255u8;
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let sr = (r + dr).clamp(0, h as isize - 1) as usize;
                        let sc = (c + dc).clamp(0, w as isize - 1) as usize;
                        min = min.min(img.get(sr, sc, 0));
                    }
                }
                assert_eq!(out.get(r as usize, c as usize, 0), min, "dilate trial {}", trial);
            }
        }
    }

    // bilinear resize vs direct corner-aligned interpolation (exact)
    for trial in 0..100 {
        let h = rng.gen_range(2..9usize);
        let w = rng.gen_range(2..9usize);
        let oh = rng.gen_range(2..17usize);
        let ow = rng.gen_range(2..17usize);
        let mut img = Image::new(h, w, 1, ChannelOrder::Gray, 0);
        for p in img.pixels.iter_mut() {
            *p = rng.gen();
        }
        let out = imageproc::resize(&img, oh, ow).unwrap();
        for r in 0..oh {
            for c in 0..ow {
                let sr = r as f64 * (h as f64 - 1.0) / (oh as f64 - 1.0);
                let sc = c as f64 * (w as f64 - 1.0) / (ow as f64 - 1.0);
                let (r0, c0) = (sr.floor() as usize, sc.floor() as usize);
                let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
                let (fr, fc) = (sr - r0 as f64, sc - c0 as f64);
                let v = img.get(r0, c0, 0) as f64 * (1.0 - fr) * (1.0 - fc)
                    + img.get(r0, c1, 0) as f64 * (1.0 - fr) * fc
                    + img.get(r1, c0, 0) as f64 * fr * (1.0 - fc)
                    + img.get(r1, c1, 0) as f64 * fr * fc;
                assert_eq!(out.get(r, c, 0), v.round().clamp(0.0, 255.0) as u8, "resize trial {}", trial);
            }
        }
    }

    // MCC and kappa vs direct formulas; AUC vs pair counting
    for trial in 0..100 {
        let c = rng.gen_range(2..5usize);
        let mut cm = ConfusionMatrix::new(c);
        for t in 0..c {
            for p in 0..c {
                for _ in 0..rng.gen_range(0..5u32) {
                    cm.record(t, p);
                }
            }
        }
        if cm.total() == 0 {
            cm.record(0, 0);
        }
        let r = eval::compute_metrics(&cm, None).unwrap();
        let s = cm.total() as f64;
        let mut cov = 0.0;
        for k in 0..c {
            cov += cm.get(k, k) as f64 * s - cm.row_sum(k) as f64 * cm.col_sum(k) as f64;
        }
        let sp: f64 = (0..c).map(|k| (cm.col_sum(k) as f64).powi(2)).sum();
        let st: f64 = (0..c).map(|k| (cm.row_sum(k) as f64).powi(2)).sum();
        let den = ((s * s - sp) * (s * s - st)).sqrt();
        let mcc = if den == 0.0 { 0.0 } else { cov / den };
        assert!((r.mcc - mcc).abs() <= 1e-12, "mcc trial {}", trial);
        let po = cm.trace() as f64 / s;
        let pe: f64 = (0..c).map(|k| cm.row_sum(k) as f64 * cm.col_sum(k) as f64).sum::<f64>() / (s * s);
        let kappa = if (1.0 - pe).abs() < 1e-15 { 0.0 } else { (po - pe) / (1.0 - pe) };
        assert!((r.kappa - kappa).abs() <= 1e-12, "kappa trial {}", trial);

        // AUC vs pair counting with ties
        let n = rng.gen_range(6..16usize);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3usize)).collect();
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.gen_range(0..4) as f64 / 3.0).collect())
            .collect();
        let mut aucs = Vec::new();
        for k in 0..3usize {
            let pos: Vec<f64> = labels.iter().zip(&probs).filter(|(&l, _)| l == k).map(|(_, p)| p[k]).collect();
            let neg: Vec<f64> = labels.iter().zip(&probs).filter(|(&l, _)| l != k).map(|(_, p)| p[k]).collect();
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            let mut score = 0.0;
            for &p in &pos {
                for &q in &neg {
                    score += if p > q { 1.0 } else if p == q { 0.5 } else { 0.0 };
                }
            }
            aucs.push(score / (pos.len() * neg.len()) as f64);
        }
        let expect = if aucs.is_empty() { 0.5 } else { aucs.iter().sum::<f64>() / aucs.len() as f64 };
        let got = eval::macro_ovr_auc(&probs, &labels, 3);
        assert!((got - expect).abs() <= 1e-12, "auc trial {}", trial);
    }
    pass(4, "oracle equivalence");
}

// ── criterion 5 ─────────────────────────────────────────────────────

#[test]
fn criterion_05_residual_identities() {
    setup();
    // zero-parameter Macaron half-step is bitwise identity
    let mut g = Graph::new();
    let x_t = rand_t(&[5, 6], 1);
    let x = g.leaf(x_t.clone());
    let wa = g.leaf(Tensor::zeros(&[6, 12]));
    let ba = g.leaf(Tensor::zeros(&[12]));
    let wb = g.leaf(Tensor::zeros(&[12, 6]));
    let bb = g.leaf(Tensor::zeros(&[6]));
    let y = conformer::macaron_ffn_half(&mut g, x, wa, ba, wb, bb).unwrap();
    assert_eq!(g.data(y), &x_t.data[..], "macaron half-step identity");

    // zero-parameter conformer conv module keeps the residual bitwise
    let ids = conformer::ConvModuleIds {
        pw1_w: g.leaf(Tensor::zeros(&[6, 12])),
        pw1_b: g.leaf(Tensor::zeros(&[12])),
        dw_w: g.leaf(Tensor::zeros(&[3, 1, 1, 12])),
        dw_b: g.leaf(Tensor::zeros(&[12])),
        bn_gamma: g.leaf(Tensor::zeros(&[12])),
        bn_beta: g.leaf(Tensor::zeros(&[12])),
        pw2_w: g.leaf(Tensor::zeros(&[12, 6])),
        pw2_b: g.leaf(Tensor::zeros(&[6])),
    };
    let mode = conformer::ConvBnMode::Eval {
        mean: vec![0.0; 12],
        var: vec![1.0; 12],
    };
    let y = conformer::conformer_conv_module(&mut g, x, &ids, 3, 1e-5, &mode, &mut Vec::new()).unwrap();
    assert_eq!(g.data(y), &x_t.data[..], "conv module identity");

    // cross-attention with zero value projections reduces to LN(f_q)
    let cfg = ModelConfig {
        feature_dim: 16,
        fusion_heads: 2,
        ..ModelConfig::tiny(3)
    };
    let mut model = Model::init(cfg.clone(), 2).unwrap();
    for h in 0..cfg.fusion_heads {
        model.params.get_mut(&format!("fusion.mha1.h{}.wv", h)).data.fill(0.0);
    }
    let mut binder = Binder::new(&model.params, false);
    let fq_t = rand_t(&[2, 16], 3);
    let fq = g.leaf(fq_t.clone());
    let fkv = g.leaf(rand_t(&[2, 16], 4));
    let out = fusion::cross_attend(&mut g, &mut binder, &cfg, "fusion.mha1", fq, fkv).unwrap();
    let ones = g.leaf(Tensor::ones(&[16]));
    let zeros = g.leaf(Tensor::zeros(&[16]));
    let expect = g.layer_norm(fq, ones, zeros, cfg.ln_eps).unwrap();
    for (a, b) in g.data(out).iter().zip(g.data(expect).iter()) {
        assert!((a - b).abs() <= 1e-12, "cross_attend zero-W_V identity");
    }
    pass(5, "residual identities");
}

// ── criterion 6 ─────────────────────────────────────────────────────

#[test]
fn criterion_06_training_loop_semantics() {
    setup();
    // learning rate halves after exactly 7 non-improving epochs
    let mut lr = 5e-4;
    let mut sched = ReduceLrOnPlateau::new(0.5, 7, 1e-6);
    sched.observe(0.9, &mut lr);
    for i in 0..6 {
        assert!(!sched.observe(0.9, &mut lr), "reduced early at stall {}", i + 1);
        assert_eq!(lr, 5e-4);
    }
    assert!(sched.observe(0.9, &mut lr), "no reduction after 7 stalls");
    assert_eq!(lr, 2.5e-4);

    // early stopping triggers after exactly 15 non-improving epochs
    let mut es = EarlyStopping::new(15, 1e-6);
    es.observe(1, 0.8);
    let mut stopped = None;
    for epoch in 2..=40 {
        let (_, stop) = es.observe(epoch, 0.8);
        if stop {
            stopped = Some(epoch);
            break;
        }
    }
    assert_eq!(stopped, Some(16), "best at 1 plus patience 15 stops after epoch 16");

    // balanced counts yield exactly unit weights
    let w = class_weights(&vec![650; 78]).unwrap();
    assert!(w.iter().all(|&v| v == 1.0));

    // initial loss near ln 78 on a 78-class synthetic forward
    let pipe = PipelineConfig::default();
    let data = synth::dataset(78, 10, 6, &pipe).unwrap();
    let cfg = ModelConfig {
        classes: 78,
        ..ModelConfig::default()
    };
    let model = Model::init(cfg, 6).unwrap();
    let mut g = Graph::new();
    let idx: Vec<usize> = data.train.iter().copied().take(16).collect();
    let images: Vec<Tensor> = idx.iter().map(|&i| data.samples[i].to_tensor()).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| data.samples[i].label).collect();
    let mut rng = StdRng::seed_from_u64(7);
    let mut phase = Phase::Train(&mut rng);
    let (fwd, _) = model.forward_batch(&mut g, &images, &mut phase, false).unwrap();
    let (loss, _) = train::batch_loss(&mut g, fwd.logits, &labels, 78, &vec![1.0; 78]).unwrap();
    let loss = g.data(loss)[0];
    let ln78 = (78f64).ln();
    assert!(
        (loss - ln78).abs() <= 0.2 * ln78,
        "initial loss {} outside ln(78) = {} +- 20%",
        loss,
        ln78
    );
    println!("  initial loss {:.4} vs ln(78) = {:.4}", loss, ln78);
    pass(6, "training-loop semantics");
}

// ── criterion 7 + 10 share one trained model ────────────────────────

struct DeskScale {
    model: Model,
    data: LoadedDataset,
    train_acc: f64,
    heldout_acc: f64,
    wall: Duration,
}

fn desk_scale() -> &'static DeskScale {
    static RUN: OnceLock<DeskScale> = OnceLock::new();
    RUN.get_or_init(|| {
        setup();
        let started = Instant::now();
        let pipe = PipelineConfig::default();
        let data = synth::dataset(8, 200, 11, &pipe).unwrap();
        let cfg = ModelConfig {
            classes: 8,
            ..ModelConfig::default()
        };
        let mut model = Model::init(cfg, 11).unwrap();
        let tcfg = TrainConfig {
            seed: 11,
            max_epochs: DESK_EPOCHS,
            ..TrainConfig::default()
        };
        let outcome = train::train(&mut model, &data, &tcfg, None, "").unwrap();
        let train_acc = outcome
            .log
            .iter()
            .map(|m| m.train_acc)
            .fold(f64::NEG_INFINITY, f64::max);
        let heldout = eval::evaluate(&model, &data, &data.test, tcfg.batch_size).unwrap();
        let wall = started.elapsed();
        for m in &outcome.log {
            println!("  {}", m.csv_row());
        }
        println!(
            "  desk-scale: best train acc {:.4}, held-out acc {:.4}, wall {:?}",
            train_acc, heldout.accuracy, wall
        );
        DeskScale {
            model,
            data,
            train_acc,
            heldout_acc: heldout.accuracy,
            wall,
        }
    })
}

const DESK_EPOCHS: usize = 4;

#[test]
fn criterion_07_desk_scale_learning() {
    setup();
    let run = desk_scale();
    assert!(
        run.train_acc >= 0.95,
        "training accuracy {} below 0.95",
        run.train_acc
    );
    assert!(
        run.heldout_acc >= 0.85,
        "held-out accuracy {} below 0.85",
        run.heldout_acc
    );
    assert!(
        run.wall <= Duration::from_secs(900),
        "training took {:?}, budget 15 minutes",
        run.wall
    );
    pass(7, "desk-scale learning");
}

// ── criterion 8 ─────────────────────────────────────────────────────

#[test]
fn criterion_08_kfold_harness() {
    setup();
    // invariants over 1000 random label vectors
    let mut rng = StdRng::seed_from_u64(80);
    for trial in 0..1000 {
        let k = rng.gen_range(2..6usize);
        let classes = rng.gen_range(1..5usize);
        let mut labels: Vec<usize> = Vec::new();
        for c in 0..classes {
            let n = rng.gen_range(k..3 * k + 4);
            labels.extend(std::iter::repeat(c).take(n));
        }
        // shuffle labels
        for i in (1..labels.len()).rev() {
            let j = rng.gen_range(0..=i);
            labels.swap(i, j);
        }
        let folds = eval::stratified_kfold(&labels, k, trial as u64).unwrap();
        let mut seen = vec![false; labels.len()];
        for fold in &folds {
            for &i in fold {
                assert!(!seen[i], "trial {}: overlapping folds", trial);
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "trial {}: folds not exhaustive", trial);
        for c in 0..classes {
            let counts: Vec<usize> = folds
                .iter()
                .map(|f| f.iter().filter(|&&i| labels[i] == c).count())
                .collect();
            let (mn, mx) = (*counts.iter().min().unwrap(), *counts.iter().max().unwrap());
            assert!(mx - mn <= 1, "trial {}: class {} imbalance {:?}", trial, c, counts);
        }
    }

    // toy 3-class run: all folds complete, full metric sets, mean == average
    let pipe = PipelineConfig::default();
    let data = synth::dataset(3, 15, 81, &pipe).unwrap();
    let cfg = ModelConfig::tiny(3);
    let tcfg = TrainConfig {
        seed: 81,
        max_epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let outcome = eval::run_kfold(&data, &cfg, &tcfg, 5).unwrap();
    assert_eq!(outcome.fold_reports.len(), 5);
    for r in &outcome.fold_reports {
        assert_eq!(r.per_class.len(), 3);
        assert!(r.macro_auc.is_some());
        assert!(r.accuracy.is_finite() && r.mcc.is_finite() && r.kappa.is_finite());
    }
    let mean = outcome.fold_reports.iter().map(|r| r.accuracy).sum::<f64>() / 5.0;
    assert!(
        (outcome.accuracy.mean - mean).abs() <= 1e-12,
        "summary mean {} != arithmetic mean {}",
        outcome.accuracy.mean,
        mean
    );
    pass(8, "k-fold harness");
}

// ── criterion 9 ─────────────────────────────────────────────────────

/// An upright matra-dominant glyph built from the drawing primitives, so the
/// applied rotation is the only skew present.
fn upright_glyph(variant: usize) -> Image {
    let mut img = Image::new(128, 128, 1, ChannelOrder::Gray, 255);
    synth::draw_line(&mut img, (30.0, 24.0), (30.0, 104.0), 5.0, 10);
    match variant % 3 {
        0 => synth::draw_line(&mut img, (30.0, 64.0), (98.0, 64.0), 5.0, 10),
        1 => {
            synth::draw_line(&mut img, (30.0, 34.0), (98.0, 34.0), 5.0, 10);
            synth::draw_arc(&mut img, (70.0, 70.0), 16.0, 0.0, 360.0, 5.0, 10);
        }
        _ => {
            synth::draw_line(&mut img, (30.0, 94.0), (98.0, 94.0), 5.0, 10);
            synth::draw_line(&mut img, (98.0, 40.0), (98.0, 94.0), 5.0, 10);
        }
    }
    img
}

#[test]
fn criterion_09_preprocessing_round_trip() {
    setup();
    let mut worst_angle_err: f64 = 0.0;
    let mut worst_iou: f64 = 1.0;
    for (i, &angle) in [3.0, -5.0, 7.5, -10.0, 12.0, -15.0, 15.0].iter().enumerate() {
        let glyph = upright_glyph(i);
        let skewed = imageproc::rotate(&glyph, angle);
        let estimated = imageproc::estimate_skew(&skewed).unwrap();
        worst_angle_err = worst_angle_err.max((estimated - angle).abs());
        assert!(
            (estimated - angle).abs() <= 1.0,
            "skew {} estimated as {}",
            angle,
            estimated
        );
        // round trip: rotate forward then back, foreground IoU >= 0.95
        let back = imageproc::deskew(&skewed, angle);
        let mask = |im: &Image| -> Vec<bool> { im.luma().iter().map(|&v| v < 128).collect() };
        let (a, b) = (mask(&glyph), mask(&back));
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count() as f64;
        let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count() as f64;
        let iou = inter / union.max(1.0);
        worst_iou = worst_iou.min(iou);
        assert!(iou >= 0.95, "round-trip IoU {} at angle {}", iou, angle);
    }
    println!(
        "  worst angle error {:.3} deg, worst round-trip IoU {:.4}",
        worst_angle_err, worst_iou
    );
    pass(9, "preprocessing round trip");
}

// ── criterion 10 ────────────────────────────────────────────────────

#[test]
fn criterion_10_gradcam_sanity() {
    setup();
    // constant-logit model yields the all-zero heatmap
    let cfg = ModelConfig::tiny(3);
    let mut constant = Model::init(cfg, 100).unwrap();
    constant.params.get_mut("head.fc4.w").data.fill(0.0);
    let img = rand_t(&[128, 128, 3], 101);
    let heat = gradcam::grad_cam(&constant, &img, 0, "cnn.stem.stage1").unwrap();
    assert!(heat.values.iter().all(|&v| v == 0.0), "constant logit heatmap not zero");

    // trained model: heatmap mass concentrates on ink. The stroke-scale
    // stage (8 px cells) is the measurement layer: the 4x4 final stage
    // cannot separate ink from background within one 32 px cell after
    // bilinear upsampling.
    let run = desk_scale();
    let layer = "cnn.stem.stage1".to_string();
    let mut hits = 0usize;
    let mut total = 0usize;
    for &i in run.data.test.iter().take(100) {
        let sample = &run.data.samples[i];
        let tensor = sample.to_tensor();
        let heat = gradcam::grad_cam(&run.model, &tensor, sample.label, &layer).unwrap();
        // ink mask from the model input
        let mut ink_sum = 0.0;
        let mut ink_n = 0usize;
        let mut bg_sum = 0.0;
        let mut bg_n = 0usize;
        for px in 0..128 * 128 {
            let luma = (tensor.data[px * 3] + tensor.data[px * 3 + 1] + tensor.data[px * 3 + 2]) / 3.0;
            if luma < 0.5 {
                ink_sum += heat.values[px];
                ink_n += 1;
            } else {
                bg_sum += heat.values[px];
                bg_n += 1;
            }
        }
        if ink_n > 0 && bg_n > 0 && ink_sum / ink_n as f64 > bg_sum / bg_n as f64 {
            hits += 1;
        }
        total += 1;
    }
    let frac = hits as f64 / total as f64;
    println!("  ink-over-background heatmap fraction: {:.2} ({} glyphs)", frac, total);
    assert!(
        frac >= 0.9,
        "only {:.2} of glyphs have heatmap mass on ink",
        frac
    );
    pass(10, "grad-cam sanity");
}

// ── criterion 11 ────────────────────────────────────────────────────

#[test]
fn criterion_11_determinism_and_persistence() {
    setup();
    let pipe = PipelineConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::tiny(3);
    let tcfg = TrainConfig {
        seed: 110,
        max_epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };

    // identical seeds give bitwise-identical metrics CSVs
    let run = |out: &std::path::Path| -> Vec<u8> {
        let data = synth::dataset(3, 12, 110, &pipe).unwrap();
        let mut model = Model::init(cfg.clone(), 110).unwrap();
        train::train(&mut model, &data, &tcfg, Some(out), "snapshot").unwrap();
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    assert_eq!(a, b, "fixed-seed metrics CSVs differ");

    // checkpoint save -> load -> save is byte-identical
    let ckpt1 = dir.path().join("a/model.ckpt");
    let loaded = mhcaf_core::checkpoint::load(&ckpt1).unwrap();
    let ckpt2 = dir.path().join("resaved.ckpt");
    mhcaf_core::checkpoint::save(
        &ckpt2,
        &loaded.params,
        loaded.opt.as_ref(),
        loaded.epoch,
        loaded.best_val_acc,
        &loaded.config,
    )
    .unwrap();
    assert_eq!(
        std::fs::read(&ckpt1).unwrap(),
        std::fs::read(&ckpt2).unwrap(),
        "checkpoint round trip not byte-identical"
    );

    // eval after reload reproduces the confusion matrix exactly
    let data = synth::dataset(3, 12, 110, &pipe).unwrap();
    let mut model = Model::init(cfg.clone(), 110).unwrap();
    train::train(&mut model, &data, &tcfg, None, "").unwrap();
    let before = eval::evaluate(&model, &data, &data.test, 8).unwrap();
    let reloaded = Model {
        cfg: cfg.clone(),
        params: loaded.params,
    };
    // the checkpoint under a/ came from an identical run, so the reloaded
    // model must reproduce the same predictions
    let after = eval::evaluate(&reloaded, &data, &data.test, 8).unwrap();
    assert_eq!(before.confusion, after.confusion, "confusion matrix changed after reload");
    pass(11, "determinism and persistence");
}
