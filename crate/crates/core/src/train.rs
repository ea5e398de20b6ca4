//! Training: Adam with bias correction, plateau learning-rate decay, early
//! stopping on validation accuracy, balanced class weighting, and the
//! minibatch loop (forward through the three branches, fuse, classify,
//! weighted cross-entropy, backward, update).

use std::io::Write;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::dataset::LoadedDataset;
use crate::error::{Error, Result};
use crate::eval;
use crate::graph::Graph;
use crate::model::{Model, ModelParams, Phase};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub class_weighting: bool,
    /// Strict-improvement tolerance, guarding against float-noise resets.
    pub improvement_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            plateau_factor: 0.5,
            plateau_patience: 7,
            early_stop_patience: 15,
            max_epochs: 40,
            batch_size: 32,
            seed: 42,
            class_weighting: true,
            improvement_tol: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.plateau_factor && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau factor must be in (0,1), got {}",
                self.plateau_factor
            )));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("patience values must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch size must be at least 2 (train-mode batch norm)".into(),
            ));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Optimizer state: per-parameter first/second moments and the shared step
/// count; slots are parallel to the parameter registry.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub slots: Vec<Option<AdamSlot>>,
}

impl AdamState {
    pub fn new(cfg: &TrainConfig, params: &ModelParams) -> Self {
        AdamState {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            slots: vec![None; params.len()],
        }
    }
}

/// One Adam update. Every trainable parameter must have a gradient entry.
/// A parameter whose gradient is entirely zero keeps its value (its moments
/// still decay), so a no-signal step never moves weights.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[(usize, Vec<f64>)],
    st: &mut AdamState,
) -> Result<()> {
    st.t += 1;
    let bc1 = 1.0 - st.beta1.powi(st.t as i32);
    let bc2 = 1.0 - st.beta2.powi(st.t as i32);
    let mut cursor = 0usize;
    let n = params.len();
    for idx in 0..n {
        let trainable = params.entries()[idx].trainable;
        if !trainable {
            continue;
        }
        let grad = loop {
            match grads.get(cursor) {
                Some((gidx, g)) if *gidx == idx => break g,
                Some((gidx, _)) if *gidx < idx => cursor += 1,
                _ => {
                    return Err(Error::Contract(format!(
                        "missing gradient for trainable parameter {}",
                        params.entries()[idx].name
                    )))
                }
            }
        };
        let entry = &mut params.entries_mut()[idx];
        if grad.len() != entry.tensor.numel() {
            return Err(Error::Contract(format!(
                "gradient length {} != parameter {} length {}",
                grad.len(),
                entry.name,
                entry.tensor.numel()
            )));
        }
        let slot = st.slots[idx].get_or_insert_with(|| AdamSlot {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
        });
        let all_zero = grad.iter().all(|&g| g == 0.0);
        for i in 0..grad.len() {
            let g = grad[i];
            slot.m[i] = st.beta1 * slot.m[i] + (1.0 - st.beta1) * g;
            slot.v[i] = st.beta2 * slot.v[i] + (1.0 - st.beta2) * g * g;
            if !all_zero {
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                entry.tensor.data[i] -= st.lr * m_hat / (v_hat.sqrt() + st.eps);
            }
        }
    }
    Ok(())
}

/// Halves (by `factor`) the learning rate after `patience` consecutive
/// epochs without strict improvement of the monitored accuracy.
#[derive(Debug, Clone)]
pub struct ReduceLrOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub tol: f64,
    best: Option<f64>,
    stall: usize,
}

impl ReduceLrOnPlateau {
    pub fn new(factor: f64, patience: usize, tol: f64) -> Self {
        ReduceLrOnPlateau {
            factor,
            patience,
            tol,
            best: None,
            stall: 0,
        }
    }

    /// Observes one epoch's validation accuracy; returns true when the rate
    /// was reduced.
    pub fn observe(&mut self, metric: f64, lr: &mut f64) -> bool {
        match self.best {
            Some(b) if metric <= b + self.tol => {
                self.stall += 1;
                if self.stall >= self.patience {
                    *lr *= self.factor;
                    self.stall = 0;
                    return true;
                }
            }
            _ => {
                self.best = Some(self.best.map_or(metric, |b: f64| b.max(metric)));
                self.stall = 0;
            }
        }
        false
    }
}

/// Stops after `patience` consecutive epochs without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub tol: f64,
    best: Option<f64>,
    pub best_epoch: usize,
    stall: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, tol: f64) -> Self {
        EarlyStopping {
            patience,
            tol,
            best: None,
            best_epoch: 0,
            stall: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Returns (improved, stop).
    pub fn observe(&mut self, epoch: usize, metric: f64) -> (bool, bool) {
        let improved = match self.best {
            Some(b) => metric > b + self.tol,
            None => true,
        };
        if improved {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.stall = 0;
        } else {
            self.stall += 1;
        }
        (improved, self.stall >= self.patience)
    }
}

/// Balanced class weights w_c = N / (C * n_c); unit weights on balanced data.
pub fn class_weights(label_counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = label_counts.iter().sum();
    let c = label_counts.len();
    label_counts
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            if n == 0 {
                Err(Error::Data(format!("class {} has zero samples", i)))
            } else {
                Ok(total as f64 / (c as f64 * n as f64))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.train_acc, self.val_loss, self.val_acc, self.lr
        )
    }
}

pub const METRICS_CSV_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,lr";

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub log: Vec<EpochMetrics>,
    pub stopped_early: bool,
}

fn step_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed.wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add((epoch as u64).wrapping_mul(0xBF58476D1CE4E5B9))
        .wrapping_add((batch as u64).wrapping_mul(0x94D049BB133111EB))
}

/// Builds the batch loss: softmax rows, one weighted cross-entropy per
/// sample, batch mean. Returns (loss id, per-sample predicted classes).
pub fn batch_loss(
    g: &mut Graph,
    logits: crate::graph::TensorId,
    labels: &[usize],
    classes: usize,
    weights: &[f64],
) -> Result<(crate::graph::TensorId, Vec<usize>)> {
    let probs = g.softmax(logits)?;
    let mut ces = Vec::with_capacity(labels.len());
    let mut preds = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let row = g.narrow(probs, 0, i, 1)?;
        let row = g.reshape(row, &[classes])?;
        let mut onehot = Tensor::zeros(&[classes]);
        onehot.data[label] = 1.0;
        ces.push(g.cross_entropy(row, &onehot, weights[label])?);
        let logits_row = &g.data(logits)[i * classes..(i + 1) * classes];
        let pred = logits_row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        preds.push(pred);
    }
    let cat = g.concat(&ces, 0)?;
    let loss = g.mean_all(cat)?;
    Ok((loss, preds))
}

/// Full training loop. On return the model carries the best-epoch parameters
/// (the checkpoint that was also written to `out_dir`, when given).
pub fn train(
    model: &mut Model,
    data: &LoadedDataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    config_snapshot: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.num_classes() < 2 {
        return Err(Error::Config("dataset needs at least 2 classes".into()));
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("empty train or validation split".into()));
    }
    let counts = data.label_counts(&data.train);
    let weights = if cfg.class_weighting {
        class_weights(&counts)?
    } else {
        vec![1.0; data.num_classes()]
    };
    let mut opt = AdamState::new(cfg, &model.params);
    let mut plateau = ReduceLrOnPlateau::new(cfg.plateau_factor, cfg.plateau_patience, cfg.improvement_tol);
    let mut early = EarlyStopping::new(cfg.early_stop_patience, cfg.improvement_tol);
    let mut log: Vec<EpochMetrics> = Vec::new();
    let mut best_params: Option<ModelParams> = None;
    let mut best_opt: Option<AdamState> = None;
    let mut stopped_early = false;

    let csv_path = out_dir.map(|d| d.join("metrics.csv"));
    if let Some(p) = &csv_path {
        std::fs::create_dir_all(p.parent().unwrap())?;
        std::fs::write(p, format!("{}\n", METRICS_CSV_HEADER))?;
    }

    for epoch in 1..=cfg.max_epochs {
        let mut order = data.train.clone();
        let mut shuffle_rng = StdRng::seed_from_u64(step_seed(cfg.seed, epoch, usize::MAX));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue; // train-mode batch norm needs two rows
            }
            let images: Vec<Tensor> = chunk.iter().map(|&i| data.samples[i].to_tensor()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.samples[i].label).collect();
            let mut rng = StdRng::seed_from_u64(step_seed(cfg.seed, epoch, bi));
            let mut phase = Phase::Train(&mut rng);
            let mut g = Graph::new();
            let (fwd, binder) = model.forward_batch(&mut g, &images, &mut phase, true)?;
            let (loss, preds) = batch_loss(&mut g, fwd.logits, &labels, data.num_classes(), &weights)?;
            let loss_val = g.data(loss)[0];
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is not finite at epoch {} batch {}: {}",
                    epoch, bi, loss_val
                )));
            }
            g.backward(loss)?;
            let grads = binder.collect_grads(&mut g);
            adam_step(&mut model.params, &grads, &mut opt)?;
            model.apply_bn_updates(&fwd.bn_updates, model.cfg.bn_momentum);
            loss_sum += loss_val * chunk.len() as f64;
            correct += preds.iter().zip(labels.iter()).filter(|(p, l)| p == l).count();
            seen += chunk.len();
        }
        let train_loss = loss_sum / seen.max(1) as f64;
        let train_acc = correct as f64 / seen.max(1) as f64;

        let val = eval::evaluate(model, data, &data.val, cfg.batch_size)?;
        let row = EpochMetrics {
            epoch,
            train_loss,
            train_acc,
            val_loss: val.mean_loss,
            val_acc: val.accuracy,
            lr: opt.lr,
        };
        if let Some(p) = &csv_path {
            let mut f = std::fs::OpenOptions::new().append(true).open(p)?;
            writeln!(f, "{}", row.csv_row())?;
        }
        log.push(row);

        let (improved, stop) = early.observe(epoch, val.accuracy);
        plateau.observe(val.accuracy, &mut opt.lr);
        if improved {
            best_params = Some(model.params.clone());
            best_opt = Some(opt.clone());
            if let Some(dir) = out_dir {
                crate::checkpoint::save(
                    &dir.join("model.ckpt"),
                    &model.params,
                    Some(&opt),
                    epoch as u32,
                    early.best().unwrap(),
                    config_snapshot,
                )?;
            }
        }
        if stop {
            stopped_early = true;
            break;
        }
    }

    // restore the best-epoch checkpoint into the live model
    if let Some(p) = best_params {
        model.params = p;
    }
    let _ = best_opt;
    Ok(TrainOutcome {
        best_epoch: early.best_epoch,
        best_val_acc: early.best().unwrap_or(0.0),
        log,
        stopped_early,
    })
}
