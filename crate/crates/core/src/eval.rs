//! Evaluation: confusion matrix, the metric suite (accuracy, precision,
//! recall, F1, MCC, Cohen's kappa, macro one-vs-rest AUC, error rate),
//! stratified k-fold planning, and the harness that trains and scores one
//! model per fold.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;

use crate::dataset::LoadedDataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Model, ModelConfig, Phase};
use crate::tensor::Tensor;
use crate::train::{self, TrainConfig};

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, pred)).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for t in 0..self.classes {
            let row: Vec<String> = (0..self.classes).map(|p| self.get(t, p).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// One-vs-rest accuracy of this class.
    pub accuracy: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: usize,
    pub total: u64,
    pub accuracy: f64,
    pub error_rate: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub mcc: f64,
    pub kappa: f64,
    /// Absent when no per-sample scores were supplied.
    pub macro_auc: Option<f64>,
    /// True when any per-class precision/recall hit a zero denominator and
    /// was defined as 0.
    pub zero_division: bool,
}

fn safe_div(num: f64, den: f64, flag: &mut bool) -> f64 {
    if den == 0.0 {
        *flag = true;
        0.0
    } else {
        num / den
    }
}

/// Metric suite over a confusion matrix; `scores` (per-sample class
/// probabilities with true labels) enables the rank-based macro AUC.
pub fn compute_metrics(
    cm: &ConfusionMatrix,
    scores: Option<(&[Vec<f64>], &[usize])>,
) -> Result<EvalReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract("empty confusion matrix".into()));
    }
    let c = cm.classes;
    let s = total as f64;
    let mut zero_division = false;
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let tp = cm.get(k, k) as f64;
        let fp = cm.col_sum(k) as f64 - tp;
        let fnv = cm.row_sum(k) as f64 - tp;
        let tn = s - tp - fp - fnv;
        let precision = safe_div(tp, tp + fp, &mut zero_division);
        let recall = safe_div(tp, tp + fnv, &mut zero_division);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            accuracy: (tp + tn) / s,
            support: cm.row_sum(k),
        });
    }
    let accuracy = cm.trace() as f64 / s;
    let macro_precision = per_class.iter().map(|m| m.precision).sum::<f64>() / c as f64;
    let macro_recall = per_class.iter().map(|m| m.recall).sum::<f64>() / c as f64;
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / c as f64;
    let weighted = |f: fn(&ClassMetrics) -> f64| -> f64 {
        per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / s
    };
    let weighted_precision = weighted(|m| m.precision);
    let weighted_recall = weighted(|m| m.recall);
    let weighted_f1 = weighted(|m| m.f1);

    // multiclass MCC via the covariance form
    let trace = cm.trace() as f64;
    let sum_pt: f64 = (0..c).map(|k| cm.col_sum(k) as f64 * cm.row_sum(k) as f64).sum();
    let sum_p2: f64 = (0..c).map(|k| (cm.col_sum(k) as f64).powi(2)).sum();
    let sum_t2: f64 = (0..c).map(|k| (cm.row_sum(k) as f64).powi(2)).sum();
    let mcc_den = ((s * s - sum_p2) * (s * s - sum_t2)).sqrt();
    let mcc = if mcc_den == 0.0 {
        0.0
    } else {
        (trace * s - sum_pt) / mcc_den
    };

    // Cohen's kappa
    let po = accuracy;
    let pe = sum_pt / (s * s);
    let kappa = if (1.0 - pe).abs() < 1e-15 {
        0.0
    } else {
        (po - pe) / (1.0 - pe)
    };

    let macro_auc = scores.map(|(probs, labels)| macro_ovr_auc(probs, labels, c));

    Ok(EvalReport {
        classes: c,
        total,
        accuracy,
        error_rate: 1.0 - accuracy,
        per_class,
        macro_precision,
        macro_recall,
        macro_f1,
        weighted_precision,
        weighted_recall,
        weighted_f1,
        mcc,
        kappa,
        macro_auc,
        zero_division,
    })
}

/// Macro-averaged one-vs-rest AUC via the Mann-Whitney rank statistic with
/// mid-ranks on ties. Classes without both positives and negatives are
/// skipped.
pub fn macro_ovr_auc(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> f64 {
    let mut aucs = Vec::new();
    for k in 0..classes {
        let mut scored: Vec<(f64, bool)> = probs
            .iter()
            .zip(labels.iter())
            .map(|(p, &l)| (p[k], l == k))
            .collect();
        let n_pos = scored.iter().filter(|(_, pos)| *pos).count();
        let n_neg = scored.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            continue;
        }
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        // mid-rank assignment over tie groups
        let mut rank_sum_pos = 0.0;
        let mut i = 0usize;
        while i < scored.len() {
            let mut j = i;
            while j + 1 < scored.len() && scored[j + 1].0 == scored[i].0 {
                j += 1;
            }
            let mid_rank = (i + j) as f64 / 2.0 + 1.0;
            for item in scored.iter().take(j + 1).skip(i) {
                if item.1 {
                    rank_sum_pos += mid_rank;
                }
            }
            i = j + 1;
        }
        let auc = (rank_sum_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0)
            / (n_pos as f64 * n_neg as f64);
        aucs.push(auc);
    }
    if aucs.is_empty() {
        0.5
    } else {
        aucs.iter().sum::<f64>() / aucs.len() as f64
    }
}

/// Stratified k folds: per class, a seeded shuffle followed by round-robin
/// assignment, so per-class counts differ by at most one across folds.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {}", k)));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (class, mut ids) in per_class.into_iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        if ids.len() < k {
            return Err(Error::Data(format!(
                "class {} has {} samples, fewer than k = {}",
                class,
                ids.len(),
                k
            )));
        }
        let mut rng = StdRng::seed_from_u64(seed.wrapping_add(class as u64).wrapping_mul(0x9E3779B97F4A7C15));
        ids.shuffle(&mut rng);
        for (i, id) in ids.into_iter().enumerate() {
            folds[i % k].push(id);
        }
    }
    for fold in folds.iter_mut() {
        fold.sort_unstable();
    }
    Ok(folds)
}

/// Forward-only evaluation over an index set.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub mean_loss: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    /// Per-sample softmax probabilities, in `indices` order.
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Eval-mode forward over `indices` in deterministic order; batches fan out
/// across the rayon pool (each batch is an independent read-only graph).
pub fn evaluate(
    model: &Model,
    data: &LoadedDataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<EvalOutcome> {
    if indices.is_empty() {
        return Err(Error::Config("evaluate on an empty index set".into()));
    }
    let classes = data.num_classes();
    let chunks: Vec<&[usize]> = indices.chunks(batch_size.max(1)).collect();
    let results: Result<Vec<(Vec<Vec<f64>>, Vec<usize>, f64)>> = chunks
        .par_iter()
        .map(|chunk| {
            let images: Vec<Tensor> = chunk.iter().map(|&i| data.samples[i].to_tensor()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.samples[i].label).collect();
            let mut g = Graph::new();
            let mut phase = Phase::Eval;
            let (fwd, _) = model.forward_batch(&mut g, &images, &mut phase, false)?;
            let probs_id = g.softmax(fwd.logits)?;
            let probs: Vec<Vec<f64>> = g
                .data(probs_id)
                .chunks(classes)
                .map(|r| r.to_vec())
                .collect();
            let mut loss_sum = 0.0;
            for (row, &label) in probs.iter().zip(labels.iter()) {
                loss_sum += -(row[label].max(1e-12)).ln();
            }
            Ok((probs, labels, loss_sum))
        })
        .collect();
    let mut confusion = ConfusionMatrix::new(classes);
    let mut probs = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    let mut loss_sum = 0.0;
    for (p, l, ls) in results? {
        for (row, &label) in p.iter().zip(l.iter()) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            confusion.record(label, pred);
        }
        probs.extend(p);
        labels.extend(l);
        loss_sum += ls;
    }
    let accuracy = confusion.trace() as f64 / confusion.total() as f64;
    Ok(EvalOutcome {
        mean_loss: loss_sum / indices.len() as f64,
        accuracy,
        confusion,
        probs,
        labels,
    })
}

/// Mean and standard deviation of one metric across folds.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldSummary {
    pub mean: f64,
    pub std: f64,
}

fn summarize(values: &[f64]) -> FoldSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    FoldSummary {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug)]
pub struct KfoldOutcome {
    pub fold_reports: Vec<EvalReport>,
    pub accuracy: FoldSummary,
    pub macro_precision: FoldSummary,
    pub macro_recall: FoldSummary,
    pub macro_f1: FoldSummary,
    pub mcc: FoldSummary,
    pub kappa: FoldSummary,
    pub macro_auc: FoldSummary,
}

/// Trains one fresh model per fold (seed = base seed + fold index) on the
/// other k-1 folds and scores the held-out fold.
pub fn run_kfold(
    data: &LoadedDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    k: usize,
) -> Result<KfoldOutcome> {
    let labels = data.labels();
    let folds = stratified_kfold(&labels, k, train_cfg.seed)?;
    let mut fold_reports = Vec::with_capacity(k);
    for (fi, held_out) in folds.iter().enumerate() {
        let train_idx: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != fi)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        let fold_data = LoadedDataset {
            class_names: data.class_names.clone(),
            samples: data.samples.clone(),
            train: train_idx,
            val: held_out.clone(),
            test: held_out.clone(),
        };
        let fold_seed = train_cfg.seed + fi as u64;
        let mut model = Model::init(model_cfg.clone(), fold_seed)?;
        let fold_cfg = TrainConfig {
            seed: fold_seed,
            ..train_cfg.clone()
        };
        train::train(&mut model, &fold_data, &fold_cfg, None, "")?;
        let out = evaluate(&model, &fold_data, held_out, train_cfg.batch_size)?;
        let report = compute_metrics(&out.confusion, Some((&out.probs, &out.labels)))?;
        fold_reports.push(report);
    }
    let pick = |f: fn(&EvalReport) -> f64| -> Vec<f64> { fold_reports.iter().map(f).collect() };
    Ok(KfoldOutcome {
        accuracy: summarize(&pick(|r| r.accuracy)),
        macro_precision: summarize(&pick(|r| r.macro_precision)),
        macro_recall: summarize(&pick(|r| r.macro_recall)),
        macro_f1: summarize(&pick(|r| r.macro_f1)),
        mcc: summarize(&pick(|r| r.mcc)),
        kappa: summarize(&pick(|r| r.kappa)),
        macro_auc: summarize(&pick(|r| r.macro_auc.unwrap_or(0.5))),
        fold_reports,
    })
}

/// report.csv: one row per class followed by aggregate rows.
pub fn report_csv(report: &EvalReport, class_names: &[String]) -> String {
    let mut out = String::from("name,precision,recall,f1,accuracy,support\n");
    for (name, m) in class_names.iter().zip(report.per_class.iter()) {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            name, m.precision, m.recall, m.f1, m.accuracy, m.support
        ));
    }
    out.push_str(&format!(
        "macro,{},{},{},,\n",
        report.macro_precision, report.macro_recall, report.macro_f1
    ));
    out.push_str(&format!(
        "weighted,{},{},{},,\n",
        report.weighted_precision, report.weighted_recall, report.weighted_f1
    ));
    out.push_str(&format!("accuracy,{},,,,\n", report.accuracy));
    out.push_str(&format!("error_rate,{},,,,\n", report.error_rate));
    out.push_str(&format!("mcc,{},,,,\n", report.mcc));
    out.push_str(&format!("kappa,{},,,,\n", report.kappa));
    match report.macro_auc {
        Some(auc) => out.push_str(&format!("macro_auc,{},,,,\n", auc)),
        None => out.push_str("macro_auc,not-available,,,,\n"),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn perfect_diagonal_scores_one_everywhere() {
        let mut cm = ConfusionMatrix::new(4);
        for k in 0..4 {
            for _ in 0..5 {
                cm.record(k, k);
            }
        }
        let r = compute_metrics(&cm, None).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.error_rate, 0.0);
        assert_eq!(r.mcc, 1.0);
        assert_eq!(r.kappa, 1.0);
        assert!(r.per_class.iter().all(|m| m.f1 == 1.0));
        assert!(r.macro_auc.is_none());
    }

    #[test]
    fn independent_predictions_have_zero_kappa() {
        // balanced contingency: predictions independent of truth
        let mut cm = ConfusionMatrix::new(2);
        for t in 0..2 {
            for p in 0..2 {
                for _ in 0..25 {
                    cm.record(t, p);
                }
            }
        }
        let r = compute_metrics(&cm, None).unwrap();
        assert_eq!(r.kappa, 0.0);
        assert_eq!(r.mcc, 0.0);
    }

    #[test]
    fn two_by_two_matches_direct_formula_oracle() {
        let mut cm = ConfusionMatrix::new(2);
        for (t, p, n) in [(0, 0, 5), (0, 1, 1), (1, 0, 2), (1, 1, 4)] {
            for _ in 0..n {
                cm.record(t, p);
            }
        }
        let r = compute_metrics(&cm, None).unwrap();
        assert!((r.accuracy - 0.75).abs() < 1e-15);
        // binary MCC oracle: (tp*tn - fp*fn)/sqrt((tp+fp)(tp+fn)(tn+fp)(tn+fn))
        let (tp, tn, fp, fnv) = (5.0f64, 4.0f64, 2.0f64, 1.0f64);
        let mcc = (tp * tn - fp * fnv) / ((tp + fp) * (tp + fnv) * (tn + fp) * (tn + fnv)).sqrt();
        assert!((r.mcc - mcc).abs() < 1e-12);
        // kappa oracle
        let po = 0.75;
        let pe = (6.0 * 7.0 + 6.0 * 5.0) / 144.0;
        let kappa = (po - pe) / (1.0 - pe);
        assert!((r.kappa - kappa).abs() < 1e-12);
        // per-class precision/recall oracle
        assert!((r.per_class[0].precision - 5.0 / 7.0).abs() < 1e-12);
        assert!((r.per_class[0].recall - 5.0 / 6.0).abs() < 1e-12);
        assert!((r.per_class[1].precision - 4.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_formula_oracle_on_random_matrices() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..100 {
            let c = rng.gen_range(2..5usize);
            let mut cm = ConfusionMatrix::new(c);
            for t in 0..c {
                for p in 0..c {
                    let n = rng.gen_range(0..6u64);
                    for _ in 0..n {
                        cm.record(t, p);
                    }
                }
            }
            if cm.total() == 0 {
                continue;
            }
            let r = compute_metrics(&cm, None).unwrap();
            // accuracy == trace/total exactly
            assert_eq!(r.accuracy, cm.trace() as f64 / cm.total() as f64);
            assert_eq!(r.error_rate, 1.0 - r.accuracy);
            // direct covariance-form MCC: cov(x,y) / sqrt(cov(x,x) cov(y,y))
            let s = cm.total() as f64;
            let mut cov_xy = 0.0;
            for k in 0..c {
                let tk = cm.row_sum(k) as f64;
                let pk = cm.col_sum(k) as f64;
                cov_xy += cm.get(k, k) as f64 * s - tk * pk;
            }
            let sum_p2: f64 = (0..c).map(|k| (cm.col_sum(k) as f64).powi(2)).sum();
            let sum_t2: f64 = (0..c).map(|k| (cm.row_sum(k) as f64).powi(2)).sum();
            let den = ((s * s - sum_p2) * (s * s - sum_t2)).sqrt();
            let expect = if den == 0.0 { 0.0 } else { cov_xy / den };
            assert!((r.mcc - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn mcc_and_kappa_invariant_under_label_permutation() {
        let mut rng = StdRng::seed_from_u64(4);
        let c = 4usize;
        let mut cm = ConfusionMatrix::new(c);
        for t in 0..c {
            for p in 0..c {
                let n = rng.gen_range(0..8u64);
                for _ in 0..n {
                    cm.record(t, p);
                }
            }
        }
        let perm = [2usize, 0, 3, 1];
        let mut pcm = ConfusionMatrix::new(c);
        for t in 0..c {
            for p in 0..c {
                pcm.counts[perm[t] * c + perm[p]] = cm.get(t, p);
            }
        }
        let a = compute_metrics(&cm, None).unwrap();
        let b = compute_metrics(&pcm, None).unwrap();
        assert!((a.mcc - b.mcc).abs() < 1e-12);
        assert!((a.kappa - b.kappa).abs() < 1e-12);
    }

    #[test]
    fn auc_of_perfect_and_constant_scorers() {
        let labels = vec![0, 1, 2, 0, 1, 2, 0];
        let one_hot: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| {
                let mut v = vec![0.0; 3];
                v[l] = 1.0;
                v
            })
            .collect();
        assert_eq!(macro_ovr_auc(&one_hot, &labels, 3), 1.0);
        let constant: Vec<Vec<f64>> = labels.iter().map(|_| vec![0.4, 0.3, 0.3]).collect();
        assert_eq!(macro_ovr_auc(&constant, &labels, 3), 0.5);
    }

    #[test]
    fn auc_matches_pair_counting_oracle() {
        let mut rng = StdRng::seed_from_u64(5);
        for trial in 0..100 {
            let n = rng.gen_range(4..20usize);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3usize)).collect();
            let probs: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    // quantized scores force tie handling
                    let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
                    raw
                })
                .collect();
            // pair-counting oracle per class
            let mut aucs = Vec::new();
            for k in 0..3usize {
                let pos: Vec<f64> = labels
                    .iter()
                    .zip(probs.iter())
                    .filter(|(&l, _)| l == k)
                    .map(|(_, p)| p[k])
                    .collect();
                let neg: Vec<f64> = labels
                    .iter()
                    .zip(probs.iter())
                    .filter(|(&l, _)| l != k)
                    .map(|(_, p)| p[k])
                    .collect();
                if pos.is_empty() || neg.is_empty() {
                    continue;
                }
                let mut score = 0.0;
                for &p in &pos {
                    for &q in &neg {
                        score += if p > q {
                            1.0
                        } else if p == q {
                            0.5
                        } else {
                            0.0
                        };
                    }
                }
                aucs.push(score / (pos.len() * neg.len()) as f64);
            }
            let expect = if aucs.is_empty() {
                0.5
            } else {
                aucs.iter().sum::<f64>() / aucs.len() as f64
            };
            let got = macro_ovr_auc(&probs, &labels, 3);
            assert!((got - expect).abs() < 1e-12, "trial {}: {} vs {}", trial, got, expect);
        }
    }

    #[test]
    fn zero_prediction_column_flags_zero_division() {
        let mut cm = ConfusionMatrix::new(3);
        cm.record(0, 0);
        cm.record(1, 0);
        cm.record(2, 0); // nothing ever predicted as class 1 or 2
        let r = compute_metrics(&cm, None).unwrap();
        assert!(r.zero_division);
        assert_eq!(r.per_class[1].precision, 0.0);
    }

    #[test]
    fn kfold_equal_class_sizes_split_evenly() {
        let labels: Vec<usize> = std::iter::repeat(0).take(10).collect();
        let folds = stratified_kfold(&labels, 5, 1).unwrap();
        for f in &folds {
            assert_eq!(f.len(), 2);
        }
    }

    #[test]
    fn kfold_rejects_small_classes_naming_them() {
        let labels = vec![0, 0, 0, 0, 0, 1, 1, 1];
        let err = stratified_kfold(&labels, 5, 1).unwrap_err().to_string();
        assert!(err.contains("class 1"), "{}", err);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn kfold_invariants_hold_for_random_labels(
            raw in proptest::collection::vec(0usize..6, 30..200),
            seed in 0u64..1000,
        ) {
            // ensure every present class has at least k members
            let k = 4usize;
            let mut labels = raw;
            for c in 0..6 {
                for _ in 0..k {
                    labels.push(c);
                }
            }
            let folds = stratified_kfold(&labels, k, seed).unwrap();
            // disjoint and exhaustive
            let mut seen = vec![false; labels.len()];
            for fold in &folds {
                for &i in fold {
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
            // per-class counts differ by at most one across folds
            for c in 0..6 {
                let counts: Vec<usize> = folds
                    .iter()
                    .map(|f| f.iter().filter(|&&i| labels[i] == c).count())
                    .collect();
                let (mn, mx) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                prop_assert!(mx - mn <= 1, "class {} counts {:?}", c, counts);
            }
        }
    }
}
