//! Linear probing of frozen embeddings: independent binary logistic heads
//! per finding class scored with AUPRC/AUROC, and multinomial logistic
//! k-fold accuracy for discrete attributes.
//!
//! All cross-validation splits are grouped by subject id; an image can
//! never share a subject with its evaluation fold. Heads are trained
//! full-batch with the AdamW primitive so probe results are exactly
//! reproducible across runs and platforms.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::formats::embedding::EmbeddingFile;
use crate::numerics::{adamw_step, AdamHyper, AdamState, Tensor};
use crate::rng;

use super::metrics::{auprc, auroc, mean_std, MetricsReport};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub folds: usize,
    pub seeds: u64,
}

impl ProbeConfig {
    pub fn desk_default() -> ProbeConfig {
        ProbeConfig { epochs: 100, lr: 0.01, weight_decay: 1e-4, folds: 5, seeds: 5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("probe needs at least one epoch".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("probe lr {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "probe weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("{} folds cannot cross-validate", self.folds)));
        }
        if self.seeds == 0 {
            return Err(Error::Config("probe needs at least one seed".into()));
        }
        Ok(())
    }
}

/// Per-sample fold indices with every subject confined to one fold.
/// Subjects are permuted by the seed and dealt round-robin, so fold sizes
/// in subjects differ by at most one.
pub fn subject_folds(subjects: &[String], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Config(format!("{k} folds cannot cross-validate")));
    }
    let uniq: Vec<&str> = {
        let set: std::collections::BTreeSet<&str> =
            subjects.iter().map(String::as_str).collect();
        set.into_iter().collect()
    };
    if uniq.len() < k {
        return Err(Error::Data(format!(
            "{} distinct subjects cannot fill {k} folds",
            uniq.len()
        )));
    }
    let perm = rng::permutation(uniq.len(), seed, "eval/folds", 0);
    let fold_of: BTreeMap<&str, usize> =
        perm.iter().enumerate().map(|(rank, &s)| (uniq[s], rank % k)).collect();
    Ok(subjects.iter().map(|s| fold_of[s.as_str()]).collect())
}

/// Linear heads, one row of weights plus one bias per class.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub weights: Tensor<f32>,
    pub bias: Vec<f32>,
}

impl LinearProbe {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    /// Per-class logits for one embedding.
    pub fn scores(&self, x: &[f32]) -> Result<Vec<f32>> {
        let (c, d) = self.weights.dims2()?;
        if x.len() != d {
            return Err(Error::Shape(format!(
                "embedding width {} does not match probe width {d}",
                x.len()
            )));
        }
        let w = self.weights.data();
        Ok((0..c)
            .map(|ci| {
                let row = &w[ci * d..(ci + 1) * d];
                row.iter().zip(x).map(|(&wi, &xi)| wi * xi).sum::<f32>() + self.bias[ci]
            })
            .collect())
    }
}

/// Full-batch logistic regression over flat params [C*(D+1)], bias last.
/// `multinomial` switches the link from per-class sigmoid to softmax.
/// Returns the probe and the per-epoch mean loss trace.
fn fit_logistic(
    xs: &[f32],
    n: usize,
    d: usize,
    labels: &[f32],
    classes: usize,
    multinomial: bool,
    cfg: &ProbeConfig,
) -> Result<(LinearProbe, Vec<f64>)> {
    cfg.validate()?;
    if n == 0 || xs.len() != n * d || labels.len() != n * classes {
        return Err(Error::Shape(format!(
            "probe fit got {} features and {} targets for n={n}, d={d}, c={classes}",
            xs.len(),
            labels.len()
        )));
    }
    let width = d + 1;
    let mut params = vec![0.0f32; classes * width];
    let mut grads = vec![0.0f32; classes * width];
    let mut state = AdamState::<f32>::new(params.len());
    let hyper = AdamHyper::with_decay(cfg.lr as f32, cfg.weight_decay as f32);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let inv_n = 1.0 / n as f64;
    for epoch in 0..cfg.epochs {
        grads.fill(0.0);
        let mut loss = 0.0f64;
        for i in 0..n {
            let x = &xs[i * d..(i + 1) * d];
            let mut z: Vec<f64> = (0..classes)
                .map(|c| {
                    let row = &params[c * width..c * width + d];
                    row.iter().zip(x).map(|(&w, &xi)| (w * xi) as f64).sum::<f64>()
                        + params[c * width + d] as f64
                })
                .collect();
            // residual p - y for either link
            if multinomial {
                let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
                for (c, v) in z.iter_mut().enumerate() {
                    let p = (*v - zmax).exp() / denom;
                    let y = labels[i * classes + c] as f64;
                    if y > 0.0 {
                        loss -= inv_n * p.max(1e-12).ln();
                    }
                    *v = p - y;
                }
            } else {
                for (c, v) in z.iter_mut().enumerate() {
                    let p = 1.0 / (1.0 + (-*v).exp());
                    let y = labels[i * classes + c] as f64;
                    loss -= inv_n / classes as f64
                        * (y * p.max(1e-12).ln() + (1.0 - y) * (1.0 - p).max(1e-12).ln());
                    *v = (p - y) / classes as f64;
                }
            }
            for (c, &res) in z.iter().enumerate() {
                let g = (res * inv_n) as f32;
                let row = &mut grads[c * width..c * width + d];
                for (gw, &xi) in row.iter_mut().zip(x) {
                    *gw += g * xi;
                }
                grads[c * width + d] += g;
            }
        }
        adamw_step(&mut params, &grads, &mut state, &hyper, (epoch + 1) as u64)?;
        losses.push(loss);
    }
    let mut weights = Vec::with_capacity(classes * d);
    let mut bias = Vec::with_capacity(classes);
    for c in 0..classes {
        weights.extend_from_slice(&params[c * width..c * width + d]);
        bias.push(params[c * width + d]);
    }
    Ok((LinearProbe { weights: Tensor::from_vec(&[classes, d], weights)?, bias }, losses))
}

/// Independent binary heads, one per class; exposed for the loss-trace
/// property test and for training on caller-selected subsets.
pub fn fit_binary_heads(
    xs: &[f32],
    n: usize,
    d: usize,
    labels: &[f32],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<(LinearProbe, Vec<f64>)> {
    fit_logistic(xs, n, d, labels, classes, false, cfg)
}

#[derive(Debug)]
pub struct ProbeOutcome {
    /// Heads trained on the full record set.
    pub probe: LinearProbe,
    pub auprc: MetricsReport,
    pub auroc: MetricsReport,
}

fn gather(file: &EmbeddingFile, idx: &[usize]) -> (Vec<f32>, Vec<f32>) {
    let d = file.dim();
    let classes = file.label_count();
    let mut xs = Vec::with_capacity(idx.len() * d);
    let mut ys = Vec::with_capacity(idx.len() * classes);
    for &i in idx {
        xs.extend_from_slice(&file.records[i].cls);
        ys.extend(file.records[i].labels.iter().map(|&b| b as u8 as f32));
    }
    (xs, ys)
}

/// Cross-validated linear probing of the class-token embeddings.
///
/// For every (seed, fold) pair a fresh set of binary heads is trained on
/// the other folds and scored on the held-out fold; classes whose held-out
/// fold lacks a polarity are skipped for that run. The returned probe is
/// retrained on all records.
pub fn train_linear_probe(
    file: &EmbeddingFile,
    classes: &[String],
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    cfg.validate()?;
    let n = file.records.len();
    let d = file.dim();
    if classes.len() != file.label_count() {
        return Err(Error::Shape(format!(
            "{} class names for {} label bits",
            classes.len(),
            file.label_count()
        )));
    }
    if n < 2 {
        return Err(Error::Data(format!("{n} records cannot be cross-validated")));
    }
    for (c, name) in classes.iter().enumerate() {
        let pos = file.records.iter().filter(|r| r.labels[c]).count();
        if pos < 2 || pos > n - 1 {
            return Err(Error::Data(format!(
                "class {name:?} has {pos}/{n} positives; probing needs 2..=n-1"
            )));
        }
    }
    let subjects: Vec<String> = file.records.iter().map(|r| r.subject.clone()).collect();

    let mut auprc_runs = Vec::new();
    let mut auroc_runs = Vec::new();
    for seed in 0..cfg.seeds {
        let fold_of = subject_folds(&subjects, cfg.folds, seed)?;
        for fold in 0..cfg.folds {
            let train_idx: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
            let eval_idx: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
            if train_idx.is_empty() || eval_idx.is_empty() {
                return Err(Error::Data(format!("fold {fold} of seed {seed} is empty")));
            }
            let (xs, ys) = gather(file, &train_idx);
            let (head, _) = fit_logistic(&xs, train_idx.len(), d, &ys, classes.len(), false, cfg)?;
            let scored: Vec<Vec<f32>> = eval_idx
                .iter()
                .map(|&i| head.scores(&file.records[i].cls))
                .collect::<Result<_>>()?;
            let mut ap_row = Vec::with_capacity(classes.len());
            let mut auc_row = Vec::with_capacity(classes.len());
            for c in 0..classes.len() {
                let scores: Vec<f32> = scored.iter().map(|s| s[c]).collect();
                let truth: Vec<bool> =
                    eval_idx.iter().map(|&i| file.records[i].labels[c]).collect();
                let pos = truth.iter().filter(|&&t| t).count();
                ap_row.push((pos >= 1).then(|| auprc(&scores, &truth)).transpose()?);
                auc_row
                    .push((pos >= 1 && pos < truth.len()).then(|| auroc(&scores, &truth)).transpose()?);
            }
            auprc_runs.push(ap_row);
            auroc_runs.push(auc_row);
        }
    }
    let (xs, ys) = gather(file, &(0..n).collect::<Vec<_>>());
    let (probe, _) = fit_logistic(&xs, n, d, &ys, classes.len(), false, cfg)?;
    Ok(ProbeOutcome {
        probe,
        auprc: MetricsReport::from_runs("auprc", classes, &auprc_runs)?,
        auroc: MetricsReport::from_runs("auroc", classes, &auroc_runs)?,
    })
}

/// Accuracy of always answering the most common class.
pub fn majority_baseline(labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Data("no labels".into()));
    }
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    Ok(*counts.values().max().expect("non-empty") as f64 / labels.len() as f64)
}

/// Subject-grouped k-fold multinomial logistic regression accuracy,
/// reported as (mean, std) over folds.
pub fn kfold_linear_accuracy(
    file: &EmbeddingFile,
    labels: &[usize],
    k: usize,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<(f64, f64)> {
    let n = file.records.len();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} records", labels.len())));
    }
    if n == 0 {
        return Err(Error::Data("no records".into()));
    }
    let classes = labels.iter().max().expect("non-empty") + 1;
    for c in 0..classes {
        let count = labels.iter().filter(|&&l| l == c).count();
        if count < k {
            return Err(Error::Data(format!(
                "class {c} has {count} samples, fewer than {k} folds"
            )));
        }
    }
    let subjects: Vec<String> = file.records.iter().map(|r| r.subject.clone()).collect();
    let fold_of = subject_folds(&subjects, k, seed)?;
    let d = file.dim();
    let mut accs = Vec::with_capacity(k);
    for fold in 0..k {
        let train_idx: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
        let eval_idx: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
        for c in 0..classes {
            if !train_idx.iter().any(|&i| labels[i] == c) {
                return Err(Error::Data(format!(
                    "class {c} is absent from the training side of fold {fold}"
                )));
            }
        }
        let mut xs = Vec::with_capacity(train_idx.len() * d);
        let mut ys = vec![0.0f32; train_idx.len() * classes];
        for (row, &i) in train_idx.iter().enumerate() {
            xs.extend_from_slice(&file.records[i].cls);
            ys[row * classes + labels[i]] = 1.0;
        }
        let (head, _) = fit_logistic(&xs, train_idx.len(), d, &ys, classes, true, cfg)?;
        let mut hits = 0usize;
        for &i in &eval_idx {
            let scores = head.scores(&file.records[i].cls)?;
            let pred = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite scores"))
                .expect("non-empty scores")
                .0;
            hits += usize::from(pred == labels[i]);
        }
        if eval_idx.is_empty() {
            return Err(Error::Data(format!("fold {fold} holds no evaluation samples")));
        }
        accs.push(hits as f64 / eval_idx.len() as f64);
    }
    Ok(mean_std(&accs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::embedding::EmbeddingRecord;
    use rand::Rng;

    fn file_from(
        xs: &[Vec<f32>],
        labels: &[Vec<bool>],
        subjects: &[String],
    ) -> EmbeddingFile {
        let records = xs
            .iter()
            .zip(labels)
            .zip(subjects)
            .enumerate()
            .map(|(i, ((x, l), s))| EmbeddingRecord {
                id: format!("r{i}"),
                subject: s.clone(),
                cls: x.clone(),
                patches: None,
                labels: l.clone(),
                attrs: vec![],
            })
            .collect();
        EmbeddingFile { records }
    }

    fn unique_subjects(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:04}")).collect()
    }

    #[test]
    fn subject_folds_partition_without_leakage() {
        // three images per subject
        let subjects: Vec<String> = (0..30).map(|i| format!("s{}", i / 3)).collect();
        let folds = subject_folds(&subjects, 5, 3).unwrap();
        assert_eq!(folds.len(), subjects.len());
        let mut fold_of: BTreeMap<&str, usize> = BTreeMap::new();
        for (s, &f) in subjects.iter().zip(&folds) {
            assert!(f < 5);
            // a subject may never straddle folds
            assert_eq!(*fold_of.entry(s).or_insert(f), f);
        }
        let mut sizes = [0usize; 5];
        for (_, f) in fold_of {
            sizes[f] += 1;
        }
        assert_eq!(sizes, [2; 5]);
        assert!(subject_folds(&subjects, 1, 0).is_err());
        assert!(subject_folds(&subjects[..3], 5, 0).is_err());
    }

    #[test]
    fn separable_labels_reach_perfect_train_auprc() {
        let mut rng = crate::rng::stream(4, "test/probe-sep", 0, 0);
        let n = 40;
        let xs: Vec<Vec<f32>> = (0..n)
            .map(|i| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![sign * (1.0 + rng.random::<f32>()), rng.random::<f32>() - 0.5]
            })
            .collect();
        let labels: Vec<Vec<bool>> = xs.iter().map(|x| vec![x[0] > 0.0]).collect();
        let file = file_from(&xs, &labels, &unique_subjects(n));
        let cfg = ProbeConfig { folds: 4, seeds: 1, ..ProbeConfig::desk_default() };
        let out = train_linear_probe(&file, &["right_half".to_string()], &cfg).unwrap();
        let scores: Vec<f32> =
            file.records.iter().map(|r| out.probe.scores(&r.cls).unwrap()[0]).collect();
        let truth: Vec<bool> = labels.iter().map(|l| l[0]).collect();
        assert_eq!(auprc(&scores, &truth).unwrap(), 1.0);
        assert_eq!(auroc(&scores, &truth).unwrap(), 1.0);
        // cross-validated score on separable data is also perfect
        assert!(out.auprc.macro_mean > 0.99, "cv auprc {}", out.auprc.macro_mean);
    }

    #[test]
    fn shuffled_labels_score_near_prevalence() {
        let mut rng = crate::rng::stream(11, "test/probe-null", 0, 0);
        let n = 1000;
        let xs: Vec<Vec<f32>> =
            (0..n).map(|_| vec![rng.random::<f32>() - 0.5, rng.random::<f32>() - 0.5]).collect();
        // labels drawn independently of the embeddings
        let labels: Vec<Vec<bool>> = (0..n).map(|_| vec![rng.random::<f32>() < 0.3]).collect();
        let file = file_from(&xs, &labels, &unique_subjects(n));
        let cfg = ProbeConfig { seeds: 2, ..ProbeConfig::desk_default() };
        let out = train_linear_probe(&file, &["noise".to_string()], &cfg).unwrap();
        assert!(
            (0.2..=0.4).contains(&out.auprc.macro_mean),
            "null auprc {}",
            out.auprc.macro_mean
        );
        assert!((0.4..=0.6).contains(&out.auroc.macro_mean));
    }

    #[test]
    fn training_loss_is_monotone_at_small_lr() {
        let mut rng = crate::rng::stream(2, "test/probe-loss", 0, 0);
        let n = 16;
        let d = 4;
        let xs: Vec<f32> = (0..n * d).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
        let mut ys = vec![0.0f32; n * 2];
        for i in 0..n {
            ys[i * 2] = (i % 2) as f32;
            ys[i * 2 + 1] = (xs[i * d] > 0.0) as u8 as f32;
        }
        let cfg = ProbeConfig { lr: 1e-4, epochs: 120, ..ProbeConfig::desk_default() };
        let (_, losses) = fit_binary_heads(&xs, n, d, &ys, 2, &cfg).unwrap();
        assert_eq!(losses.len(), 120);
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss rose {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn single_polarity_classes_are_rejected() {
        let xs: Vec<Vec<f32>> = (0..8).map(|i| vec![i as f32]).collect();
        let subjects = unique_subjects(8);
        let all_pos: Vec<Vec<bool>> = (0..8).map(|_| vec![true]).collect();
        let file = file_from(&xs, &all_pos, &subjects);
        let cfg = ProbeConfig { folds: 2, seeds: 1, ..ProbeConfig::desk_default() };
        let err = train_linear_probe(&file, &["c".to_string()], &cfg).unwrap_err();
        assert!(err.to_string().contains("positives"), "{err}");

        let one_pos: Vec<Vec<bool>> = (0..8).map(|i| vec![i == 0]).collect();
        let file = file_from(&xs, &one_pos, &subjects);
        assert!(train_linear_probe(&file, &["c".to_string()], &cfg).is_err());
    }

    #[test]
    fn kfold_accuracy_separates_gaussian_blobs() {
        let mut rng = crate::rng::stream(6, "test/probe-blobs", 0, 0);
        let centers = [[0.0f32, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let n = 150;
        let mut xs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 3;
            let mut jitter = || {
                let (a, b): (f32, f32) = (rng.random(), rng.random());
                // Box-Muller with sigma 0.01
                0.01 * (-2.0 * a.max(1e-7).ln()).sqrt()
                    * (2.0 * std::f32::consts::PI * b).cos()
            };
            xs.push(vec![centers[c][0] + jitter(), centers[c][1] + jitter()]);
            labels.push(c);
        }
        let bits: Vec<Vec<bool>> = labels.iter().map(|_| vec![]).collect();
        let file = file_from(&xs, &bits, &unique_subjects(n));
        let cfg = ProbeConfig::desk_default();
        let (mean, std) = kfold_linear_accuracy(&file, &labels, 5, 0, &cfg).unwrap();
        assert!(mean > 0.99, "blob accuracy {mean} (std {std})");

        assert_eq!(majority_baseline(&[0, 0, 1, 2]).unwrap(), 0.5);
        assert_eq!(majority_baseline(&labels).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn kfold_rejects_class_missing_from_a_training_fold() {
        // class 1 has five samples, enough for five folds, but they all
        // share one subject; the fold holding that subject leaves the
        // complementary training side without class 1
        let xs: Vec<Vec<f32>> = (0..15).map(|i| vec![i as f32, 0.0]).collect();
        let subjects: Vec<String> =
            (0..15).map(|i| if i < 10 { format!("s{i}") } else { "sx".to_string() }).collect();
        let labels: Vec<usize> = (0..15).map(|i| usize::from(i >= 10)).collect();
        let file = file_from(&xs, &vec![vec![]; 15], &subjects);
        let cfg = ProbeConfig::desk_default();
        let err = kfold_linear_accuracy(&file, &labels, 5, 0, &cfg).unwrap_err();
        assert!(err.to_string().contains("absent"), "{err}");

        // more folds than samples of a class is rejected up front
        assert!(kfold_linear_accuracy(&file, &labels, 6, 0, &cfg).is_err());
    }
}
