//! Ranking and overlap metrics with brute-force-checkable definitions.
//!
//! AUPRC is the step-integrated average precision over descending unique
//! thresholds with ties grouped; AUROC is the Mann-Whitney pair statistic
//! with half credit for ties. Both are computed by a single sort so that
//! the O(n^2) enumeration oracles in the tests stay independent code paths.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

fn check_scores(scores: &[f32], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Data("no samples to rank".into()));
    }
    if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {bad}")));
    }
    Ok(())
}

/// Indices sorted by score descending; ties keep input order, which cannot
/// affect either metric because tied scores are processed as one group.
fn descending_order(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    order
}

/// Average precision: sum of (recall step) * precision over descending
/// unique thresholds.
pub fn auprc(scores: &[f32], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::Data("average precision needs at least one positive".into()));
    }
    let order = descending_order(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        // one threshold per group of tied scores
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// Mann-Whitney statistic: the probability that a random positive outranks
/// a random negative, ties worth one half. Computed from midranks.
pub fn auroc(scores: &[f32], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data(format!(
            "auroc needs both polarities, got {n_pos} positives / {n_neg} negatives"
        )));
    }
    let mut order = descending_order(scores);
    order.reverse();
    // ascending scores: midrank of a tie group is the mean of its 1-based ranks
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Overlap 2|A∩B| / (|A|+|B|); two empty masks count as a perfect match.
/// The 0.0-on-empty convention would punish correct all-negative
/// predictions, so it is not used here.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "mask sizes differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let inter = pred.iter().zip(gt).filter(|(&p, &g)| p && g).count();
    let total = pred.iter().filter(|&&p| p).count() + gt.iter().filter(|&&g| g).count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Left-inclusive binning with open ends: bin i covers
/// edges[i-1] <= value < edges[i], bin 0 is below the first edge and bin
/// edges.len() is at or above the last.
pub fn bin_continuous(value: f32, edges: &[f32]) -> Result<usize> {
    if value.is_nan() {
        return Err(Error::Numeric("cannot bin NaN".into()));
    }
    if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("edges {edges:?} are not strictly increasing")));
    }
    Ok(edges.iter().position(|&e| value < e).unwrap_or(edges.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupedValues {
    pub per_group: BTreeMap<String, f64>,
    pub worst_group: f64,
    pub overall: f64,
}

/// Per-group arithmetic means of a per-sample metric, plus the minimum.
/// Grouping never changes the overall mean.
pub fn stratified_metric(values: &[f64], groups: &[String]) -> Result<GroupedValues> {
    if values.len() != groups.len() {
        return Err(Error::Shape(format!(
            "{} values vs {} group labels",
            values.len(),
            groups.len()
        )));
    }
    if values.is_empty() {
        return Err(Error::Data("no samples to stratify".into()));
    }
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (v, g) in values.iter().zip(groups) {
        let e = sums.entry(g).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    let per_group: BTreeMap<String, f64> =
        sums.into_iter().map(|(g, (s, n))| (g.to_string(), s / n as f64)).collect();
    let worst_group = per_group.values().cloned().fold(f64::INFINITY, f64::min);
    let overall = values.iter().sum::<f64>() / values.len() as f64;
    Ok(GroupedValues { per_group, worst_group, overall })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub median: f64,
    pub lo95: f64,
    pub hi95: f64,
}

pub const BOOTSTRAP_RESAMPLES: usize = 500;

/// Percentile bootstrap of the mean: resample with replacement, then take
/// the 2.5/50/97.5 percentiles of the resample means.
pub fn bootstrap_ci(values: &[f64], n_resamples: usize, seed: u64) -> Result<BootstrapCi> {
    if values.is_empty() {
        return Err(Error::Data("bootstrap over an empty sample".into()));
    }
    if n_resamples == 0 {
        return Err(Error::Config("bootstrap needs at least one resample".into()));
    }
    let mut rng = rng::stream(seed, "eval/bootstrap", 0, 0);
    let mut means = Vec::with_capacity(n_resamples);
    for _ in 0..n_resamples {
        let mut sum = 0.0;
        for _ in 0..values.len() {
            sum += values[rand::Rng::random_range(&mut rng, 0..values.len())];
        }
        means.push(sum / values.len() as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite means"));
    Ok(BootstrapCi {
        median: percentile(&means, 0.50),
        lo95: percentile(&means, 0.025),
        hi95: percentile(&means, 0.975),
    })
}

/// Nearest-rank percentile on a sorted slice. Returning an actual element
/// keeps the three reported quantiles ordered and inside the sample range
/// even under floating-point rounding, which interpolation does not.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Aggregate of per-class metric values across repeated runs (folds and/or
/// seeds). `macro_mean` is always the arithmetic mean of `per_class`;
/// `macro_std` is the sample standard deviation of the per-run macros.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metric: String,
    pub classes: Vec<String>,
    /// Per-class mean over the runs where the class was evaluable.
    pub per_class: Vec<f64>,
    pub per_class_std: Vec<f64>,
    pub macro_mean: f64,
    pub macro_std: f64,
    pub runs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub groups: Option<GroupedValues>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapCi>,
}

/// Sample standard deviation; zero for a single observation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricsReport {
    /// `runs[r][c]` is class c's value in run r, or None when the run's
    /// evaluation fold lacked both polarities for that class.
    pub fn from_runs(
        metric: &str,
        classes: &[String],
        runs: &[Vec<Option<f64>>],
    ) -> Result<MetricsReport> {
        if runs.is_empty() || classes.is_empty() {
            return Err(Error::Data("metrics report needs runs and classes".into()));
        }
        let mut per_class = Vec::with_capacity(classes.len());
        let mut per_class_std = Vec::with_capacity(classes.len());
        for (c, name) in classes.iter().enumerate() {
            let vals: Vec<f64> = runs
                .iter()
                .map(|row| {
                    if row.len() != classes.len() {
                        return Err(Error::Shape("ragged runs matrix".into()));
                    }
                    Ok(row[c])
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            if vals.is_empty() {
                return Err(Error::Data(format!(
                    "class {name:?} was evaluable in no run"
                )));
            }
            let (m, s) = mean_std(&vals);
            per_class.push(m);
            per_class_std.push(s);
        }
        let macro_mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
        let run_macros: Vec<f64> = runs
            .iter()
            .filter_map(|row| {
                let vals: Vec<f64> = row.iter().flatten().cloned().collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        let (_, macro_std) = mean_std(&run_macros);
        Ok(MetricsReport {
            metric: metric.to_string(),
            classes: classes.to_vec(),
            per_class,
            per_class_std,
            macro_mean,
            macro_std,
            runs: runs.len(),
            groups: None,
            bootstrap: None,
        })
    }
}
