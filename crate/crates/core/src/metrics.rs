//! Classification metrics, percentile bootstrap confidence intervals and the
//! Wilcoxon signed-rank test.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};
use crate::rng::seeded;
use crate::volume::percentile_sorted;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: u8,
    pub score: f64,
}

/// Per-case labels and scores, sorted by id with unique ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    cases: Vec<Prediction>,
}

impl PredictionSet {
    pub fn new(mut cases: Vec<Prediction>) -> Result<Self> {
        cases.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = cases.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(invalid!("duplicate case id {:?}", w[0].id));
        }
        if let Some(c) = cases.iter().find(|c| c.label > 1) {
            return Err(invalid!("label of {:?} must be 0 or 1", c.id));
        }
        if let Some(i) = cases.iter().position(|c| !c.score.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        Ok(Self { cases })
    }

    pub fn from_parts(ids: &[String], labels: &[u8], scores: &[f64]) -> Result<Self> {
        if ids.len() != labels.len() || ids.len() != scores.len() {
            return Err(invalid!("ids, labels and scores differ in length"));
        }
        Self::new(
            ids.iter()
                .zip(labels)
                .zip(scores)
                .map(|((id, &label), &score)| Prediction {
                    id: id.clone(),
                    label,
                    score,
                })
                .collect(),
        )
    }

    pub fn cases(&self) -> &[Prediction] {
        &self.cases
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.cases.iter().map(|c| c.label).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.cases.iter().map(|c| c.score).collect()
    }

    /// The multiset of cases at `indices` (ids may repeat).
    fn resample(&self, indices: &[usize]) -> (Vec<u8>, Vec<f64>) {
        indices.iter().map(|&i| (self.cases[i].label, self.cases[i].score)).unzip()
    }
}

/// Area under the ROC curve as the Mann-Whitney statistic:
/// (concordant pairs + ties / 2) / (positives x negatives).
pub fn roc_auc_scores(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(invalid!("{} labels for {} scores", labels.len(), scores.len()));
    }
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks (1-based) over tied groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum_pos += avg * order[i..j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j;
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = n as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(invalid!("AUC needs both classes ({pos} positives, {neg} negatives)"));
    }
    Ok((rank_sum_pos - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

pub fn roc_auc(predictions: &PredictionSet) -> Result<f64> {
    roc_auc_scores(&predictions.labels(), &predictions.scores())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion-matrix metrics with `score >= threshold` predicted positive.
/// Precision, recall and F1 are 0 when their denominator is 0.
pub fn threshold_metrics_scores(labels: &[u8], scores: &[f64], threshold: f64) -> ThresholdMetrics {
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&l, &s) in labels.iter().zip(scores) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ThresholdMetrics {
        accuracy: ratio(tp + tn, labels.len()),
        precision,
        recall,
        f1,
    }
}

pub fn threshold_metrics(predictions: &PredictionSet, threshold: f64) -> ThresholdMetrics {
    threshold_metrics_scores(&predictions.labels(), &predictions.scores(), threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auc,
    Accuracy,
    Precision,
    Recall,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Auc, Metric::Accuracy, Metric::Precision, Metric::Recall, Metric::F1];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Auc => "auc",
            Metric::Accuracy => "accuracy",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
        }
    }
}

/// Replicate distribution of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub metric: Metric,
    pub replicates: Vec<f64>,
    /// Mean of the replicates, clamped into `[ci_lo, ci_hi]`.
    pub point: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub seed: u64,
}

impl BootstrapResult {
    pub fn from_replicates(metric: Metric, replicates: Vec<f64>, seed: u64) -> Self {
        let (point, ci_lo, ci_hi) = percentile_ci(&replicates);
        Self {
            metric,
            replicates,
            point,
            ci_lo,
            ci_hi,
            seed,
        }
    }
}

/// Mean and 2.5/97.5 percentiles of a replicate vector.
///
/// The mean is clamped into the interval. It can only leave it through
/// rounding on (near-)constant replicates or a single extreme outlier, and
/// reports promise `lo <= point <= hi`.
pub fn percentile_ci(replicates: &[f64]) -> (f64, f64, f64) {
    let mut sorted = replicates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = replicates.iter().sum::<f64>() / replicates.len() as f64;
    let (lo, hi) = (percentile_sorted(&sorted, 2.5), percentile_sorted(&sorted, 97.5));
    (mean.clamp(lo, hi), lo, hi)
}

/// Upper bound on redraws of index sets that lose a class.
pub const MAX_REDRAWS: usize = 1000;

/// Draws `n` resampled index sets of the full size, redrawing any set that
/// lacks one of the classes. Returns the sets and the number of redraws.
fn draw_index_sets<R: Rng + ?Sized>(labels: &[u8], n: usize, rng: &mut R) -> Result<(Vec<Vec<usize>>, usize)> {
    let size = labels.len();
    if size < 2 {
        return Err(invalid!("bootstrap needs at least two cases, got {size}"));
    }
    if !(labels.contains(&0) && labels.contains(&1)) {
        return Err(invalid!("bootstrap of AUC needs both classes in the test set"));
    }
    let mut sets = Vec::with_capacity(n);
    let mut redraws = 0;
    while sets.len() < n {
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..size)).collect();
        let pos = idx.iter().filter(|&&i| labels[i] == 1).count();
        if pos == 0 || pos == size {
            redraws += 1;
            if redraws > MAX_REDRAWS {
                return Err(invalid!("more than {MAX_REDRAWS} single-class resamples"));
            }
            continue;
        }
        sets.push(idx);
    }
    Ok((sets, redraws))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub n: usize,
    pub seed: u64,
    pub threshold: f64,
    /// Index sets redrawn because they lost a class.
    pub redraws: usize,
    pub results: Vec<BootstrapResult>,
}

impl BootstrapReport {
    pub fn get(&self, metric: Metric) -> &BootstrapResult {
        self.results.iter().find(|r| r.metric == metric).expect("every metric is reported")
    }
}

/// Non-parametric bootstrap of all five metrics over the same index sets.
pub fn bootstrap(predictions: &PredictionSet, n: usize, threshold: f64, seed: u64) -> Result<BootstrapReport> {
    if n < 2 {
        return Err(invalid!("bootstrap needs at least 2 replicates, got {n}"));
    }
    let mut rng = seeded(seed);
    let (sets, redraws) = draw_index_sets(&predictions.labels(), n, &mut rng)?;
    let mut per_metric: Vec<Vec<f64>> = vec![Vec::with_capacity(n); Metric::ALL.len()];
    for idx in &sets {
        let (labels, scores) = predictions.resample(idx);
        let tm = threshold_metrics_scores(&labels, &scores, threshold);
        per_metric[0].push(roc_auc_scores(&labels, &scores)?);
        per_metric[1].push(tm.accuracy);
        per_metric[2].push(tm.precision);
        per_metric[3].push(tm.recall);
        per_metric[4].push(tm.f1);
    }
    Ok(BootstrapReport {
        n,
        seed,
        threshold,
        redraws,
        results: Metric::ALL
            .iter()
            .zip(per_metric)
            .map(|(&m, reps)| BootstrapResult::from_replicates(m, reps, seed))
            .collect(),
    })
}

/// Point value and optional 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub point: f64,
    pub ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: MetricValue,
    pub accuracy: MetricValue,
    pub precision: MetricValue,
    pub recall: MetricValue,
    pub f1: MetricValue,
}

impl MetricReport {
    /// Point estimates on the full set, no intervals.
    pub fn point(predictions: &PredictionSet, threshold: f64) -> Result<Self> {
        let tm = threshold_metrics(predictions, threshold);
        let v = |point| MetricValue { point, ci: None };
        Ok(Self {
            auc: v(roc_auc(predictions)?),
            accuracy: v(tm.accuracy),
            precision: v(tm.precision),
            recall: v(tm.recall),
            f1: v(tm.f1),
        })
    }

    /// Bootstrap means with percentile intervals.
    pub fn from_bootstrap(report: &BootstrapReport) -> Self {
        let v = |m| {
            let r = report.get(m);
            MetricValue {
                point: r.point,
                ci: Some((r.ci_lo, r.ci_hi)),
            }
        };
        Self {
            auc: v(Metric::Auc),
            accuracy: v(Metric::Accuracy),
            precision: v(Metric::Precision),
            recall: v(Metric::Recall),
            f1: v(Metric::F1),
        }
    }

    pub fn get(&self, metric: Metric) -> MetricValue {
        match metric {
            Metric::Auc => self.auc,
            Metric::Accuracy => self.accuracy,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::F1 => self.f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ZeroMethod {
    /// Zero differences are discarded before ranking.
    #[default]
    Wilcox,
    /// Zero differences are ranked, then their ranks are discarded.
    Pratt,
}

/// Largest non-zero count for which the exact null distribution is used.
pub const EXACT_MAX: usize = 25;

/// Signed-rank statistic: the absolute ranks of the retained differences
/// (average ranks over ties) and W+ (sum of ranks of positive differences).
fn signed_ranks(d: &[f64], zero: ZeroMethod) -> (Vec<f64>, f64) {
    let pool: Vec<f64> = match zero {
        ZeroMethod::Wilcox => d.iter().copied().filter(|&x| x != 0.0).collect(),
        ZeroMethod::Pratt => d.to_vec(),
    };
    let n = pool.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pool[a].abs().total_cmp(&pool[b].abs()));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && pool[order[j]].abs() == pool[order[i]].abs() {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    let mut kept = Vec::new();
    let mut w_plus = 0.0;
    for (k, &x) in pool.iter().enumerate() {
        if x != 0.0 {
            kept.push(ranks[k]);
            if x > 0.0 {
                w_plus += ranks[k];
            }
        }
    }
    (kept, w_plus)
}

/// Exact two-sided p value: the null distribution of W+ over all `2^m` sign
/// assignments, counted by dynamic programming over doubled ranks.
pub fn wilcoxon_exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let w = (2.0 * w_plus).round() as usize;
    let all = 2f64.powi(ranks.len() as i32);
    let lower: f64 = counts[..=w].iter().sum::<f64>() / all;
    let upper: f64 = counts[w..].iter().sum::<f64>() / all;
    (2.0 * lower.min(upper)).min(1.0)
}

/// Normal approximation with tie-corrected variance and continuity correction.
pub fn wilcoxon_normal_p(ranks: &[f64], w_plus: f64) -> f64 {
    let mean = ranks.iter().sum::<f64>() / 2.0;
    // sum of squared (average) ranks / 4 equals the classical tie-corrected variance
    let var = ranks.iter().map(|r| r * r).sum::<f64>() / 4.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    (2.0 * normal.sf(z)).min(1.0)
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Exact for up to [`EXACT_MAX`] non-zero differences, normal approximation
/// beyond. Returns 1 when every difference is zero; the result is clamped
/// to `(0, 1]`.
pub fn wilcoxon_signed_rank_with(a: &[f64], b: &[f64], zero: ZeroMethod) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid!("paired samples differ in length: {} vs {}", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(invalid!("paired samples are empty"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(invalid!("non-finite paired difference"));
    }
    let (ranks, w_plus) = signed_ranks(&d, zero);
    if ranks.is_empty() {
        return Ok(1.0);
    }
    let p = if ranks.len() <= EXACT_MAX {
        wilcoxon_exact_p(&ranks, w_plus)
    } else {
        wilcoxon_normal_p(&ranks, w_plus)
    };
    Ok(p.clamp(f64::MIN_POSITIVE, 1.0))
}

pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    wilcoxon_signed_rank_with(a, b, ZeroMethod::Wilcox)
}

/// Ranks and W+ of a difference vector, for callers that pick a branch.
pub fn signed_rank_statistic(d: &[f64], zero: ZeroMethod) -> (Vec<f64>, f64) {
    signed_ranks(d, zero)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub n: usize,
    pub seed: u64,
    pub metric_a: BootstrapResult,
    pub metric_b: BootstrapResult,
    pub p_value: f64,
    pub significant: bool,
}

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Paired comparison with a caller-supplied replicate metric. Both methods
/// are evaluated on the same resampled index sets.
pub fn compare_methods_with<F>(a: &PredictionSet, b: &PredictionSet, n: usize, seed: u64, metric: F) -> Result<ComparisonReport>
where
    F: Fn(&PredictionSet, &[usize]) -> Result<f64>,
{
    if n < 2 {
        return Err(invalid!("comparison needs at least 2 replicates, got {n}"));
    }
    if a.len() != b.len() || a.cases.iter().zip(&b.cases).any(|(x, y)| x.id != y.id) {
        return Err(invalid!("the two prediction sets cover different cases"));
    }
    if a.cases.iter().zip(&b.cases).any(|(x, y)| x.label != y.label) {
        return Err(invalid!("the two prediction sets disagree on labels"));
    }
    let mut rng = seeded(seed);
    let (sets, _) = draw_index_sets(&a.labels(), n, &mut rng)?;
    let mut va = Vec::with_capacity(n);
    let mut vb = Vec::with_capacity(n);
    for idx in &sets {
        va.push(metric(a, idx)?);
        vb.push(metric(b, idx)?);
    }
    let p_value = wilcoxon_signed_rank(&va, &vb)?;
    Ok(ComparisonReport {
        n,
        seed,
        metric_a: BootstrapResult::from_replicates(Metric::Auc, va, seed),
        metric_b: BootstrapResult::from_replicates(Metric::Auc, vb, seed),
        p_value,
        significant: p_value < SIGNIFICANCE_LEVEL,
    })
}

/// Paired bootstrap of AUC followed by a signed-rank test on the replicate pairs.
pub fn compare_methods(a: &PredictionSet, b: &PredictionSet, n: usize, seed: u64) -> Result<ComparisonReport> {
    compare_methods_with(a, b, n, seed, |p, idx| {
        let (labels, scores) = p.resample(idx);
        roc_auc_scores(&labels, &scores)
    })
}

#[cfg(test)]
mod tests;
