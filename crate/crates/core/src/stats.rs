//! Classification metrics, paired bootstrap comparisons and ablation tables.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Rows are true classes, columns predicted classes.
    pub counts: Vec<Vec<usize>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("true\\pred,{}\n", self.class_names.join(","));
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            s.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub support: usize,
    /// Names of metrics whose denominator was zero (reported as 0).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Row-major `c × c` counts.
fn confusion_counts(y_true: &[usize], y_pred: &[usize], c: usize, idx: Option<&[usize]>) -> Vec<usize> {
    let mut m = vec![0; c * c];
    match idx {
        Some(idx) => idx.iter().for_each(|&i| m[y_true[i] * c + y_pred[i]] += 1),
        None => y_true.iter().zip(y_pred).for_each(|(&t, &p)| m[t * c + p] += 1),
    }
    m
}

fn metrics_from_counts(m: &[usize], c: usize) -> MetricSet {
    let n: usize = m.iter().sum();
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let tp = m[k * c + k];
        let support: usize = (0..c).map(|j| m[k * c + j]).sum();
        let predicted: usize = (0..c).map(|i| m[i * c + k]).sum();
        let fp = predicted - tp;
        let fn_ = support - tp;
        let tn = n - tp - fp - fn_;
        let mut undefined = Vec::new();
        let mut take = |name: &str, v: Option<f64>| {
            v.unwrap_or_else(|| {
                undefined.push(name.to_string());
                0.0
            })
        };
        let precision = take("precision", ratio(tp, tp + fp));
        let recall = take("recall", ratio(tp, tp + fn_));
        let specificity = take("specificity", ratio(tn, tn + fp));
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            undefined.push("f1".into());
            0.0
        };
        per_class.push(ClassMetrics { precision, recall, f1, specificity, support, undefined });
    }
    let nf = n as f64;
    let weighted = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / nf;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
    MetricSet {
        accuracy: (0..c).map(|k| m[k * c + k]).sum::<usize>() as f64 / nf,
        weighted_precision: weighted(|m| m.precision),
        weighted_recall: weighted(|m| m.recall),
        weighted_f1: weighted(|m| m.f1),
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
    }
}

fn check_labels(y_true: &[usize], preds: &[&[usize]], c: usize) -> Result<()> {
    if y_true.is_empty() {
        return Err(Error::InvalidInput("no labels".into()));
    }
    for p in preds {
        if p.len() != y_true.len() {
            return Err(Error::InvalidInput(format!(
                "{} predictions for {} labels",
                p.len(),
                y_true.len()
            )));
        }
    }
    if let Some(&bad) = y_true.iter().chain(preds.iter().flat_map(|p| p.iter())).find(|&&v| v >= c) {
        return Err(Error::InvalidInput(format!("label {bad} out of range for {c} classes")));
    }
    Ok(())
}

/// Confusion matrix and metrics. Empty denominators yield 0 and are listed in
/// each class's `undefined` field.
pub fn evaluate(y_true: &[usize], y_pred: &[usize], class_names: &[String]) -> Result<(ConfusionMatrix, MetricSet)> {
    let c = class_names.len();
    check_labels(y_true, &[y_pred], c)?;
    let m = confusion_counts(y_true, y_pred, c, None);
    let counts = m.chunks(c).map(|r| r.to_vec()).collect();
    Ok((ConfusionMatrix { counts, class_names: class_names.to_vec() }, metrics_from_counts(&m, c)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    WeightedPrecision,
    WeightedRecall,
    WeightedF1,
    MacroF1,
}

impl Metric {
    pub const WEIGHTED: [Metric; 4] =
        [Metric::Accuracy, Metric::WeightedPrecision, Metric::WeightedRecall, Metric::WeightedF1];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::WeightedPrecision => "weighted_precision",
            Metric::WeightedRecall => "weighted_recall",
            Metric::WeightedF1 => "weighted_f1",
            Metric::MacroF1 => "macro_f1",
        }
    }

    pub fn of(&self, m: &MetricSet) -> f64 {
        match self {
            Metric::Accuracy => m.accuracy,
            Metric::WeightedPrecision => m.weighted_precision,
            Metric::WeightedRecall => m.weighted_recall,
            Metric::WeightedF1 => m.weighted_f1,
            Metric::MacroF1 => m.macro_f1,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Metric::Accuracy, Metric::WeightedPrecision, Metric::WeightedRecall, Metric::WeightedF1, Metric::MacroF1]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffLabel {
    Complementarity,
    Redundancy,
    Comparison,
}

impl fmt::Display for DiffLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiffLabel::Complementarity => "complementarity",
            DiffLabel::Redundancy => "redundancy",
            DiffLabel::Comparison => "comparison",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffResult {
    pub metric: String,
    pub label: DiffLabel,
    pub mean_diff: f64,
    pub ci95: (f64, f64),
    /// Share of Δ ≤ 0 (ties included).
    pub p_le0: f64,
    /// Share of Δ > 0; the posterior P(Δ > 0).
    pub p_gt0: f64,
    /// Share of Δ = 0.
    pub p_eq0: f64,
    /// Δ per resample, in resample order.
    pub samples: Vec<f64>,
}

impl DiffResult {
    pub fn from_samples(metric: &str, label: DiffLabel, samples: Vec<f64>) -> Self {
        let b = samples.len() as f64;
        let mean_diff = samples.iter().sum::<f64>() / b;
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let ci95 = (percentile(&sorted, 2.5), percentile(&sorted, 97.5));
        let p_le0 = samples.iter().filter(|&&d| d <= 0.0).count() as f64 / b;
        let p_gt0 = samples.iter().filter(|&&d| d > 0.0).count() as f64 / b;
        let p_eq0 = samples.iter().filter(|&&d| d == 0.0).count() as f64 / b;
        Self { metric: metric.to_string(), label, mean_diff, ci95, p_le0, p_gt0, p_eq0, samples }
    }

    /// Ascending samples, for violin or strip plots.
    pub fn sorted_samples(&self) -> Vec<f64> {
        let mut s = self.samples.clone();
        s.sort_by(f64::total_cmp);
        s
    }
}

/// Linear-interpolated percentile of ascending data, `q` in [0, 100].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub const MIN_RESAMPLES: usize = 100;

/// Key for one resampling stream: SHA-256 of the seed and a stream name.
pub fn stream_key(seed: u64, name: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    h.finalize().into()
}

/// Applies `stat` to `b` index resamples (with replacement) of `0..n`.
/// Resample `i` draws from its own ChaCha stream, so the output does not
/// depend on thread count or scheduling.
pub fn resample<F>(n: usize, b: usize, key: [u8; 32], stat: F) -> Vec<f64>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    (0..b)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::from_seed(key);
            rng.set_stream(i as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            stat(&idx)
        })
        .collect()
}

fn diff_samples(y_true: &[usize], a: &[usize], b: &[usize], c: usize, metric: Metric, iters: usize, seed: u64) -> Vec<f64> {
    resample(y_true.len(), iters, stream_key(seed, metric.name()), |idx| {
        let ma = metrics_from_counts(&confusion_counts(y_true, a, c, Some(idx)), c);
        let mb = metrics_from_counts(&confusion_counts(y_true, b, c, Some(idx)), c);
        metric.of(&ma) - metric.of(&mb)
    })
}

/// Paired bootstrap of `metric(A) − metric(B)` over test indices.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_diff(
    y_true: &[usize],
    pred_a: &[usize],
    pred_b: &[usize],
    n_classes: usize,
    metric: Metric,
    iters: usize,
    seed: u64,
    label: DiffLabel,
) -> Result<DiffResult> {
    check_labels(y_true, &[pred_a, pred_b], n_classes)?;
    if iters < MIN_RESAMPLES {
        return Err(Error::InvalidInput(format!("need at least {MIN_RESAMPLES} resamples, got {iters}")));
    }
    let s = diff_samples(y_true, pred_a, pred_b, n_classes, metric, iters, seed);
    Ok(DiffResult::from_samples(metric.name(), label, s))
}

/// Bootstrap-as-posterior comparison over several metrics; `p_gt0` is the
/// posterior probability that A beats B.
pub fn bayes_compare(
    y_true: &[usize],
    pred_a: &[usize],
    pred_b: &[usize],
    n_classes: usize,
    metrics: &[Metric],
    iters: usize,
    seed: u64,
) -> Result<Vec<DiffResult>> {
    metrics
        .iter()
        .map(|&m| bootstrap_diff(y_true, pred_a, pred_b, n_classes, m, iters, seed, DiffLabel::Comparison))
        .collect()
}

/// `model_a,model_b,label,metric,mean_diff,ci_lo,ci_hi,p_le0,p_gt0` rows.
pub fn diffs_csv(rows: &[PairDiff]) -> String {
    let mut s = String::from("model_a,model_b,label,metric,mean_diff,ci_lo,ci_hi,p_le0,p_gt0\n");
    for r in rows {
        for d in &r.results {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.model_a, r.model_b, d.label, d.metric, d.mean_diff, d.ci95.0, d.ci95.1, d.p_le0, d.p_gt0
            ));
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPair {
    pub model_a: String,
    pub model_b: String,
    pub label: DiffLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub pairs: Vec<AblationPair>,
    pub metrics: Vec<Metric>,
    pub iters: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDiff {
    pub model_a: String,
    pub model_b: String,
    pub results: Vec<DiffResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    /// Sorted by accuracy (descending), then model name.
    pub rows: Vec<AblationRow>,
    pub diffs: Vec<PairDiff>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,accuracy,weighted_precision,weighted_recall,weighted_f1,macro_f1\n");
        for r in &self.rows {
            let m = &r.metrics;
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.model, m.accuracy, m.weighted_precision, m.weighted_recall, m.weighted_f1, m.macro_f1
            ));
        }
        s
    }

    pub fn row(&self, model: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.model == model)
    }
}

/// Metrics for every model plus bootstrap differences for the configured pairs.
pub fn run_ablation(
    models: &[(String, Vec<usize>)],
    y_true: &[usize],
    class_names: &[String],
    cfg: &AblationConfig,
) -> Result<AblationTable> {
    if models.len() < 2 {
        return Err(Error::InvalidInput("ablation needs at least two models".into()));
    }
    let mut rows = models
        .iter()
        .map(|(name, pred)| Ok(AblationRow { model: name.clone(), metrics: evaluate(y_true, pred, class_names)?.1 }))
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| b.metrics.accuracy.total_cmp(&a.metrics.accuracy).then_with(|| a.model.cmp(&b.model)));
    let find = |name: &str| {
        models
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Config(format!("ablation pair names unknown model `{name}`")))
    };
    let mut diffs = Vec::new();
    for pair in &cfg.pairs {
        let (a, b) = (find(&pair.model_a)?, find(&pair.model_b)?);
        let results = cfg
            .metrics
            .iter()
            .map(|&m| bootstrap_diff(y_true, a, b, class_names.len(), m, cfg.iters, cfg.seed, pair.label))
            .collect::<Result<Vec<_>>>()?;
        diffs.push(PairDiff { model_a: pair.model_a.clone(), model_b: pair.model_b.clone(), results });
    }
    Ok(AblationTable { rows, diffs })
}

/// Minimal SVG strip plot: one row of Δ samples per result, zero line dashed.
pub fn strip_plot_svg(results: &[DiffResult]) -> String {
    let (w, row_h, left) = (640.0, 40.0, 150.0);
    let h = row_h * results.len().max(1) as f64 + 30.0;
    let all = results.iter().flat_map(|r| r.samples.iter().cloned());
    let (lo, hi) = all.fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |v: f64| left + (v - lo) / span * (w - left - 20.0);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    s.push_str(&format!(
        "<line x1=\"{0:.2}\" y1=\"0\" x2=\"{0:.2}\" y2=\"{1:.2}\" stroke=\"#888\" stroke-dasharray=\"4 3\"/>\n",
        x(0.0),
        h - 20.0
    ));
    for (i, r) in results.iter().enumerate() {
        let y = row_h * i as f64 + row_h / 2.0;
        s.push_str(&format!("<text x=\"4\" y=\"{:.2}\">{} {}</text>\n", y + 4.0, r.label, r.metric));
        for (k, v) in r.samples.iter().enumerate() {
            let jitter = ((k * 7919) % 17) as f64 - 8.0;
            s.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.5\" fill=\"#1f77b4\" fill-opacity=\"0.3\"/>\n",
                x(*v),
                y + jitter
            ));
        }
    }
    s.push_str(&format!(
        "<text x=\"{left}\" y=\"{:.2}\">{lo:.4}</text><text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{hi:.4}</text>\n",
        h - 5.0,
        w - 20.0,
        h - 5.0
    ));
    s.push_str("</svg>\n");
    s
}
