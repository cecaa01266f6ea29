//! Pixel-wise segmentation metrics, ROC analysis and evaluation reports.
//!
//! The positive class is vessel (`1`). Every metric signals
//! [`Error::UndefinedMetric`] on a zero denominator instead of returning 0.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, ProbabilityMap};
use crate::model::{probability_maps, UNet};
use crate::plot::{self, Axes, Series};
use crate::tensor::Tensor;
use crate::training::{EpochLog, Sample};

/// Probability at or above which binary-mode ROC counts a pixel as vessel.
pub const ROC_BINARY_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

fn check_same_plane(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Dimension {
            op: "metrics",
            lhs: vec![a.1, a.0],
            rhs: vec![b.1, b.0],
        });
    }
    Ok(())
}

fn check_binary(mask: &BinaryMask, what: &str) -> Result<()> {
    match mask.data.iter().find(|&&v| v > 1) {
        Some(v) => Err(Error::Parameter(format!("{what} mask contains non-binary value {v}"))),
        None => Ok(()),
    }
}

pub fn confusion(truth: &BinaryMask, pred: &BinaryMask) -> Result<ConfusionCounts> {
    check_same_plane((truth.width, truth.height), (pred.width, pred.height))?;
    check_binary(truth, "truth")?;
    check_binary(pred, "predicted")?;
    let mut c = ConfusionCounts::default();
    for (&t, &p) in truth.data.iter().zip(&pred.data) {
        match (t, p) {
            (1, 1) => c.tp += 1,
            (0, 1) => c.fp += 1,
            (0, 0) => c.tn += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64, what: &str) -> Result<f64> {
    if den == 0 {
        return Err(Error::UndefinedMetric(format!("{what} has a zero denominator")));
    }
    Ok(num as f64 / den as f64)
}

/// Intersection over union: `tp / (tp + fp + fn)`.
pub fn jaccard(c: &ConfusionCounts) -> Result<f64> {
    ratio(c.tp, c.tp + c.fp + c.fn_, "jaccard")
}

pub fn precision(c: &ConfusionCounts) -> Result<f64> {
    ratio(c.tp, c.tp + c.fp, "precision")
}

pub fn recall(c: &ConfusionCounts) -> Result<f64> {
    ratio(c.tp, c.tp + c.fn_, "recall")
}

/// `2PR / (P + R)`, from precision and recall.
pub fn f1(c: &ConfusionCounts) -> Result<f64> {
    let (p, r) = (precision(c)?, recall(c)?);
    if p + r == 0.0 {
        return Err(Error::UndefinedMetric("f1 with precision and recall both 0".into()));
    }
    Ok(2.0 * p * r / (p + r))
}

pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    ratio(c.tp + c.tn, c.total(), "accuracy")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RocMode {
    /// Threshold sweep over the probabilities.
    Continuous,
    /// Single operating point at [`ROC_BINARY_THRESHOLD`].
    #[default]
    Binary,
}

impl RocMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RocMode::Continuous => "continuous",
            RocMode::Binary => "binary",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdStrategy {
    /// `levels` evenly spaced values `i / (levels - 1)`.
    #[default]
    Uniform,
    /// `levels` order statistics of the observed scores.
    Quantile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RocOptions {
    pub mode: RocMode,
    pub levels: usize,
    pub thresholds: ThresholdStrategy,
}

impl Default for RocOptions {
    fn default() -> Self {
        RocOptions {
            mode: RocMode::default(),
            levels: 256,
            thresholds: ThresholdStrategy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, non-decreasing in both.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Trapezoidal area under an ordered point list.
fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Scores split by class, each sorted ascending.
struct ScoredPixels {
    pos: Vec<f32>,
    neg: Vec<f32>,
}

impl ScoredPixels {
    fn collect(pairs: &[(&BinaryMask, &ProbabilityMap)]) -> Result<Self> {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (truth, prob) in pairs {
            check_same_plane((truth.width, truth.height), (prob.width, prob.height))?;
            check_binary(truth, "truth")?;
            for (&t, &p) in truth.data.iter().zip(&prob.data) {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Parameter(format!("probability {p} outside [0, 1]")));
                }
                if t == 1 { pos.push(p) } else { neg.push(p) }
            }
        }
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::UndefinedMetric(format!(
                "ROC needs both classes in the ground truth ({} vessel, {} background pixels)",
                pos.len(),
                neg.len()
            )));
        }
        pos.sort_by(f32::total_cmp);
        neg.sort_by(f32::total_cmp);
        Ok(ScoredPixels { pos, neg })
    }

    /// `(fp, tp)` when pixels with score `>= t` are called vessel.
    fn counts_at(&self, t: f64) -> (usize, usize) {
        let above = |v: &[f32]| v.len() - v.partition_point(|&p| (p as f64) < t);
        (above(&self.neg), above(&self.pos))
    }

    /// `(fpr, tpr)` at threshold `t`.
    fn rates_at(&self, t: f64) -> (f64, f64) {
        let (fp, tp) = self.counts_at(t);
        (fp as f64 / self.neg.len() as f64, tp as f64 / self.pos.len() as f64)
    }

    fn thresholds(&self, levels: usize, strategy: ThresholdStrategy) -> Vec<f64> {
        let mut ts: Vec<f64> = match strategy {
            ThresholdStrategy::Uniform => {
                (0..levels).map(|i| i as f64 / (levels - 1) as f64).collect()
            }
            ThresholdStrategy::Quantile => {
                let mut all: Vec<f32> = self.pos.iter().chain(&self.neg).copied().collect();
                all.sort_by(f32::total_cmp);
                let n = all.len();
                (0..levels)
                    .map(|j| all[(j * (n - 1) + (levels - 1) / 2) / (levels - 1)] as f64)
                    .collect()
            }
        };
        ts.sort_by(|a, b| b.total_cmp(a));
        ts.dedup();
        ts
    }

    fn curve(&self, opts: &RocOptions) -> RocCurve {
        match opts.mode {
            RocMode::Continuous => {
                let mut points = vec![(0.0, 0.0)];
                points.extend(
                    self.thresholds(opts.levels, opts.thresholds)
                        .into_iter()
                        .map(|t| self.rates_at(t)),
                );
                points.push((1.0, 1.0));
                let auc = trapezoid(&points);
                RocCurve { points, auc }
            }
            RocMode::Binary => {
                let (fp, tp) = self.counts_at(ROC_BINARY_THRESHOLD as f64);
                let neg = self.neg.len() as f64;
                let tpr = tp as f64 / self.pos.len() as f64;
                let tnr = (self.neg.len() - fp) as f64 / neg;
                RocCurve {
                    points: vec![(0.0, 0.0), (fp as f64 / neg, tpr), (1.0, 1.0)],
                    auc: (tpr + tnr) / 2.0,
                }
            }
        }
    }
}

fn check_roc_options(opts: &RocOptions) -> Result<()> {
    if opts.levels < 2 {
        return Err(Error::Parameter(format!("ROC needs at least 2 threshold levels, got {}", opts.levels)));
    }
    Ok(())
}

pub fn roc_curve(truth: &BinaryMask, prob: &ProbabilityMap, opts: &RocOptions) -> Result<RocCurve> {
    check_roc_options(opts)?;
    Ok(ScoredPixels::collect(&[(truth, prob)])?.curve(opts))
}

/// One curve over the pixels of all images together.
pub fn pooled_roc_curve(pairs: &[(&BinaryMask, &ProbabilityMap)], opts: &RocOptions) -> Result<RocCurve> {
    check_roc_options(opts)?;
    Ok(ScoredPixels::collect(pairs)?.curve(opts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Metrics from counts summed over all images.
    #[default]
    Pooled,
    /// Mean of per-image metric values.
    PerImageMean,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Pooled => "pooled",
            Aggregation::PerImageMean => "per-image-mean",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValues {
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub roc_auc: f64,
}

impl MetricValues {
    pub const NAMES: [&'static str; 6] = ["jaccard", "precision", "recall", "f1", "accuracy", "roc_auc"];

    pub fn as_array(&self) -> [f64; 6] {
        [self.jaccard, self.precision, self.recall, self.f1, self.accuracy, self.roc_auc]
    }

    fn from_counts(c: &ConfusionCounts, roc_auc: f64) -> Result<Self> {
        Ok(MetricValues {
            jaccard: jaccard(c)?,
            precision: precision(c)?,
            recall: recall(c)?,
            f1: f1(c)?,
            accuracy: accuracy(c)?,
            roc_auc,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub counts: ConfusionCounts,
    /// `None` when any metric is undefined for this image alone.
    pub values: Option<MetricValues>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub values: MetricValues,
    pub aggregation: Aggregation,
    pub roc_mode: RocMode,
    pub per_image: Vec<ImageMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub roc_continuous: RocCurve,
    pub roc_binary: RocCurve,
}

impl Evaluation {
    /// The curve matching the report's `roc_mode`.
    pub fn roc(&self) -> &RocCurve {
        match self.report.roc_mode {
            RocMode::Continuous => &self.roc_continuous,
            RocMode::Binary => &self.roc_binary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub threshold: f32,
    pub aggregation: Aggregation,
    pub roc: RocOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: 0.5,
            aggregation: Aggregation::default(),
            roc: RocOptions::default(),
        }
    }
}

/// Metrics for already computed probability maps, as `(id, truth, prob)`.
pub fn evaluate_predictions(
    items: &[(String, BinaryMask, ProbabilityMap)],
    opts: &EvalOptions,
) -> Result<Evaluation> {
    if items.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    check_roc_options(&opts.roc)?;
    let mut per_image = Vec::with_capacity(items.len());
    for (id, truth, prob) in items {
        let pred = crate::model::binarize(prob, opts.threshold)?;
        let counts = confusion(truth, &pred)?;
        let values = roc_curve(truth, prob, &opts.roc)
            .and_then(|roc| MetricValues::from_counts(&counts, roc.auc))
            .ok();
        per_image.push(ImageMetrics { id: id.clone(), counts, values });
    }

    let pairs: Vec<(&BinaryMask, &ProbabilityMap)> = items.iter().map(|(_, t, p)| (t, p)).collect();
    let scored = ScoredPixels::collect(&pairs)?;
    let roc_continuous = scored.curve(&RocOptions { mode: RocMode::Continuous, ..opts.roc });
    let roc_binary = scored.curve(&RocOptions { mode: RocMode::Binary, ..opts.roc });
    let pooled_auc = match opts.roc.mode {
        RocMode::Continuous => roc_continuous.auc,
        RocMode::Binary => roc_binary.auc,
    };

    let values = match opts.aggregation {
        Aggregation::Pooled => {
            let total = per_image.iter().fold(ConfusionCounts::default(), |a, m| a + m.counts);
            MetricValues::from_counts(&total, pooled_auc)?
        }
        Aggregation::PerImageMean => {
            let mut sum = [0.0; 6];
            for m in &per_image {
                let v = m.values.ok_or_else(|| {
                    Error::UndefinedMetric(format!("image {} has an undefined metric", m.id))
                })?;
                for (s, x) in sum.iter_mut().zip(v.as_array()) {
                    *s += x;
                }
            }
            let n = per_image.len() as f64;
            let [jaccard, precision, recall, f1, accuracy, roc_auc] = sum.map(|s| s / n);
            MetricValues { jaccard, precision, recall, f1, accuracy, roc_auc }
        }
    };

    Ok(Evaluation {
        report: MetricsReport {
            values,
            aggregation: opts.aggregation,
            roc_mode: opts.roc.mode,
            per_image,
        },
        roc_continuous,
        roc_binary,
    })
}

/// Eval-mode inference on each sample, then [`evaluate_predictions`].
pub fn evaluate(model: &UNet<f32>, samples: &[Sample], opts: &EvalOptions) -> Result<Evaluation> {
    let mut items = Vec::with_capacity(samples.len());
    for s in samples {
        let (w, h) = (s.image.width, s.image.height);
        let input = Tensor::new(&[1, 1, h, w], s.image.data.clone())?;
        let prob = probability_maps(&model.predict(&input)?)?.remove(0);
        items.push((s.id.clone(), s.mask.clone(), prob));
    }
    evaluate_predictions(&items, opts)
}

pub fn format_metrics_csv(values: &MetricValues) -> String {
    let mut out = String::from("metric,value\n");
    for (name, v) in MetricValues::NAMES.iter().zip(values.as_array()) {
        let _ = writeln!(out, "{name},{v}");
    }
    out
}

pub fn format_roc_csv(roc: &RocCurve) -> String {
    let mut out = String::from("fpr,tpr\n");
    for (f, t) in &roc.points {
        let _ = writeln!(out, "{f},{t}");
    }
    out
}

pub fn roc_svg(roc: &RocCurve) -> String {
    let axes = Axes {
        title: &format!("ROC (AUC = {:.4})", roc.auc),
        x_label: "false positive rate",
        y_label: "true positive rate",
        x_range: (0.0, 1.0),
        y_range: (0.0, 1.0),
    };
    let chance = [(0.0, 0.0), (1.0, 1.0)];
    plot::line_chart(
        &axes,
        &[
            Series { label: "model", points: &roc.points },
            Series { label: "chance", points: &chance },
        ],
    )
}

pub fn loss_svg(logs: &[EpochLog]) -> String {
    let train: Vec<(f64, f64)> = logs.iter().map(|l| (l.epoch as f64, l.train_loss)).collect();
    let val: Vec<(f64, f64)> = logs
        .iter()
        .filter_map(|l| l.val_loss.map(|v| (l.epoch as f64, v)))
        .collect();
    let max_epoch = logs.iter().map(|l| l.epoch).max().unwrap_or(1).max(1) as f64;
    let max_loss = train
        .iter()
        .chain(&val)
        .map(|p| p.1)
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let axes = Axes {
        title: "Loss",
        x_label: "epoch",
        y_label: "loss",
        x_range: (0.0, max_epoch),
        y_range: (0.0, if max_loss > 0.0 { max_loss * 1.05 } else { 1.0 }),
    };
    let mut series = vec![Series { label: "train", points: &train }];
    if !val.is_empty() {
        series.push(Series { label: "validation", points: &val });
    }
    plot::line_chart(&axes, &series)
}

/// Writes `metrics.csv`, `roc.csv`, `roc.svg` and `loss.svg` into `out_dir`.
pub fn emit_report(report: &MetricsReport, roc: &RocCurve, logs: &[EpochLog], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = [
        ("metrics.csv", format_metrics_csv(&report.values)),
        ("roc.csv", format_roc_csv(roc)),
        ("roc.svg", roc_svg(roc)),
        ("loss.svg", loss_svg(logs)),
    ];
    for (name, body) in files {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
