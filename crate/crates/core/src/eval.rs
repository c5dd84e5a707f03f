//! Confusion matrices, precision/recall/F1, and posterior-threshold
//! detection of devices the classifier was never trained on.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{decide, predict_batch, ModelParams};
use crate::transform::{IdxDataset, PayloadVector};

pub const UNKNOWN_LABEL: &str = "Unknown";
/// Default threshold grid resolution: 0.00, 0.01, …, 1.00.
pub const DEFAULT_GRID_STEPS: usize = 100;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label {label} at index {index} is outside the model's {classes} classes")]
    LabelOutOfRange { index: usize, label: u8, classes: usize },
    #[error("calibration pool is empty")]
    EmptyPool,
    #[error("model has {outputs} outputs but the dataset names {labels} labels")]
    WidthMismatch { outputs: usize, labels: usize },
}

/// Rows are actual classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let classes = rows.len();
        assert!(rows.iter().all(|r| r.len() == classes), "confusion matrix must be square");
        ConfusionMatrix {
            classes,
            counts: rows.concat(),
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn record(&mut self, actual: usize, predicted: usize) {
        self.counts[actual * self.classes + predicted] += 1;
    }

    pub fn get(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual * self.classes + predicted]
    }

    pub fn row_sum(&self, actual: usize) -> u64 {
        (0..self.classes).map(|c| self.get(actual, c)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.classes).map(|r| self.get(r, predicted)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
    pub weighted_avg: Averages,
    pub accuracy: f64,
    pub threshold: Option<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    /// Derives every metric from a confusion matrix. Undefined ratios
    /// (no predictions or no instances for a class) are reported as 0.
    pub fn from_confusion(labels: Vec<String>, confusion: ConfusionMatrix) -> Self {
        assert_eq!(labels.len(), confusion.classes(), "one label per confusion row");
        let per_class: Vec<ClassMetrics> = labels
            .iter()
            .enumerate()
            .map(|(c, label)| {
                let tp = confusion.get(c, c);
                let support = confusion.row_sum(c);
                let predicted = confusion.col_sum(c);
                if support == 0 {
                    log::warn!("class {label:?} has no instances; recall and F1 reported as 0");
                } else if predicted == 0 {
                    log::warn!("class {label:?} was never predicted; precision reported as 0");
                }
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassMetrics {
                    label: label.clone(),
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        let total = confusion.total();
        let weighted = |f: fn(&ClassMetrics) -> f64| {
            if total == 0 {
                0.0
            } else {
                per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64
            }
        };
        let weighted_avg = Averages {
            precision: weighted(|m| m.precision),
            recall: weighted(|m| m.recall),
            f1: weighted(|m| m.f1),
        };
        EvalReport {
            labels,
            accuracy: ratio(confusion.trace(), total),
            confusion,
            per_class,
            weighted_avg,
            threshold: None,
        }
    }

    /// Aligned plain-text table: confusion counts followed by per-class
    /// precision, recall and F1, then the weighted averages.
    pub fn render_table(&self) -> String {
        let n = self.labels.len();
        let names: Vec<String> = self.labels.iter().enumerate().map(|(i, l)| format!("{i}- {l}")).collect();
        let name_w = names.iter().map(String::len).max().unwrap_or(0).max("Actual / Classified as".len());
        let cell_w = self
            .confusion
            .rows()
            .iter()
            .flatten()
            .map(|c| c.to_string().len())
            .max()
            .unwrap_or(1)
            .max(n.saturating_sub(1).to_string().len())
            .max(5);
        let mut out = String::new();
        let _ = write!(out, "{:<name_w$}", "Actual / Classified as");
        for c in 0..n {
            let _ = write!(out, " {:>cell_w$}", c);
        }
        let _ = writeln!(out, " {:>9} {:>9} {:>9} {:>9}", "Precision", "Recall", "F1", "Support");
        for (r, m) in self.per_class.iter().enumerate() {
            let _ = write!(out, "{:<name_w$}", names[r]);
            for c in 0..n {
                let _ = write!(out, " {:>cell_w$}", self.confusion.get(r, c));
            }
            let _ = writeln!(out, " {:>9.3} {:>9.3} {:>9.3} {:>9}", m.precision, m.recall, m.f1, m.support);
        }
        let pad = name_w + n * (cell_w + 1);
        let _ = writeln!(
            out,
            "{:>pad$} {:>9.3} {:>9.3} {:>9.3} {:>9}",
            "Weighted Avg",
            self.weighted_avg.precision,
            self.weighted_avg.recall,
            self.weighted_avg.f1,
            self.confusion.total()
        );
        let _ = writeln!(out, "Accuracy: {:.4} ({} / {})", self.accuracy, self.confusion.trace(), self.confusion.total());
        if let Some(t) = self.threshold {
            let _ = writeln!(out, "Threshold: {t:.2}");
        }
        out
    }

    /// CSV with one row per actual class (confusion counts then metrics),
    /// a weighted-average row, and accuracy/threshold rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut header = vec!["actual".to_string()];
        header.extend(self.labels.iter().map(|l| format!("pred:{l}")));
        header.extend(["precision", "recall", "f1", "support"].map(String::from));
        push_csv_row(&mut out, &header);
        for (r, m) in self.per_class.iter().enumerate() {
            let mut row = vec![m.label.clone()];
            row.extend((0..self.labels.len()).map(|c| self.confusion.get(r, c).to_string()));
            row.extend([m.precision, m.recall, m.f1].map(|x| format!("{x:.6}")));
            row.push(m.support.to_string());
            push_csv_row(&mut out, &row);
        }
        let mut avg = vec!["weighted_avg".to_string()];
        avg.extend(std::iter::repeat_n(String::new(), self.labels.len()));
        avg.extend([self.weighted_avg.precision, self.weighted_avg.recall, self.weighted_avg.f1].map(|x| format!("{x:.6}")));
        avg.push(self.confusion.total().to_string());
        push_csv_row(&mut out, &avg);
        push_csv_row(&mut out, &["accuracy".to_string(), format!("{:.6}", self.accuracy)]);
        if let Some(t) = self.threshold {
            push_csv_row(&mut out, &["threshold".to_string(), format!("{t:.2}")]);
        }
        out
    }
}

fn push_csv_row(out: &mut String, fields: &[String]) {
    let line: Vec<String> = fields
        .iter()
        .map(|f| {
            if f.contains([',', '"', '\n']) {
                format!("\"{}\"", f.replace('"', "\"\""))
            } else {
                f.clone()
            }
        })
        .collect();
    out.push_str(&line.join(","));
    out.push('\n');
}

/// Number of classes a model distinguishes (a single sigmoid output is two).
pub fn class_count(model: &ModelParams) -> usize {
    model.outputs().max(2)
}

/// Evaluates on a labeled set: one output → positive iff p >= 0.5,
/// otherwise argmax with ties to the lowest index.
pub fn evaluate(model: &ModelParams, test: &IdxDataset) -> Result<EvalReport, EvalError> {
    let classes = class_count(model);
    if test.label_names.len() != classes {
        return Err(EvalError::WidthMismatch {
            outputs: model.outputs(),
            labels: test.label_names.len(),
        });
    }
    if let Some((index, &label)) = test.labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
        return Err(EvalError::LabelOutOfRange { index, label, classes });
    }
    let probs = predict_batch(model, &test.images);
    Ok(report_from_probs(&probs, &test.labels, test.label_names.clone()))
}

fn report_from_probs(probs: &Array2<f64>, labels: &[u8], names: Vec<String>) -> EvalReport {
    let mut confusion = ConfusionMatrix::new(names.len());
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        confusion.record(y as usize, decide(row.as_slice().expect("row-major")));
    }
    EvalReport::from_confusion(names, confusion)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Known(usize),
    Unknown,
}

/// A known label only when the largest probability strictly exceeds the
/// threshold.
pub fn classify_with_threshold(probs: &[f64], threshold: f64) -> Verdict {
    let best = crate::nn::argmax(probs);
    match probs.get(best) {
        Some(&p) if p > threshold => Verdict::Known(best),
        _ => Verdict::Unknown,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub achieved_validation_accuracy: f64,
}

/// `steps + 1` evenly spaced thresholds from 0 to 1 inclusive.
pub fn threshold_grid(steps: usize) -> Vec<f64> {
    let steps = steps.max(1);
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

/// Accuracy of threshold classification over a pool of known instances
/// (with true labels) and unknown instances.
pub fn threshold_accuracy<K, U>(known: &[(K, u8)], unknown: &[U], threshold: f64) -> f64
where
    K: AsRef<[f64]>,
    U: AsRef<[f64]>,
{
    let total = known.len() + unknown.len();
    if total == 0 {
        return 0.0;
    }
    let correct_known = known
        .iter()
        .filter(|(p, y)| classify_with_threshold(p.as_ref(), threshold) == Verdict::Known(*y as usize))
        .count();
    let correct_unknown = unknown
        .iter()
        .filter(|p| classify_with_threshold(p.as_ref(), threshold) == Verdict::Unknown)
        .count();
    (correct_known + correct_unknown) as f64 / total as f64
}

/// Grid search for the accuracy-maximising threshold; the smallest
/// maximiser wins ties.
pub fn calibrate_from_probs<K, U>(known: &[(K, u8)], unknown: &[U], grid: &[f64]) -> Result<ThresholdResult, EvalError>
where
    K: AsRef<[f64]>,
    U: AsRef<[f64]>,
{
    if known.is_empty() && unknown.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    let mut best: Option<ThresholdResult> = None;
    for &t in grid {
        let acc = threshold_accuracy(known, unknown, t);
        if best.is_none_or(|b| acc > b.achieved_validation_accuracy) {
            best = Some(ThresholdResult {
                threshold: t,
                achieved_validation_accuracy: acc,
            });
        }
    }
    best.ok_or(EvalError::EmptyPool)
}

fn prob_rows(model: &ModelParams, images: &[PayloadVector]) -> Vec<Vec<f64>> {
    predict_batch(model, images).rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Calibrates on the known devices' validation set plus the withheld
/// device's pool, which should all come out as Unknown.
pub fn calibrate_threshold(
    model: &ModelParams,
    known_validation: &IdxDataset,
    unknown_pool: &[PayloadVector],
    grid: &[f64],
) -> Result<ThresholdResult, EvalError> {
    let known: Vec<(Vec<f64>, u8)> = prob_rows(model, &known_validation.images)
        .into_iter()
        .zip(known_validation.labels.iter().copied())
        .collect();
    let unknown = prob_rows(model, unknown_pool);
    calibrate_from_probs(&known, &unknown, grid)
}

/// Confusion over the known labels plus a trailing Unknown class.
pub fn unknown_detection_report_from_probs<K, U>(
    known: &[(K, u8)],
    unknown: &[U],
    known_names: &[String],
    threshold: f64,
) -> EvalReport
where
    K: AsRef<[f64]>,
    U: AsRef<[f64]>,
{
    let unknown_index = known_names.len();
    let mut names = known_names.to_vec();
    names.push(UNKNOWN_LABEL.to_string());
    let mut confusion = ConfusionMatrix::new(names.len());
    let column = |v: Verdict| match v {
        Verdict::Known(c) => c,
        Verdict::Unknown => unknown_index,
    };
    for (p, y) in known {
        confusion.record(*y as usize, column(classify_with_threshold(p.as_ref(), threshold)));
    }
    for p in unknown {
        confusion.record(unknown_index, column(classify_with_threshold(p.as_ref(), threshold)));
    }
    let mut report = EvalReport::from_confusion(names, confusion);
    report.threshold = Some(threshold);
    report
}

pub fn unknown_detection_report(
    model: &ModelParams,
    threshold: f64,
    known_test: &IdxDataset,
    unknown_test: &[PayloadVector],
) -> EvalReport {
    let known: Vec<(Vec<f64>, u8)> = prob_rows(model, &known_test.images)
        .into_iter()
        .zip(known_test.labels.iter().copied())
        .collect();
    let unknown = prob_rows(model, unknown_test);
    unknown_detection_report_from_probs(&known, &unknown, &known_test.label_names, threshold)
}
