//! Confusion matrices and the five per-class scores (precision, recall, F1,
//! specificity, accuracy).
//!
//! Every score is kept as an exact fraction of counts. A zero denominator
//! yields `None` ("n/a" in reports) rather than a conventional 0 or 1.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::BinaryClass;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("predictions ({predictions}) and labels ({labels}) differ in length")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no samples to evaluate")]
    Empty,
}

/// Non-negative fraction `num / den` with `den > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Option<Self> {
        (den > 0).then_some(Self { num, den })
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Percentage with one decimal, rounded half-to-even on the exact ratio.
    pub fn percent_tenths(self) -> u64 {
        let scaled = self.num as u128 * 1000;
        let den = self.den as u128;
        let q = scaled / den;
        let r = scaled % den;
        let rounded = match (2 * r).cmp(&den) {
            std::cmp::Ordering::Less => q,
            std::cmp::Ordering::Greater => q + 1,
            std::cmp::Ordering::Equal => q + (q & 1),
        };
        rounded as u64
    }

    pub fn percent_string(self) -> String {
        let t = self.percent_tenths();
        format!("{}.{}", t / 10, t % 10)
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}", self.value())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub positive_class: BinaryClass,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// The same outcomes viewed with the other class as positive.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
            positive_class: self.positive_class.other(),
        }
    }
}

pub fn confusion(
    predictions: &[BinaryClass],
    labels: &[BinaryClass],
    positive_class: BinaryClass,
) -> Result<ConfusionMatrix, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut cm = ConfusionMatrix {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
        positive_class,
    };
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p == positive_class, y == positive_class) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub positive_class: BinaryClass,
    pub precision: Option<Fraction>,
    pub recall: Option<Fraction>,
    pub f1: Option<Fraction>,
    pub specificity: Option<Fraction>,
    pub accuracy: Option<Fraction>,
}

impl MetricsReport {
    /// `[precision, recall, f1, specificity, accuracy]` as floats.
    pub fn values(&self) -> [Option<f64>; 5] {
        [self.precision, self.recall, self.f1, self.specificity, self.accuracy]
            .map(|m| m.map(Fraction::value))
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let ConfusionMatrix { tp, fp, fn_, tn, .. } = *cm;
    let precision = Fraction::new(tp, tp + fp);
    let recall = Fraction::new(tp, tp + fn_);
    // 2PR/(P+R) reduces to 2tp/(2tp+fp+fn) whenever both P and R exist.
    let f1 = match (precision, recall) {
        (Some(_), Some(_)) => Fraction::new(2 * tp, 2 * tp + fp + fn_),
        _ => None,
    };
    MetricsReport {
        positive_class: cm.positive_class,
        precision,
        recall,
        f1,
        specificity: Fraction::new(tn, tn + fp),
        accuracy: Fraction::new(tp + tn, cm.total()),
    }
}

/// Metrics for both classes in `BinaryClass::ALL` order.
pub fn per_class_metrics(
    predictions: &[BinaryClass],
    labels: &[BinaryClass],
) -> Result<[MetricsReport; 2], MetricsError> {
    let pre = confusion(predictions, labels, BinaryClass::PreHypertension)?;
    Ok([compute_metrics(&pre), compute_metrics(&pre.swapped())])
}

pub fn format_metric(value: Option<Fraction>) -> String {
    value.map_or_else(|| "n/a".to_string(), |f| f.to_string())
}
