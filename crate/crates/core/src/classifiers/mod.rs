//! Classical heads over extracted feature vectors: a bagged Gini random
//! forest and a kernel SVM trained by SMO.

mod forest;
mod svm;

use thiserror::Error;

use crate::dataset::BinaryClass;

pub use forest::{fit_tree, rf_fit, rf_predict, DecisionTree, Forest, ForestConfig, Node};
pub use svm::{
    svm_fit, svm_predict, GapRecord, Kernel, KernelSpec, SvmConfig, SvmModel, SvmTrainState,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifierError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("training labels contain a single class")]
    DegenerateLabels,
    #[error("{features} feature rows but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("expected {expected} features, got {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("non-finite feature value in row {0}")]
    NonFinite(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("SMO did not converge within {0} sweeps")]
    NoConvergence(usize),
}

pub type Result<T> = std::result::Result<T, ClassifierError>;

/// Validates a feature matrix and labels; returns `(rows, columns)`.
pub(crate) fn check_training_set(
    x: &[Vec<f64>],
    y: &[BinaryClass],
    both_classes: bool,
) -> Result<(usize, usize)> {
    if x.is_empty() {
        return Err(ClassifierError::EmptyTrainingSet);
    }
    if x.len() != y.len() {
        return Err(ClassifierError::LengthMismatch { features: x.len(), labels: y.len() });
    }
    let m = x[0].len();
    if m == 0 {
        return Err(ClassifierError::ShapeMismatch { expected: 1, found: 0 });
    }
    for (i, row) in x.iter().enumerate() {
        if row.len() != m {
            return Err(ClassifierError::ShapeMismatch { expected: m, found: row.len() });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(ClassifierError::NonFinite(i));
        }
    }
    if both_classes && !(y.contains(&BinaryClass::PreHypertension) && y.contains(&BinaryClass::Hypertension)) {
        return Err(ClassifierError::DegenerateLabels);
    }
    Ok((x.len(), m))
}
