//! Stacked generalization: base learners fit on one fold, a small dense
//! meta-network fit on their class probabilities over the other fold.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::BinaryClass;
use crate::nn::{self, ActivationKind, AdamConfig, LayerSpec, Model, ModelSpec, NnError, Tensor, TrainConfig};
use crate::provenance::{AuditLog, LeakageError, Partition, SampleTag};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("no base learners")]
    NoBaseLearners,
    #[error("invalid fold2 fraction {0}")]
    InvalidFraction(f64),
    #[error("a fold is single-class after {0} draws")]
    FoldDegenerate(usize),
    #[error("{samples} samples but {labels} labels or {tags} tags")]
    LengthMismatch { samples: usize, labels: usize, tags: usize },
    #[error("base learner '{name}' failed: {reason}")]
    Base { name: String, reason: String },
    #[error("meta input width {found}, expected {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Leakage(#[from] LeakageError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, EnsembleError>;

/// A trainable model that emits `[P(PreHypertension), P(Hypertension)]`.
pub trait BaseLearner<X> {
    fn name(&self) -> String;
    fn fit(&mut self, x: &[&X], y: &[BinaryClass]) -> std::result::Result<(), String>;
    fn predict_proba(&self, x: &X) -> std::result::Result<[f64; 2], String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StackConfig {
    pub fold2_fraction: f64,
    pub meta_hidden: Vec<usize>,
    pub meta_epochs: usize,
    pub meta_batch_size: usize,
    pub adam: AdamConfig,
    pub max_redraws: usize,
    pub seed: u64,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            fold2_fraction: 0.25,
            meta_hidden: vec![16, 16, 8],
            meta_epochs: 50,
            meta_batch_size: 16,
            adam: AdamConfig::default(),
            max_redraws: 10,
            seed: 0,
        }
    }
}

/// `round(fraction * n)` samples for fold 2.
pub fn fold2_size(n: usize, fraction: f64) -> usize {
    (fraction * n as f64).round() as usize
}

/// Seeded shuffle split into `(fold1, fold2)` index lists (each sorted).
/// Re-shuffles while either fold lacks a class, up to `max_redraws` draws.
pub fn fold_split(
    labels: &[BinaryClass],
    fraction: f64,
    seed: u64,
    max_redraws: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(EnsembleError::InvalidFraction(fraction));
    }
    let n2 = fold2_size(labels.len(), fraction);
    let both = |idx: &[usize]| {
        idx.iter().any(|&i| labels[i] == BinaryClass::PreHypertension)
            && idx.iter().any(|&i| labels[i] == BinaryClass::Hypertension)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = max_redraws.max(1);
    for _ in 0..draws {
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng);
        let (f2, f1) = order.split_at(n2);
        if both(f1) && both(f2) {
            let (mut f1, mut f2) = (f1.to_vec(), f2.to_vec());
            f1.sort_unstable();
            f2.sort_unstable();
            return Ok((f1, f2));
        }
    }
    Err(EnsembleError::FoldDegenerate(draws))
}

/// Dense `[hidden..., 2]` with ReLU hidden layers and a softmax output.
pub fn meta_spec(inputs: usize, hidden: &[usize]) -> ModelSpec {
    let mut layers: Vec<LayerSpec> = hidden
        .iter()
        .map(|&units| LayerSpec::Dense { units, activation: Some(ActivationKind::Relu) })
        .collect();
    layers.push(LayerSpec::Dense { units: 2, activation: None });
    layers.push(LayerSpec::Activation { kind: ActivationKind::Softmax });
    ModelSpec { input_shape: vec![inputs], layers }
}

pub struct StackedModel<L> {
    pub bases: Vec<L>,
    pub meta: Model,
    pub fold1: Vec<usize>,
    pub fold2: Vec<usize>,
    /// Concatenated base probabilities on fold 2, as fed to the meta fit.
    pub fold2_inputs: Vec<Vec<f64>>,
    pub meta_report: nn::TrainReport,
}

fn base_inputs<X, L: BaseLearner<X>>(bases: &[L], x: &X) -> Result<Vec<f64>> {
    let mut v = Vec::with_capacity(2 * bases.len());
    for b in bases {
        let p = b.predict_proba(x).map_err(|reason| EnsembleError::Base { name: b.name(), reason })?;
        v.extend_from_slice(&p);
    }
    Ok(v)
}

/// Fits `bases` on fold 1 and the meta-network on fold 2. `tags` carry each
/// sample's provenance; only `Train` samples are accepted, and every fit is
/// recorded in `audit` with its fold-specific tags.
pub fn stack_fit<X, L: BaseLearner<X>>(
    x: &[X],
    y: &[BinaryClass],
    tags: &[SampleTag],
    mut bases: Vec<L>,
    config: &StackConfig,
    audit: &mut AuditLog,
) -> Result<StackedModel<L>> {
    if bases.is_empty() {
        return Err(EnsembleError::NoBaseLearners);
    }
    if x.len() != y.len() || x.len() != tags.len() {
        return Err(EnsembleError::LengthMismatch { samples: x.len(), labels: y.len(), tags: tags.len() });
    }
    audit.admit("stack:input", tags, &[Partition::Train])?;
    let (fold1, fold2) = fold_split(y, config.fold2_fraction, config.seed, config.max_redraws)?;

    let f1_tags: Vec<SampleTag> = fold1.iter().map(|&i| tags[i].with_partition(Partition::Fold1)).collect();
    let f1_x: Vec<&X> = fold1.iter().map(|&i| &x[i]).collect();
    let f1_y: Vec<BinaryClass> = fold1.iter().map(|&i| y[i]).collect();
    for base in &mut bases {
        audit.admit(&format!("stack:base:{}", base.name()), &f1_tags, &[Partition::Fold1])?;
        base.fit(&f1_x, &f1_y).map_err(|reason| EnsembleError::Base { name: base.name(), reason })?;
    }

    let f2_tags: Vec<SampleTag> = fold2.iter().map(|&i| tags[i].with_partition(Partition::Fold2)).collect();
    audit.admit("stack:meta", &f2_tags, &[Partition::Fold2])?;
    let fold2_inputs = fold2.iter().map(|&i| base_inputs(&bases, &x[i])).collect::<Result<Vec<_>>>()?;
    let meta_x: Vec<Tensor> = fold2_inputs.iter().map(|v| Tensor::from_vec(v.clone())).collect();
    let meta_y: Vec<usize> = fold2.iter().map(|&i| y[i].index()).collect();

    let mut meta = Model::new(meta_spec(2 * bases.len(), &config.meta_hidden), config.seed)?;
    let train_cfg = TrainConfig {
        batch_size: config.meta_batch_size,
        max_epochs: config.meta_epochs,
        adam: config.adam,
        early_stop: None,
        validation_fraction: 0.0,
        max_steps_per_epoch: 1000,
        grad_clip_norm: None,
        seed: config.seed,
    };
    let meta_report = nn::train(&mut meta, &meta_x, &meta_y, &train_cfg)?;
    Ok(StackedModel { bases, meta, fold1, fold2, fold2_inputs, meta_report })
}

impl<L> StackedModel<L> {
    /// Meta-network applied to precomputed base probabilities.
    pub fn predict_from_inputs(&self, inputs: &[f64]) -> Result<(BinaryClass, [f64; 2])> {
        let expected = self.meta.spec().input_shape[0];
        if inputs.len() != expected {
            return Err(EnsembleError::ShapeMismatch { expected, found: inputs.len() });
        }
        let x = Tensor::new(vec![1, inputs.len()], inputs.to_vec())?;
        let p = self.meta.predict_proba(&x)?;
        let p = [p.data()[0], p.data()[1]];
        let class = if p[1] > p[0] { BinaryClass::Hypertension } else { BinaryClass::PreHypertension };
        Ok((class, p))
    }
}

/// Runs every base learner on `x` and the meta-network on their outputs.
pub fn stack_predict<X, L: BaseLearner<X>>(model: &StackedModel<L>, x: &X) -> Result<(BinaryClass, [f64; 2])> {
    model.predict_from_inputs(&base_inputs(&model.bases, x)?)
}
