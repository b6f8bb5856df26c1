use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Param;
use super::loss::batch_cross_entropy;
use super::model::{Mode, Model};
use super::optim::{Adam, AdamConfig};
use super::tensor::Tensor;
use super::{NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self { patience: 10, min_delta: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub adam: AdamConfig,
    /// `None` trains for exactly `max_epochs` with no validation hold-out.
    pub early_stop: Option<EarlyStopConfig>,
    pub validation_fraction: f64,
    pub max_steps_per_epoch: usize,
    /// Rescales the whole gradient when its L2 norm exceeds this value.
    #[serde(default)]
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    /// 100 epochs at batch 16, 300 at batch 3 (and any other size).
    pub fn for_batch_size(batch_size: usize, seed: u64) -> Self {
        Self {
            batch_size,
            max_epochs: if batch_size >= 16 { 100 } else { 300 },
            adam: AdamConfig::default(),
            early_stop: Some(EarlyStopConfig::default()),
            validation_fraction: 0.15,
            max_steps_per_epoch: 1000,
            grad_clip_norm: Some(1.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.max_steps_per_epoch == 0 {
            return Err(NnError::InvalidConfig(
                "batch_size, max_epochs and max_steps_per_epoch must be positive".into(),
            ));
        }
        if self.early_stop.is_some() && !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(NnError::InvalidConfig(format!(
                "validation_fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// Stratified seeded hold-out: `round(fraction * n_c)` of each class, but
/// never a whole class.
fn split_validation(labels: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(rng);
        let n_val = ((fraction * idx.len() as f64).round() as usize).min(idx.len().saturating_sub(1));
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Consecutive chunks of `batch_size`; a trailing singleton joins the
/// previous batch so batch-norm always sees two samples.
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * batch_size;
        out[n - 1] = &order[start..];
    }
    out
}

fn gather(inputs: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    Tensor::stack(idx.iter().map(|&i| &inputs[i]))
}

/// Scales all gradients by `limit / norm` when the global norm exceeds
/// `limit`; returns the norm before scaling.
pub fn clip_grad_norm(params: &mut [&mut Param], limit: f64) -> f64 {
    let norm = params.iter().map(|p| p.grad.iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt();
    if norm > limit {
        let scale = limit / norm;
        for p in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

/// Mean cross-entropy in inference mode.
pub fn evaluate_loss(model: &Model, inputs: &[Tensor], labels: &[usize], idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(64) {
        let x = gather(inputs, chunk)?;
        let logits = model.forward(&x, Mode::Inference)?.output;
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        total += batch_cross_entropy(&logits, &y)?.0 * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Mini-batch Adam on softmax cross-entropy with seeded shuffling and
/// optional early stopping on a stratified validation hold-out. The model
/// is left at the parameters of the best validation epoch.
pub fn train(model: &mut Model, inputs: &[Tensor], labels: &[usize], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if inputs.len() != labels.len() {
        return Err(NnError::ShapeMismatch(format!("{} inputs, {} labels", inputs.len(), labels.len())));
    }
    let classes = model.num_classes();
    if labels.iter().any(|&l| l >= classes) {
        return Err(NnError::InvalidConfig(format!("labels must be below {classes}")));
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(NnError::DegenerateLabels);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut train_idx, val_idx) = match config.early_stop {
        Some(_) => split_validation(labels, config.validation_fraction, &mut rng),
        None => ((0..labels.len()).collect(), Vec::new()),
    };
    if train_idx.len() < 2 {
        return Err(NnError::BatchTooSmall(train_idx.len()));
    }
    let mut adam = Adam::new(config.adam);
    model.zero_grad();

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut wait = 0;
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for batch in batches(&train_idx, config.batch_size).into_iter().take(config.max_steps_per_epoch) {
            let x = gather(inputs, batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let pass = model.forward(&x, Mode::Train(&mut rng))?;
            let (loss, grad) = batch_cross_entropy(&pass.output, &y)?;
            model.backward(&pass, &grad)?;
            model.commit_batch_stats(&pass);
            if let Some(limit) = config.grad_clip_norm {
                clip_grad_norm(&mut model.params_mut(), limit);
            }
            adam.step(&mut model.params_mut());
            model.zero_grad();
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = loss_sum / seen as f64;
        if !train_loss.is_finite() {
            return Err(NnError::NonFinite(format!("training loss at epoch {epoch}")));
        }
        let val_loss = if val_idx.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, inputs, labels, &val_idx)?)
        };
        history.push(EpochRecord { epoch, train_loss, val_loss });
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:?}");

        if let (Some(es), Some(v)) = (config.early_stop, val_loss) {
            match &best {
                Some((b, _, _)) if v >= b - es.min_delta => {
                    wait += 1;
                    if wait >= es.patience {
                        stopped_early = epoch < config.max_epochs;
                        break;
                    }
                }
                _ => {
                    best = Some((v, epoch, model.clone()));
                    wait = 0;
                }
            }
        }
    }
    let epochs_run = history.len();
    let best_epoch = match best {
        Some((_, e, m)) => {
            *model = m;
            model.zero_grad();
            e
        }
        None => epochs_run,
    };
    Ok(TrainReport { history, best_epoch, epochs_run, stopped_early })
}

/// Feature-tap vectors for each input, in inference mode.
pub fn extract_features(model: &Model, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(64) {
        let f = model.features(&Tensor::stack(chunk)?)?;
        out.extend((0..f.batch()).map(|b| f.sample(b).to_vec()));
    }
    Ok(out)
}

/// Class probabilities for each input, in inference mode.
pub fn predict_proba(model: &Model, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(64) {
        let p = model.predict_proba(&Tensor::stack(chunk)?)?;
        out.extend((0..p.batch()).map(|b| p.sample(b).to_vec()));
    }
    Ok(out)
}
