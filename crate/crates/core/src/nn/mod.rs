//! A small trainable neural-network engine: conv1d, batch-norm, pooling,
//! dense, dropout, LSTM/BiLSTM, softmax cross-entropy, Adam and an
//! early-stopping training loop.
//!
//! Layers are evaluated on batches whose leading dimension is the batch.
//! Forward passes borrow the model immutably and return per-layer caches;
//! `Model::backward` consumes a cache and accumulates parameter gradients.

mod arch;
mod gradcheck;
mod layers;
mod loss;
mod math;
mod lstm;
mod model;
mod optim;
mod tensor;
mod train;

use thiserror::Error;

pub use arch::{architecture, Extractor};
pub use gradcheck::{gradient_check, relative_error, GradCheck};
pub use layers::{sigmoid, softmax_in_place, ActivationKind, BatchNorm, Conv1d, Dense, Dropout, MaxPool, Param};
pub use loss::{batch_cross_entropy, softmax_cross_entropy};
pub use lstm::{bilstm_forward, lstm_step, BiLstm, Lstm, LstmCellParams, LstmCore, LstmState};
pub use model::{ForwardPass, Layer, LayerSpec, Mode, Model, ModelSpec, MODEL_FORMAT_VERSION};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;
pub use train::{
    clip_grad_norm, evaluate_loss, extract_features, predict_proba, train, EarlyStopConfig, EpochRecord, TrainConfig,
    TrainReport,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("kernel {kernel} exceeds padded input length {padded}")]
    KernelExceedsInput { kernel: usize, padded: usize },
    #[error("pool window {window} does not fit input length {len}")]
    WindowTooLarge { window: usize, len: usize },
    #[error("batch of {0} is too small for batch statistics")]
    BatchTooSmall(usize),
    #[error("empty sequence")]
    EmptySequence,
    #[error("training labels contain a single class")]
    DegenerateLabels,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("model serialization: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Output length of a 1-D convolution: `ceil((n_in + 2p - k) / s) + 1`.
pub fn conv_output_len(n_in: usize, padding: usize, kernel: usize, stride: usize) -> Result<usize> {
    let padded = n_in + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(NnError::KernelExceedsInput { kernel, padded });
    }
    if stride == 0 {
        return Err(NnError::InvalidConfig("stride must be at least 1".into()));
    }
    Ok((padded - kernel).div_ceil(stride) + 1)
}

/// Weights plus biases of a dense layer: `M * N + N`.
pub fn dense_param_count(m: usize, n: usize) -> usize {
    m * n + n
}
