use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    activation_backward, activation_forward, global_avg_pool, global_avg_pool_backward, ActivationKind,
    BatchNorm, Cache, Conv1d, Dense, Dropout, MaxPool, Param,
};
use super::lstm::{BiLstm, Lstm, LstmCore};
use super::tensor::Tensor;
use super::{dense_param_count, NnError, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv1d {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    BatchNorm,
    MaxPool {
        window: usize,
        /// Defaults to the window.
        #[serde(default)]
        stride: Option<usize>,
    },
    GlobalAvgPool,
    Dense {
        units: usize,
        #[serde(default)]
        activation: Option<ActivationKind>,
    },
    Dropout {
        rate: f64,
    },
    Lstm {
        hidden: usize,
        #[serde(default)]
        return_sequences: bool,
    },
    Bilstm {
        hidden: usize,
        #[serde(default)]
        return_sequences: bool,
    },
    Activation {
        kind: ActivationKind,
    },
    Flatten,
}

/// Input sample shape (without batch) and the ordered layer list.
/// Sequences are channel-first `[C, L]`; recurrent layers read `C`
/// features per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv1d(Conv1d),
    BatchNorm(BatchNorm),
    MaxPool(MaxPool),
    GlobalAvgPool,
    Dense(Dense),
    Dropout(Dropout),
    Lstm(Lstm),
    Bilstm(BiLstm),
    Activation { kind: ActivationKind },
    Flatten,
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv1d(_) => "conv1d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::MaxPool(_) => "maxpool",
            Layer::GlobalAvgPool => "globalavgpool",
            Layer::Dense(_) => "dense",
            Layer::Dropout(_) => "dropout",
            Layer::Lstm(_) => "lstm",
            Layer::Bilstm(_) => "bilstm",
            Layer::Activation { .. } => "activation",
            Layer::Flatten => "flatten",
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv1d(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            Layer::Lstm(l) => vec![&l.core.weight_t, &l.core.bias],
            Layer::Bilstm(l) => vec![&l.fwd.weight_t, &l.fwd.bias, &l.bwd.weight_t, &l.bwd.bias],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv1d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Lstm(l) => vec![&mut l.core.weight_t, &mut l.core.bias],
            Layer::Bilstm(l) => {
                vec![&mut l.fwd.weight_t, &mut l.fwd.bias, &mut l.bwd.weight_t, &mut l.bwd.bias]
            }
            _ => Vec::new(),
        }
    }
}

fn expect_cl(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [c, l] => Ok((*c, *l)),
        s => Err(NnError::ShapeMismatch(format!("{what} expects [C, L] input, got {s:?}"))),
    }
}

/// Builds one layer for an input sample shape; returns it with its output shape.
fn build_layer(spec: &LayerSpec, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<(Layer, Vec<usize>)> {
    Ok(match *spec {
        LayerSpec::Conv1d { filters, kernel, stride, padding } => {
            let (c, l) = expect_cl(shape, "conv1d")?;
            let conv = Conv1d::new(c, filters, kernel, stride, padding, rng);
            let n = conv.output_len(l)?;
            (Layer::Conv1d(conv), vec![filters, n])
        }
        LayerSpec::BatchNorm => match shape {
            [c] | [c, _] => (Layer::BatchNorm(BatchNorm::new(*c)), shape.to_vec()),
            s => return Err(NnError::ShapeMismatch(format!("batchnorm input {s:?}"))),
        },
        LayerSpec::MaxPool { window, stride } => {
            let (c, l) = expect_cl(shape, "maxpool")?;
            let pool = MaxPool { window, stride: stride.unwrap_or(window) };
            let n = pool.output_len(l)?;
            (Layer::MaxPool(pool), vec![c, n])
        }
        LayerSpec::GlobalAvgPool => {
            let (c, _) = expect_cl(shape, "global average pool")?;
            (Layer::GlobalAvgPool, vec![c])
        }
        LayerSpec::Dense { units, activation } => match shape {
            [m] => (Layer::Dense(Dense::new(*m, units, activation, rng)), vec![units]),
            s => return Err(NnError::ShapeMismatch(format!("dense expects a flat input, got {s:?}"))),
        },
        LayerSpec::Dropout { rate } => {
            if !(0.0..1.0).contains(&rate) {
                return Err(NnError::InvalidConfig(format!("dropout rate {rate} outside [0, 1)")));
            }
            (Layer::Dropout(Dropout { rate }), shape.to_vec())
        }
        LayerSpec::Lstm { hidden, return_sequences } => {
            let (c, l) = expect_cl(shape, "lstm")?;
            if l == 0 {
                return Err(NnError::EmptySequence);
            }
            let layer = Lstm { core: LstmCore::new(hidden, c, rng), return_sequences };
            let out = layer.output_shape(l);
            (Layer::Lstm(layer), out)
        }
        LayerSpec::Bilstm { hidden, return_sequences } => {
            let (c, l) = expect_cl(shape, "bilstm")?;
            if l == 0 {
                return Err(NnError::EmptySequence);
            }
            let fwd = LstmCore::new(hidden, c, rng);
            let bwd = LstmCore::new(hidden, c, rng);
            let layer = BiLstm { fwd, bwd, return_sequences };
            let out = layer.output_shape(l);
            (Layer::Bilstm(layer), out)
        }
        LayerSpec::Activation { kind } => (Layer::Activation { kind }, shape.to_vec()),
        LayerSpec::Flatten => (Layer::Flatten, vec![shape.iter().product()]),
    })
}

/// How a forward pass treats batch-norm and dropout.
pub enum Mode<'a> {
    /// Batch statistics; fresh dropout masks.
    Train(&'a mut ChaCha8Rng),
    /// Batch statistics; dropout masks reused per layer index.
    Replay(&'a [Option<Vec<f64>>]),
    /// Running statistics; dropout is the identity.
    Inference,
}

/// Layer caches and the final output of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    caches: Vec<Cache>,
    /// Realized output sample shape of each executed layer.
    pub shapes: Vec<Vec<usize>>,
    pub output: Tensor,
    batch: usize,
}

impl ForwardPass {
    /// Dropout masks indexed by layer (`None` for other layers or inference).
    pub fn dropout_masks(&self) -> Vec<Option<Vec<f64>>> {
        self.caches
            .iter()
            .map(|c| match c {
                Cache::Dropout(m) => m.clone(),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    spec: ModelSpec,
    layers: Vec<Layer>,
}

impl Model {
    /// Builds the layers with seeded Glorot initialization.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        if spec.layers.is_empty() {
            return Err(NnError::InvalidConfig("model has no layers".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = spec.input_shape.clone();
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut shapes = Vec::with_capacity(spec.layers.len());
        for ls in &spec.layers {
            let (layer, out) = build_layer(ls, &shape, &mut rng)?;
            layers.push(layer);
            shapes.push(out.clone());
            shape = out;
        }
        Ok(Self { spec, layers, shapes })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Planned output sample shape of every layer.
    pub fn output_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map_or(0, |s| s.iter().product())
    }

    /// Number of layers run to produce logits: a trailing softmax is folded
    /// into the loss.
    pub fn logit_end(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Activation { kind: ActivationKind::Softmax }) => self.layers.len() - 1,
            _ => self.layers.len(),
        }
    }

    /// Number of layers whose output forms the feature vector: everything
    /// before the final dense layer.
    pub fn feature_tap(&self) -> usize {
        self.layers.iter().rposition(|l| matches!(l, Layer::Dense(_))).unwrap_or(self.logit_end())
    }

    pub fn feature_width(&self) -> usize {
        match self.feature_tap() {
            0 => self.spec.input_shape.iter().product(),
            k => self.shapes[k - 1].iter().product(),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// `(inputs, units, parameters)` of every dense layer.
    pub fn dense_layers(&self) -> Vec<(usize, usize, usize)> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense(d) => Some((d.inputs, d.units, d.param_count())),
                _ => None,
            })
            .collect()
    }

    pub fn expected_dense_params(&self) -> usize {
        self.dense_layers().iter().map(|&(m, n, _)| dense_param_count(m, n)).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Runs the first `end` layers on a `[B, ...input_shape]` batch.
    pub fn forward_range(&self, x: &Tensor, end: usize, mut mode: Mode<'_>) -> Result<ForwardPass> {
        if x.sample_shape() != self.spec.input_shape.as_slice() {
            return Err(NnError::ShapeMismatch(format!(
                "model input {:?}, got samples {:?}",
                self.spec.input_shape,
                x.sample_shape()
            )));
        }
        let batch_stats = !matches!(mode, Mode::Inference);
        let mut caches = Vec::with_capacity(end);
        let mut shapes = Vec::with_capacity(end);
        let mut cur = x.clone();
        for (i, layer) in self.layers[..end].iter().enumerate() {
            let (y, cache) = match layer {
                Layer::Conv1d(l) => (l.forward(&cur)?, Cache::Input(cur)),
                Layer::BatchNorm(l) => l.forward(&cur, batch_stats)?,
                Layer::MaxPool(l) => l.forward(&cur)?,
                Layer::GlobalAvgPool => (global_avg_pool(&cur)?, Cache::Shape(cur.shape().to_vec())),
                Layer::Dense(l) => l.forward(&cur)?,
                Layer::Dropout(l) => {
                    let mask = match &mut mode {
                        Mode::Train(rng) => Some(l.draw_mask(cur.len(), rng)),
                        Mode::Replay(masks) => masks.get(i).cloned().flatten(),
                        Mode::Inference => None,
                    };
                    (Dropout::apply(&cur, mask.as_deref())?, Cache::Dropout(mask))
                }
                Layer::Lstm(l) => {
                    let (y, c) = l.forward(&cur)?;
                    (y, Cache::Lstm(c, cur.shape().to_vec()))
                }
                Layer::Bilstm(l) => {
                    let (y, cf, cb) = l.forward(&cur)?;
                    (y, Cache::BiLstm(cf, cb, cur.shape().to_vec()))
                }
                Layer::Activation { kind } => {
                    let y = activation_forward(*kind, &cur);
                    (y.clone(), Cache::Output(y))
                }
                Layer::Flatten => {
                    let shape = cur.shape().to_vec();
                    let n = cur.sample_len();
                    (cur.reshape(vec![shape[0], n])?, Cache::Shape(shape))
                }
            };
            if !y.is_finite() {
                return Err(NnError::NonFinite(format!("output of layer {i} ({})", layer.name())));
            }
            shapes.push(y.sample_shape().to_vec());
            caches.push(cache);
            cur = y;
        }
        Ok(ForwardPass { caches, shapes, output: cur, batch: x.batch() })
    }

    /// Logits for a batch.
    pub fn forward(&self, x: &Tensor, mode: Mode<'_>) -> Result<ForwardPass> {
        self.forward_range(x, self.logit_end(), mode)
    }

    /// Accumulates parameter gradients for `grad` (wrt the pass output) and
    /// returns the gradient wrt the pass input.
    pub fn backward(&mut self, pass: &ForwardPass, grad: &Tensor) -> Result<Tensor> {
        if grad.shape() != pass.output.shape() {
            return Err(NnError::ShapeMismatch(format!(
                "gradient {:?} for output {:?}",
                grad.shape(),
                pass.output.shape()
            )));
        }
        let mut g = grad.clone();
        for (i, cache) in pass.caches.iter().enumerate().rev() {
            g = match (&mut self.layers[i], cache) {
                (Layer::Conv1d(l), Cache::Input(x)) => l.backward(x, &g),
                (Layer::BatchNorm(l), c) => l.backward(c, &g),
                (Layer::MaxPool(_), c) => MaxPool::backward(c, &g),
                (Layer::GlobalAvgPool, Cache::Shape(s)) => global_avg_pool_backward(s, &g),
                (Layer::Dense(l), c) => l.backward(c, &g),
                (Layer::Dropout(_), Cache::Dropout(m)) => Dropout::backward(m.as_deref(), &g),
                (Layer::Lstm(l), Cache::Lstm(c, s)) => l.backward(c, s, &g),
                (Layer::Bilstm(l), Cache::BiLstm(cf, cb, s)) => l.backward(cf, cb, s, &g),
                (Layer::Activation { kind }, Cache::Output(y)) => activation_backward(*kind, y, &g),
                (Layer::Flatten, Cache::Shape(s)) => g.reshape(s.clone())?,
                (l, _) => unreachable!("cache does not belong to {}", l.name()),
            };
        }
        Ok(g)
    }

    /// Folds the batch moments of a training pass into the running statistics.
    pub fn commit_batch_stats(&mut self, pass: &ForwardPass) {
        for (i, cache) in pass.caches.iter().enumerate() {
            if let Layer::BatchNorm(bn) = &mut self.layers[i] {
                let per_channel = pass.shapes[i].get(1).copied().unwrap_or(1);
                bn.update_running(cache, pass.batch * per_channel);
            }
        }
    }

    /// Class probabilities `[B, K]` in inference mode.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = self.forward(x, Mode::Inference)?.output;
        for b in 0..out.batch() {
            super::layers::softmax_in_place(out.sample_mut(b));
        }
        Ok(out)
    }

    /// Feature-tap activations `[B, F]` in inference mode.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let tap = self.feature_tap();
        let out = self.forward_range(x, tap, Mode::Inference)?.output;
        let (b, n) = (out.batch(), out.sample_len());
        out.reshape(vec![b, n])
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            spec: self.spec.clone(),
            layers: self.layers.clone(),
        };
        serde_json::to_string(&file).map_err(|e| NnError::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| NnError::Serde(e.to_string()))?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(NnError::Serde(format!("unsupported model format {}", file.format_version)));
        }
        let reference = Model::new(file.spec.clone(), 0)?;
        let mut model = Model { spec: file.spec, layers: file.layers, shapes: reference.shapes.clone() };
        let same_layout = model.layers.len() == reference.layers.len()
            && model
                .params()
                .iter()
                .map(|p| (&p.shape, p.value.len()))
                .eq(reference.params().iter().map(|p| (&p.shape, p.shape.iter().product()))) ;
        if !same_layout {
            return Err(NnError::Serde("parameters do not match the model spec".into()));
        }
        model.zero_grad();
        Ok(model)
    }
}
