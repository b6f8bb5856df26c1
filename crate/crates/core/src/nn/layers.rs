use nalgebra::{DMatrixView, DMatrixViewMut};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lstm::SeqCache;
use super::math;
use super::tensor::{axpy, dot, Tensor};
use super::{conv_output_len, NnError, Result};

/// Trainable array with its accumulated gradient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl PartialEq for Param {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.value == other.value
    }
}

impl Param {
    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, value: vec![v; n], grad: vec![0.0; n] }
    }

    /// Uniform on `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = (0..n).map(|_| rng.random_range(-a..=a)).collect();
        Self { shape, value, grad: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.clear();
        self.grad.resize(self.value.len(), 0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
}

pub fn sigmoid(x: f64) -> f64 {
    math::sigmoid(x)
}

/// Max-shifted softmax in place.
pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

impl ActivationKind {
    pub fn apply(self, v: &mut [f64]) {
        match self {
            Self::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Self::Tanh => math::tanh_in_place(v),
            Self::Sigmoid => math::sigmoid_in_place(v),
            Self::Softmax => softmax_in_place(v),
        }
    }

    /// Gradient wrt the pre-activation, given the activation output `y`.
    pub fn backward(self, y: &[f64], g: &[f64]) -> Vec<f64> {
        match self {
            Self::Relu => y.iter().zip(g).map(|(&y, &g)| if y > 0.0 { g } else { 0.0 }).collect(),
            Self::Tanh => y.iter().zip(g).map(|(&y, &g)| g * (1.0 - y * y)).collect(),
            Self::Sigmoid => y.iter().zip(g).map(|(&y, &g)| g * y * (1.0 - y)).collect(),
            Self::Softmax => {
                let s = dot(y, g);
                y.iter().zip(g).map(|(&y, &g)| y * (g - s)).collect()
            }
        }
    }
}

/// Per-layer record of a forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub(crate) enum Cache {
    Input(Tensor),
    Output(Tensor),
    Dense { input: Tensor, output: Tensor },
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64>, mean: Vec<f64>, var: Vec<f64>, batch_stats: bool },
    MaxPool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Shape(Vec<usize>),
    Dropout(Option<Vec<f64>>),
    Lstm(Vec<SeqCache>, Vec<usize>),
    BiLstm(Vec<SeqCache>, Vec<SeqCache>, Vec<usize>),
}

fn sample_cl(shape: &[usize]) -> (usize, usize) {
    match shape {
        [c] => (*c, 1),
        [c, l] => (*c, *l),
        _ => (0, 0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out_channels, in_channels, kernel]`
    pub weight: Param,
    pub bias: Param,
}

impl Conv1d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::glorot(
                vec![out_channels, in_channels, kernel],
                in_channels * kernel,
                out_channels * kernel,
                rng,
            ),
            bias: Param::zeros(vec![out_channels]),
        }
    }

    pub fn output_len(&self, n_in: usize) -> Result<usize> {
        conv_output_len(n_in, self.padding, self.kernel, self.stride)
    }

    /// Output positions `t0..t1` whose tap `j` reads inside the input.
    fn valid_range(&self, j: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let (p, s) = (self.padding, self.stride);
        let t0 = if p > j { (p - j).div_ceil(s) } else { 0 };
        let t1 = if n_in + p > j { ((n_in - 1 + p - j) / s + 1).min(n_out) } else { 0 };
        (t0, t1.max(t0))
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        match x.sample_shape() {
            [c, n] if *c == self.in_channels => Ok((*n, self.output_len(*n)?)),
            s => Err(NnError::ShapeMismatch(format!(
                "conv1d expects [{}, L] samples, got {s:?}",
                self.in_channels
            ))),
        }
    }

    /// Unfolds one `[C, L]` sample into `cols`, `[C*K, n_out]` row-major:
    /// `cols[(c*K + j), t] = x[c, t*stride + j - padding]`, zero outside.
    fn im2col(&self, xs: &[f64], n_in: usize, n_out: usize, cols: &mut [f64]) {
        let (k, s) = (self.kernel, self.stride);
        cols.fill(0.0);
        for c in 0..self.in_channels {
            let xc = &xs[c * n_in..(c + 1) * n_in];
            for j in 0..k {
                let row = &mut cols[(c * k + j) * n_out..(c * k + j + 1) * n_out];
                let (t0, t1) = self.valid_range(j, n_in, n_out);
                let start = t0 * s + j - self.padding;
                if s == 1 {
                    row[t0..t1].copy_from_slice(&xc[start..start + (t1 - t0)]);
                } else {
                    for (r, &xv) in row[t0..t1].iter_mut().zip(xc[start..].iter().step_by(s)) {
                        *r = xv;
                    }
                }
            }
        }
    }

    /// Adds `cols` back onto the sample positions they were read from.
    fn col2im(&self, cols: &[f64], n_in: usize, n_out: usize, dxs: &mut [f64]) {
        let (k, s) = (self.kernel, self.stride);
        for c in 0..self.in_channels {
            let dxc = &mut dxs[c * n_in..(c + 1) * n_in];
            for j in 0..k {
                let row = &cols[(c * k + j) * n_out..(c * k + j + 1) * n_out];
                let (t0, t1) = self.valid_range(j, n_in, n_out);
                let start = t0 * s + j - self.padding;
                for (t, &v) in row[t0..t1].iter().enumerate() {
                    dxc[start + t * s] += v;
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n_in, n_out) = self.check_input(x)?;
        let (co, width) = (self.out_channels, self.in_channels * self.kernel);
        let mut y = Tensor::zeros(vec![x.batch(), co, n_out]);
        let mut cols = vec![0.0; width * n_out];
        // Row-major `[rows, cols]` buffers are column-major `[cols, rows]`
        // views, so `Y = W cols` is computed as `Y^T = cols^T W^T`.
        let w_t = DMatrixView::from_slice(&self.weight.value, width, co);
        for b in 0..x.batch() {
            self.im2col(x.sample(b), n_in, n_out, &mut cols);
            let ys = y.sample_mut(b);
            for (o, row) in ys.chunks_exact_mut(n_out).enumerate() {
                row.fill(self.bias.value[o]);
            }
            DMatrixViewMut::from_slice(ys, n_out, co).gemm(1.0, &DMatrixView::from_slice(&cols, n_out, width), &w_t, 1.0);
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor, g: &Tensor) -> Tensor {
        let n_in = x.sample_shape()[1];
        let n_out = g.sample_shape()[1];
        let (co, width) = (self.out_channels, self.in_channels * self.kernel);
        let mut dx = Tensor::zeros(x.shape().to_vec());
        let mut cols = vec![0.0; width * n_out];
        let mut dcols = vec![0.0; width * n_out];
        for b in 0..x.batch() {
            let gs = g.sample(b);
            for (o, go) in gs.chunks_exact(n_out).enumerate() {
                self.bias.grad[o] += go.iter().sum::<f64>();
            }
            self.im2col(x.sample(b), n_in, n_out, &mut cols);
            let g_t = DMatrixView::from_slice(gs, n_out, co);
            // dW^T += cols dY^T
            DMatrixViewMut::from_slice(&mut self.weight.grad, width, co).gemm(
                1.0,
                &DMatrixView::from_slice(&cols, n_out, width).transpose(),
                &g_t,
                1.0,
            );
            // dcols^T = dY^T W
            DMatrixViewMut::from_slice(&mut dcols, n_out, width).gemm(
                1.0,
                &g_t,
                &DMatrixView::from_slice(&self.weight.value, width, co).transpose(),
                0.0,
            );
            self.col2im(&dcols, n_in, n_out, dx.sample_mut(b));
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Param::filled(vec![channels], 1.0),
            beta: Param::zeros(vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    /// Normalizes each channel over batch and length. With `batch_stats`
    /// the batch's own moments are used, otherwise the running ones.
    pub(crate) fn forward(&self, x: &Tensor, batch_stats: bool) -> Result<(Tensor, Cache)> {
        let (c, l) = sample_cl(x.sample_shape());
        if c != self.channels {
            return Err(NnError::ShapeMismatch(format!(
                "batchnorm over {} channels got samples {:?}",
                self.channels,
                x.sample_shape()
            )));
        }
        let bsz = x.batch();
        if batch_stats && bsz < 2 {
            return Err(NnError::BatchTooSmall(bsz));
        }
        let n = (bsz * l) as f64;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for b in 0..bsz {
                let xs = x.sample(b);
                for ch in 0..c {
                    mean[ch] += xs[ch * l..(ch + 1) * l].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            for b in 0..bsz {
                let xs = x.sample(b);
                for ch in 0..c {
                    var[ch] += xs[ch * l..(ch + 1) * l].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for b in 0..bsz {
            let xh = xhat.sample_mut(b);
            for ch in 0..c {
                for v in &mut xh[ch * l..(ch + 1) * l] {
                    *v = (*v - mean[ch]) * inv_std[ch];
                }
            }
            let ys = y.sample_mut(b);
            for ch in 0..c {
                let (gm, bt) = (self.gamma.value[ch], self.beta.value[ch]);
                for (yv, &h) in ys[ch * l..(ch + 1) * l].iter_mut().zip(&xh[ch * l..(ch + 1) * l]) {
                    *yv = gm * h + bt;
                }
            }
        }
        let cache = Cache::BatchNorm { xhat: xhat.into_data(), inv_std, mean, var, batch_stats };
        Ok((y, cache))
    }

    pub(crate) fn backward(&mut self, cache: &Cache, g: &Tensor) -> Tensor {
        let Cache::BatchNorm { xhat, inv_std, batch_stats, .. } = cache else {
            unreachable!("batchnorm cache")
        };
        let (c, l) = sample_cl(g.sample_shape());
        let bsz = g.batch();
        let per = c * l;
        let n = (bsz * l) as f64;
        let mut sg = vec![0.0; c];
        let mut sgx = vec![0.0; c];
        for b in 0..bsz {
            let gs = g.sample(b);
            let xh = &xhat[b * per..(b + 1) * per];
            for ch in 0..c {
                let r = ch * l..(ch + 1) * l;
                sg[ch] += gs[r.clone()].iter().sum::<f64>();
                sgx[ch] += dot(&gs[r.clone()], &xh[r]);
            }
        }
        for ch in 0..c {
            self.gamma.grad[ch] += sgx[ch];
            self.beta.grad[ch] += sg[ch];
        }
        let mut dx = g.clone();
        for b in 0..bsz {
            let xh = &xhat[b * per..(b + 1) * per];
            let ds = dx.sample_mut(b);
            for ch in 0..c {
                let scale = self.gamma.value[ch] * inv_std[ch];
                for (d, &h) in ds[ch * l..(ch + 1) * l].iter_mut().zip(&xh[ch * l..(ch + 1) * l]) {
                    *d = if *batch_stats {
                        scale * (*d - sg[ch] / n - h * sgx[ch] / n)
                    } else {
                        scale * *d
                    };
                }
            }
        }
        dx
    }

    /// Exponential moving update from a training-mode cache.
    pub(crate) fn update_running(&mut self, cache: &Cache, count: usize) {
        if let Cache::BatchNorm { mean, var, batch_stats: true, .. } = cache {
            let unbias = count as f64 / (count as f64 - 1.0);
            for ch in 0..self.channels {
                self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
                self.running_var[ch] =
                    (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var[ch] * unbias;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxPool {
    pub window: usize,
    pub stride: usize,
}

impl MaxPool {
    pub fn output_len(&self, n_in: usize) -> Result<usize> {
        if self.window == 0 || self.stride == 0 || self.window > n_in {
            return Err(NnError::WindowTooLarge { window: self.window, len: n_in });
        }
        Ok((n_in - self.window) / self.stride + 1)
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        let (c, l) = match x.sample_shape() {
            [c, l] => (*c, *l),
            s => return Err(NnError::ShapeMismatch(format!("maxpool expects [C, L], got {s:?}"))),
        };
        let n_out = self.output_len(l)?;
        let mut y = Tensor::zeros(vec![x.batch(), c, n_out]);
        let mut argmax = Vec::with_capacity(x.batch() * c * n_out);
        for b in 0..x.batch() {
            let xs = x.sample(b);
            let ys = y.sample_mut(b);
            for ch in 0..c {
                for t in 0..n_out {
                    let start = ch * l + t * self.stride;
                    let mut best = start;
                    for i in start + 1..start + self.window {
                        if xs[i] > xs[best] {
                            best = i;
                        }
                    }
                    ys[ch * n_out + t] = xs[best];
                    argmax.push(best);
                }
            }
        }
        Ok((y, Cache::MaxPool { argmax, in_shape: x.shape().to_vec() }))
    }

    pub(crate) fn backward(cache: &Cache, g: &Tensor) -> Tensor {
        let Cache::MaxPool { argmax, in_shape } = cache else { unreachable!("maxpool cache") };
        let mut dx = Tensor::zeros(in_shape.clone());
        let per_out = g.sample_len();
        for b in 0..g.batch() {
            let gs = g.sample(b);
            let ds = dx.sample_mut(b);
            for (i, &gv) in gs.iter().enumerate() {
                ds[argmax[b * per_out + i]] += gv;
            }
        }
        dx
    }
}

pub(crate) fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (c, l) = match x.sample_shape() {
        [c, l] => (*c, *l),
        s => return Err(NnError::ShapeMismatch(format!("global average pool expects [C, L], got {s:?}"))),
    };
    let mut y = Tensor::zeros(vec![x.batch(), c]);
    for b in 0..x.batch() {
        let xs = x.sample(b);
        for ch in 0..c {
            y.sample_mut(b)[ch] = xs[ch * l..(ch + 1) * l].iter().sum::<f64>() / l as f64;
        }
    }
    Ok(y)
}

pub(crate) fn global_avg_pool_backward(in_shape: &[usize], g: &Tensor) -> Tensor {
    let (c, l) = (in_shape[1], in_shape[2]);
    let mut dx = Tensor::zeros(in_shape.to_vec());
    for b in 0..g.batch() {
        let gs = g.sample(b).to_vec();
        let ds = dx.sample_mut(b);
        for ch in 0..c {
            ds[ch * l..(ch + 1) * l].fill(gs[ch] / l as f64);
        }
    }
    dx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub units: usize,
    pub activation: Option<ActivationKind>,
    /// `[inputs, units]`: row `i` holds the weights leaving input `i`.
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    pub fn new(inputs: usize, units: usize, activation: Option<ActivationKind>, rng: &mut ChaCha8Rng) -> Self {
        Self {
            inputs,
            units,
            activation,
            weight: Param::glorot(vec![inputs, units], inputs, units, rng),
            bias: Param::zeros(vec![units]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        if x.sample_shape() != [self.inputs] {
            return Err(NnError::ShapeMismatch(format!(
                "dense expects [{}] samples, got {:?}",
                self.inputs,
                x.sample_shape()
            )));
        }
        let mut y = Tensor::zeros(vec![x.batch(), self.units]);
        for b in 0..x.batch() {
            let ys = y.sample_mut(b);
            ys.copy_from_slice(&self.bias.value);
            for (i, &xv) in x.sample(b).iter().enumerate() {
                if xv != 0.0 {
                    axpy(xv, &self.weight.value[i * self.units..(i + 1) * self.units], ys);
                }
            }
            if let Some(act) = self.activation {
                act.apply(ys);
            }
        }
        Ok((y.clone(), Cache::Dense { input: x.clone(), output: y }))
    }

    pub(crate) fn backward(&mut self, cache: &Cache, g: &Tensor) -> Tensor {
        let Cache::Dense { input, output } = cache else { unreachable!("dense cache") };
        let u = self.units;
        let mut dx = Tensor::zeros(input.shape().to_vec());
        for b in 0..g.batch() {
            let gp = match self.activation {
                Some(act) => act.backward(output.sample(b), g.sample(b)),
                None => g.sample(b).to_vec(),
            };
            axpy(1.0, &gp, &mut self.bias.grad);
            let xs = input.sample(b);
            let ds = dx.sample_mut(b);
            for i in 0..self.inputs {
                let row = i * u..(i + 1) * u;
                if xs[i] != 0.0 {
                    axpy(xs[i], &gp, &mut self.weight.grad[row.clone()]);
                }
                ds[i] = dot(&self.weight.value[row], &gp);
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    /// Inverted-dropout mask: kept units scaled by `1 / (1 - rate)`.
    pub fn draw_mask(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let keep = 1.0 - self.rate;
        (0..len).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect()
    }

    pub(crate) fn apply(x: &Tensor, mask: Option<&[f64]>) -> Result<Tensor> {
        let Some(mask) = mask else { return Ok(x.clone()) };
        if mask.len() != x.len() {
            return Err(NnError::ShapeMismatch(format!(
                "dropout mask of {} for {} values",
                mask.len(),
                x.len()
            )));
        }
        let mut y = x.clone();
        y.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
        Ok(y)
    }

    pub(crate) fn backward(mask: Option<&[f64]>, g: &Tensor) -> Tensor {
        Self::apply(g, mask).expect("mask matches gradient")
    }
}

pub(crate) fn activation_forward(kind: ActivationKind, x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for b in 0..y.batch() {
        kind.apply(y.sample_mut(b));
    }
    y
}

pub(crate) fn activation_backward(kind: ActivationKind, y: &Tensor, g: &Tensor) -> Tensor {
    let mut dx = g.clone();
    for b in 0..g.batch() {
        let d = kind.backward(y.sample(b), g.sample(b));
        dx.sample_mut(b).copy_from_slice(&d);
    }
    dx
}
