//! LSTM cell, unidirectional and bidirectional sequence layers.
//!
//! Gates act on the concatenation `z = [h_{t-1}, x_t]`:
//!
//! ```text
//! i = sigma(W_i z + b_i)      f = sigma(W_f z + b_f)      o = sigma(W_o z + b_o)
//! c~ = tanh(W_c z + b_c)      c = f * c_prev + i * c~     h = o * tanh(c)
//! ```
//!
//! The four gate matrices are packed column-wise into one transposed
//! `[(H + D), 4H]` block in the order i, f, o, c, so that a step is a sum of
//! rows scaled by the entries of `z`.

use nalgebra::{DMatrixView, DMatrixViewMut};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Param;
use super::math;
use super::tensor::{axpy, dot, Tensor};
use super::{NnError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCellParams {
    pub hidden: usize,
    pub input: usize,
    /// `[(hidden + input), 4 * hidden]`
    pub weight_t: Vec<f64>,
    /// `[4 * hidden]`
    pub bias: Vec<f64>,
}

impl LstmCellParams {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        Self {
            hidden,
            input,
            weight_t: vec![0.0; (hidden + input) * 4 * hidden],
            bias: vec![0.0; 4 * hidden],
        }
    }

    /// Packs per-gate matrices. Each `w[g]` is `H x (H + D)` row-major and
    /// acts on `[h_{t-1}, x_t]`; gates are ordered i, f, o, c.
    pub fn from_gates(hidden: usize, input: usize, w: [&[f64]; 4], b: [&[f64]; 4]) -> Result<Self> {
        let width = hidden + input;
        for g in 0..4 {
            if w[g].len() != hidden * width || b[g].len() != hidden {
                return Err(NnError::ShapeMismatch(format!(
                    "gate {g} needs a {hidden}x{width} matrix and {hidden} biases"
                )));
            }
        }
        let mut p = Self::zeros(hidden, input);
        for g in 0..4 {
            for r in 0..hidden {
                for j in 0..width {
                    p.weight_t[j * 4 * hidden + g * hidden + r] = w[g][r * width + j];
                }
                p.bias[g * hidden + r] = b[g][r];
            }
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self { h: vec![0.0; hidden], c: vec![0.0; hidden] }
    }
}

/// One step on raw buffers. `gates` receives the activated i, f, o, c~.
#[allow(clippy::too_many_arguments)]
fn step_raw(
    weight_t: &[f64],
    bias: &[f64],
    hidden: usize,
    z: &[f64],
    c_prev: &[f64],
    gates: &mut [f64],
    c: &mut [f64],
    tc: &mut [f64],
    h: &mut [f64],
) {
    let g4 = 4 * hidden;
    gates.copy_from_slice(bias);
    for (j, &zj) in z.iter().enumerate() {
        if zj != 0.0 {
            axpy(zj, &weight_t[j * g4..(j + 1) * g4], gates);
        }
    }
    activate(hidden, gates, c_prev, c, tc, h);
}

/// Applies the gate nonlinearities in place and the cell/hidden updates.
fn activate(hidden: usize, gates: &mut [f64], c_prev: &[f64], c: &mut [f64], tc: &mut [f64], h: &mut [f64]) {
    let (sig, cand) = gates.split_at_mut(3 * hidden);
    math::sigmoid_in_place(sig);
    math::tanh_in_place(cand);
    for k in 0..hidden {
        c[k] = sig[hidden + k] * c_prev[k] + sig[k] * cand[k];
    }
    tc.copy_from_slice(c);
    math::tanh_in_place(tc);
    for k in 0..hidden {
        h[k] = sig[2 * hidden + k] * tc[k];
    }
}

pub fn lstm_step(params: &LstmCellParams, state: &LstmState, x: &[f64]) -> Result<LstmState> {
    let (hd, d) = (params.hidden, params.input);
    if x.len() != d || state.h.len() != hd || state.c.len() != hd {
        return Err(NnError::ShapeMismatch(format!(
            "lstm step with hidden {hd}, input {d} got x {}, h {}, c {}",
            x.len(),
            state.h.len(),
            state.c.len()
        )));
    }
    let mut z = state.h.clone();
    z.extend_from_slice(x);
    let mut gates = vec![0.0; 4 * hd];
    let mut next = LstmState::zeros(hd);
    let mut tc = vec![0.0; hd];
    step_raw(&params.weight_t, &params.bias, hd, &z, &state.c, &mut gates, &mut next.c, &mut tc, &mut next.h);
    Ok(next)
}

/// Runs the forward cell over `seq` and a second cell over the reversed
/// sequence, concatenating `[h_fwd; h_bwd]` at each step.
pub fn bilstm_forward(
    params_fwd: &LstmCellParams,
    params_bwd: &LstmCellParams,
    seq: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    if seq.is_empty() {
        return Err(NnError::EmptySequence);
    }
    let mut out = vec![Vec::new(); seq.len()];
    let mut s = LstmState::zeros(params_fwd.hidden);
    for (t, x) in seq.iter().enumerate() {
        s = lstm_step(params_fwd, &s, x)?;
        out[t] = s.h.clone();
    }
    let mut s = LstmState::zeros(params_bwd.hidden);
    for (t, x) in seq.iter().enumerate().rev() {
        s = lstm_step(params_bwd, &s, x)?;
        out[t].extend_from_slice(&s.h);
    }
    Ok(out)
}

/// Everything backward needs from one sequence.
#[derive(Debug, Clone)]
pub(crate) struct SeqCache {
    steps: usize,
    zs: Vec<f64>,
    gates: Vec<f64>,
    cs: Vec<f64>,
    tcs: Vec<f64>,
    pub(crate) hs: Vec<f64>,
}

/// Batch size from which recurrent steps use a matrix product instead of
/// per-sample vector updates.
const GEMM_MIN_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCore {
    pub hidden: usize,
    pub input: usize,
    pub weight_t: Param,
    pub bias: Param,
}

impl LstmCore {
    /// Glorot weights, zero biases except the forget gate at 1.
    pub fn new(hidden: usize, input: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut bias = Param::zeros(vec![4 * hidden]);
        bias.value[hidden..2 * hidden].fill(1.0);
        Self {
            hidden,
            input,
            weight_t: Param::glorot(vec![hidden + input, 4 * hidden], hidden + input, 4 * hidden, rng),
            bias,
        }
    }

    pub fn cell(&self) -> LstmCellParams {
        LstmCellParams {
            hidden: self.hidden,
            input: self.input,
            weight_t: self.weight_t.value.clone(),
            bias: self.bias.value.clone(),
        }
    }

    /// Runs equally long `T x D` row-major sequences in lockstep so that, for larger batches,
    /// each step's recurrent product is a single matrix product.
    pub(crate) fn run_batch(&self, batch: &[&[f64]]) -> Vec<SeqCache> {
        let (hd, d) = (self.hidden, self.input);
        let (w, g4, nb) = (hd + d, 4 * hd, batch.len());
        let steps = batch.first().map_or(0, |xs| xs.len() / d);
        let w_x = DMatrixView::from_slice(&self.weight_t.value[hd * g4..], g4, d);
        let mut caches: Vec<SeqCache> = batch
            .iter()
            .map(|xs| {
                let mut cache = SeqCache {
                    steps,
                    zs: vec![0.0; steps * w],
                    gates: vec![0.0; steps * g4],
                    cs: vec![0.0; steps * hd],
                    tcs: vec![0.0; steps * hd],
                    hs: vec![0.0; steps * hd],
                };
                // Bias plus input projection for all steps in one product.
                for t in 0..steps {
                    cache.gates[t * g4..(t + 1) * g4].copy_from_slice(&self.bias.value);
                }
                DMatrixViewMut::from_slice(&mut cache.gates, g4, steps).gemm(
                    1.0,
                    &w_x,
                    &DMatrixView::from_slice(xs, d, steps),
                    1.0,
                );
                cache
            })
            .collect();

        let use_gemm = nb >= GEMM_MIN_BATCH;
        let w_h = DMatrixView::from_slice(&self.weight_t.value[..hd * g4], g4, hd);
        let mut h_prev_all = vec![0.0; hd * nb];
        let mut recurrent = vec![0.0; g4 * nb];
        let zero = vec![0.0; hd];
        for t in 0..steps {
            if t > 0 && use_gemm {
                for (s, c) in caches.iter().enumerate() {
                    h_prev_all[s * hd..(s + 1) * hd].copy_from_slice(&c.hs[(t - 1) * hd..t * hd]);
                }
                DMatrixViewMut::from_slice(&mut recurrent, g4, nb).gemm(
                    1.0,
                    &w_h,
                    &DMatrixView::from_slice(&h_prev_all, hd, nb),
                    0.0,
                );
            }
            for (s, (cache, xs)) in caches.iter_mut().zip(batch).enumerate() {
                let SeqCache { zs, gates, cs, tcs, hs, .. } = cache;
                let (h_done, h_rest) = hs.split_at_mut(t * hd);
                let (c_done, c_rest) = cs.split_at_mut(t * hd);
                let (h_prev, c_prev) = if t == 0 {
                    (&zero[..], &zero[..])
                } else {
                    (&h_done[(t - 1) * hd..], &c_done[(t - 1) * hd..])
                };
                let g = &mut gates[t * g4..(t + 1) * g4];
                if t > 0 {
                    if use_gemm {
                        axpy(1.0, &recurrent[s * g4..(s + 1) * g4], g);
                    } else {
                        for (j, &hj) in h_prev.iter().enumerate() {
                            if hj != 0.0 {
                                axpy(hj, &self.weight_t.value[j * g4..(j + 1) * g4], g);
                            }
                        }
                    }
                }
                activate(hd, g, c_prev, &mut c_rest[..hd], &mut tcs[t * hd..(t + 1) * hd], &mut h_rest[..hd]);
                zs[t * w..t * w + hd].copy_from_slice(h_prev);
                zs[t * w + hd..(t + 1) * w].copy_from_slice(&xs[t * d..(t + 1) * d]);
            }
        }
        caches
    }

    /// Backpropagation through time. `dhs[s]` is the loss gradient wrt every
    /// `h_t` that sequence `s` emitted (`T x H`); returns the gradients wrt
    /// the inputs (`T x D` each).
    pub(crate) fn backward_batch(&mut self, caches: &[SeqCache], dhs: &[&[f64]]) -> Vec<Vec<f64>> {
        let (hd, d) = (self.hidden, self.input);
        let (w, g4, nb) = (hd + d, 4 * hd, caches.len());
        let steps = caches.first().map_or(0, |c| c.steps);
        let use_gemm = nb >= GEMM_MIN_BATCH;
        // Column `s` holds sample `s`'s running dh and dc.
        let mut dh_next = vec![0.0; hd * nb];
        let mut dc_next = vec![0.0; hd * nb];
        // Pre-activation gate gradients for every sample and step, `T x 4H`.
        let mut das = vec![vec![0.0; steps * g4]; nb];
        let mut da_all = vec![0.0; g4 * nb];
        let w_h_t = DMatrixView::from_slice(&self.weight_t.value[..hd * g4], g4, hd).transpose();
        for t in (0..steps).rev() {
            for s in 0..nb {
                let cache = &caches[s];
                let gates = &cache.gates[t * g4..(t + 1) * g4];
                let tc = &cache.tcs[t * hd..(t + 1) * hd];
                let da = &mut das[s][t * g4..(t + 1) * g4];
                let (dhn, dcn) = (&mut dh_next[s * hd..(s + 1) * hd], &mut dc_next[s * hd..(s + 1) * hd]);
                for k in 0..hd {
                    let (i, f, o, cc) = (gates[k], gates[hd + k], gates[2 * hd + k], gates[3 * hd + k]);
                    let c_prev = if t == 0 { 0.0 } else { cache.cs[(t - 1) * hd + k] };
                    let dh = dhn[k] + dhs[s][t * hd + k];
                    let dc = dcn[k] + dh * o * (1.0 - tc[k] * tc[k]);
                    da[k] = dc * cc * i * (1.0 - i);
                    da[hd + k] = dc * c_prev * f * (1.0 - f);
                    da[2 * hd + k] = dh * tc[k] * o * (1.0 - o);
                    da[3 * hd + k] = dc * i * (1.0 - cc * cc);
                    dcn[k] = dc * f;
                }
                if t > 0 {
                    if use_gemm {
                        da_all[s * g4..(s + 1) * g4].copy_from_slice(da);
                    } else {
                        for (j, dh) in dhn.iter_mut().enumerate() {
                            *dh = dot(&self.weight_t.value[j * g4..(j + 1) * g4], da);
                        }
                    }
                }
            }
            if t > 0 && use_gemm {
                DMatrixViewMut::from_slice(&mut dh_next, hd, nb).gemm(
                    1.0,
                    &w_h_t,
                    &DMatrixView::from_slice(&da_all, g4, nb),
                    0.0,
                );
            }
        }
        let mut out = Vec::with_capacity(nb);
        for (cache, das) in caches.iter().zip(&das) {
            for da in das.chunks_exact(g4) {
                axpy(1.0, da, &mut self.bias.grad);
            }
            let das_c = DMatrixView::from_slice(das, g4, steps);
            DMatrixViewMut::from_slice(&mut self.weight_t.grad, g4, w).gemm(
                1.0,
                &das_c,
                &DMatrixView::from_slice(&cache.zs, w, steps).transpose(),
                1.0,
            );
            let mut dxs = vec![0.0; steps * d];
            DMatrixViewMut::from_slice(&mut dxs, d, steps).gemm(
                1.0,
                &DMatrixView::from_slice(&self.weight_t.value[hd * g4..], g4, d).transpose(),
                &das_c,
                0.0,
            );
            out.push(dxs);
        }
        out
    }
}

/// `[C, L]` channel-first sample to `L x C` time-major.
fn to_time_major(x: &[f64], c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * l];
    for ch in 0..c {
        for t in 0..l {
            out[t * c + ch] = x[ch * l + t];
        }
    }
    out
}

fn seq_dims(x: &Tensor, input: usize) -> Result<usize> {
    match x.sample_shape() {
        [c, l] if *c == input && *l > 0 => Ok(*l),
        [c, 0] if *c == input => Err(NnError::EmptySequence),
        s => Err(NnError::ShapeMismatch(format!("recurrent layer expects [{input}, T], got {s:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    pub core: LstmCore,
    pub return_sequences: bool,
}

impl Lstm {
    pub fn output_shape(&self, steps: usize) -> Vec<usize> {
        if self.return_sequences {
            vec![self.core.hidden, steps]
        } else {
            vec![self.core.hidden]
        }
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<SeqCache>)> {
        let steps = seq_dims(x, self.core.input)?;
        let hd = self.core.hidden;
        let mut shape = vec![x.batch()];
        shape.extend(self.output_shape(steps));
        let mut y = Tensor::zeros(shape);
        let seqs: Vec<Vec<f64>> = (0..x.batch()).map(|b| to_time_major(x.sample(b), self.core.input, steps)).collect();
        let caches = self.core.run_batch(&seqs.iter().map(Vec::as_slice).collect::<Vec<_>>());
        for (b, cache) in caches.iter().enumerate() {
            let ys = y.sample_mut(b);
            if self.return_sequences {
                for t in 0..steps {
                    for k in 0..hd {
                        ys[k * steps + t] = cache.hs[t * hd + k];
                    }
                }
            } else {
                ys.copy_from_slice(&cache.hs[(steps - 1) * hd..]);
            }
        }
        Ok((y, caches))
    }

    pub(crate) fn backward(&mut self, caches: &[SeqCache], in_shape: &[usize], g: &Tensor) -> Tensor {
        let (d, steps) = (in_shape[1], in_shape[2]);
        let hd = self.core.hidden;
        let mut dx = Tensor::zeros(in_shape.to_vec());
        let dhs: Vec<Vec<f64>> = (0..caches.len())
            .map(|b| {
                let gs = g.sample(b);
                let mut dh = vec![0.0; steps * hd];
                if self.return_sequences {
                    for k in 0..hd {
                        for t in 0..steps {
                            dh[t * hd + k] = gs[k * steps + t];
                        }
                    }
                } else {
                    dh[(steps - 1) * hd..].copy_from_slice(gs);
                }
                dh
            })
            .collect();
        let dxs = self.core.backward_batch(caches, &dhs.iter().map(Vec::as_slice).collect::<Vec<_>>());
        for (b, dxs) in dxs.iter().enumerate() {
            let ds = dx.sample_mut(b);
            for t in 0..steps {
                for ch in 0..d {
                    ds[ch * steps + t] = dxs[t * d + ch];
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiLstm {
    pub fwd: LstmCore,
    pub bwd: LstmCore,
    pub return_sequences: bool,
}

impl BiLstm {
    pub fn output_shape(&self, steps: usize) -> Vec<usize> {
        let w = self.fwd.hidden + self.bwd.hidden;
        if self.return_sequences {
            vec![w, steps]
        } else {
            vec![w]
        }
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<SeqCache>, Vec<SeqCache>)> {
        let steps = seq_dims(x, self.fwd.input)?;
        let (hf, hb, d) = (self.fwd.hidden, self.bwd.hidden, self.fwd.input);
        let mut shape = vec![x.batch()];
        shape.extend(self.output_shape(steps));
        let mut y = Tensor::zeros(shape);
        let seqs: Vec<Vec<f64>> = (0..x.batch()).map(|b| to_time_major(x.sample(b), d, steps)).collect();
        let revs: Vec<Vec<f64>> = seqs.iter().map(|xs| xs.chunks(d).rev().flatten().copied().collect()).collect();
        let cf = self.fwd.run_batch(&seqs.iter().map(Vec::as_slice).collect::<Vec<_>>());
        let cb = self.bwd.run_batch(&revs.iter().map(Vec::as_slice).collect::<Vec<_>>());
        for (b, (f, r)) in cf.iter().zip(&cb).enumerate() {
            let ys = y.sample_mut(b);
            if self.return_sequences {
                for t in 0..steps {
                    for k in 0..hf {
                        ys[k * steps + t] = f.hs[t * hf + k];
                    }
                    for k in 0..hb {
                        ys[(hf + k) * steps + t] = r.hs[(steps - 1 - t) * hb + k];
                    }
                }
            } else {
                ys[..hf].copy_from_slice(&f.hs[(steps - 1) * hf..]);
                ys[hf..].copy_from_slice(&r.hs[(steps - 1) * hb..]);
            }
        }
        Ok((y, cf, cb))
    }

    pub(crate) fn backward(
        &mut self,
        cf: &[SeqCache],
        cb: &[SeqCache],
        in_shape: &[usize],
        g: &Tensor,
    ) -> Tensor {
        let (d, steps) = (in_shape[1], in_shape[2]);
        let (hf, hb) = (self.fwd.hidden, self.bwd.hidden);
        let mut dx = Tensor::zeros(in_shape.to_vec());
        let mut dhf = vec![vec![0.0; steps * hf]; g.batch()];
        let mut dhb = vec![vec![0.0; steps * hb]; g.batch()];
        for b in 0..g.batch() {
            let gs = g.sample(b);
            if self.return_sequences {
                for t in 0..steps {
                    for k in 0..hf {
                        dhf[b][t * hf + k] = gs[k * steps + t];
                    }
                    for k in 0..hb {
                        dhb[b][(steps - 1 - t) * hb + k] = gs[(hf + k) * steps + t];
                    }
                }
            } else {
                dhf[b][(steps - 1) * hf..].copy_from_slice(&gs[..hf]);
                dhb[b][(steps - 1) * hb..].copy_from_slice(&gs[hf..]);
            }
        }
        let dxf = self.fwd.backward_batch(cf, &dhf.iter().map(Vec::as_slice).collect::<Vec<_>>());
        let dxb = self.bwd.backward_batch(cb, &dhb.iter().map(Vec::as_slice).collect::<Vec<_>>());
        for b in 0..g.batch() {
            let ds = dx.sample_mut(b);
            for t in 0..steps {
                for ch in 0..d {
                    ds[ch * steps + t] = dxf[b][t * d + ch] + dxb[b][(steps - 1 - t) * d + ch];
                }
            }
        }
        dx
    }
}
