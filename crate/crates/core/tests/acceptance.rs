//! Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//!
//! Runs without the libtest harness so the summary always prints. The
//! process exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ppgbp::classifiers::{fit_tree, rf_fit, rf_predict, svm_fit, ForestConfig, KernelSpec, Node, SvmConfig};
use ppgbp::dataset::BinaryClass::{self, Hypertension, PreHypertension};
use ppgbp::ensemble::{fold2_size, stack_fit, stack_predict, BaseLearner, StackConfig};
use ppgbp::experiment::{
    run_experiment, run_grid, DataConfig, ExperimentConfig, GridConfig, Head, RunReport, SynthConfig,
};
use ppgbp::metrics::{compute_metrics, ConfusionMatrix, Fraction};
use ppgbp::nn::{architecture, lstm_step, ActivationKind, Extractor, Layer, LayerSpec, LstmCellParams, LstmState, Mode, Model, ModelSpec, Tensor};
use ppgbp::preprocess::{design_cheby2, filtfilt, Cheby2Spec};
use ppgbp::provenance::{AuditLog, Partition, SampleTag};
use ppgbp::spectral::{make_window, stft, StftConfig, WindowKind};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(n: usize, lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

// ---------------------------------------------------------------- 1

/// Mean softmax cross-entropy of `[batch, classes]` logits.
fn cross_entropy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.len() / labels.len();
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits.data()[b * k..(b + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

fn probe(kind: &str, r: &mut ChaCha8Rng) -> ModelSpec {
    use ActivationKind::{Sigmoid, Tanh};
    let conv = |f, k, s, p| LayerSpec::Conv1d { filters: f, kernel: k, stride: s, padding: p };
    let dense = |u, a| LayerSpec::Dense { units: u, activation: a };
    let c = r.random_range(1..4);
    let l = r.random_range(6..12);
    let layers = match kind {
        "conv1d" => vec![
            conv(r.random_range(1..4), r.random_range(1..4), r.random_range(1..3), r.random_range(0..2)),
            LayerSpec::Flatten,
            dense(2, None),
        ],
        "batchnorm" => vec![conv(3, 2, 1, 0), LayerSpec::BatchNorm, LayerSpec::Flatten, dense(2, None)],
        "pool" => vec![
            conv(3, 2, 1, 0),
            LayerSpec::MaxPool { window: 2, stride: Some(r.random_range(1..3)) },
            LayerSpec::GlobalAvgPool,
            dense(2, None),
        ],
        "dense" => vec![LayerSpec::Flatten, dense(5, Some(Tanh)), dense(4, Some(Sigmoid)), dense(2, None)],
        "dropout" => vec![LayerSpec::Flatten, dense(6, Some(Tanh)), LayerSpec::Dropout { rate: 0.4 }, dense(2, None)],
        "lstm" => vec![
            LayerSpec::Lstm { hidden: r.random_range(1..4), return_sequences: true },
            LayerSpec::Lstm { hidden: 2, return_sequences: false },
            dense(2, None),
        ],
        "bilstm" => vec![
            LayerSpec::Bilstm { hidden: r.random_range(1..4), return_sequences: true },
            LayerSpec::Bilstm { hidden: 2, return_sequences: false },
            dense(2, None),
        ],
        "softmax_ce" => vec![LayerSpec::GlobalAvgPool, dense(3, None)],
        other => unreachable!("{other}"),
    };
    ModelSpec { input_shape: vec![c, l], layers }
}

/// Largest relative error between backprop and central differences of the
/// cross-entropy computed above, over every parameter and input entry.
fn max_gradient_error(kind: &str, seed: u64) -> f64 {
    const H: f64 = 1e-5;
    let mut r = rng(seed);
    let spec = probe(kind, &mut r);
    let mut model = Model::new(spec.clone(), seed).unwrap();
    let batch = r.random_range(2..5);
    let mut shape = vec![batch];
    shape.extend(&spec.input_shape);
    let n: usize = shape.iter().product();
    let x = Tensor::new(shape, uniform(n, -1.0, 1.0, &mut r)).unwrap();
    let classes = model.num_classes();
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();

    let masks = model.forward(&x, Mode::Train(&mut r)).unwrap().dropout_masks();
    let loss = |m: &Model, x: &Tensor| cross_entropy(&m.forward(x, Mode::Replay(&masks)).unwrap().output, &labels);

    model.zero_grad();
    let pass = model.forward(&x, Mode::Replay(&masks)).unwrap();
    // Gradient of the mean cross-entropy wrt logits: (softmax - onehot) / B.
    let out = &pass.output;
    let mut g = vec![0.0; out.len()];
    for (b, &y) in labels.iter().enumerate() {
        let row = &out.data()[b * classes..(b + 1) * classes];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for k in 0..classes {
            let p = (row[k] - m).exp() / z;
            g[b * classes + k] = (p - if k == y { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    let dx = model.backward(&pass, &Tensor::new(out.shape().to_vec(), g).unwrap()).unwrap();
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();

    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    for (k, grads) in analytic.iter().enumerate() {
        for i in 0..grads.len() {
            let orig = model.params()[k].value[i];
            model.params_mut()[k].value[i] = orig + H;
            let up = loss(&model, &x);
            model.params_mut()[k].value[i] = orig - H;
            let down = loss(&model, &x);
            model.params_mut()[k].value[i] = orig;
            worst = worst.max(rel(grads[i], (up - down) / (2.0 * H)));
        }
    }
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += H;
        let up = loss(&model, &xp);
        xp.data_mut()[i] -= 2.0 * H;
        let down = loss(&model, &xp);
        worst = worst.max(rel(dx.data()[i], (up - down) / (2.0 * H)));
    }
    worst
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let kinds = ["conv1d", "batchnorm", "pool", "dense", "dropout", "lstm", "bilstm", "softmax_ce"];
    let mut summary = Vec::new();
    for kind in kinds {
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let e = max_gradient_error(kind, seed);
            ensure!(e <= 1e-4, "{kind} seed {seed}: relative error {e:.2e}");
            worst = worst.max(e);
        }
        summary.push(format!("{kind} {worst:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!("20 seeds each, worst: {}; {secs:.1} s", summary.join(", ")))
}

// ---------------------------------------------------------------- 2

fn eval_poly(c: &[f64], z_inv: Complex64) -> Complex64 {
    c.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &v| acc * z_inv + v)
}

fn filter_spec() -> Outcome {
    let f = design_cheby2(Cheby2Spec { order: 4, cutoff_hz: 25.0, stopband_attenuation_db: 10.0, sample_rate_hz: 1000.0 })
        .map_err(|e| e.to_string())?;
    let mag = |hz: f64| {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * hz / 1000.0);
        (eval_poly(&f.b, z_inv) / eval_poly(&f.a, z_inv)).norm()
    };
    let dc = f.b.iter().sum::<f64>() / f.a.iter().sum::<f64>();
    ensure!((dc - 1.0).abs() <= 1e-9, "DC gain {dc}");
    let edge = 10f64.powf(-0.5);
    ensure!((mag(25.0) - edge).abs() <= 1e-6, "|H(25 Hz)| = {}", mag(25.0));
    for hz in 25..=500 {
        ensure!(mag(hz as f64) <= edge + 1e-12, "|H({hz} Hz)| = {}", mag(hz as f64));
    }
    let pulse: Vec<f64> = (0..2100).map(|i| (-((i as f64 - 1000.0) / 40.0).powi(2)).exp()).collect();
    let out = filtfilt(&f, &pulse).map_err(|e| e.to_string())?;
    let peak = |v: &[f64]| v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best });
    ensure!(peak(&out) == 1000, "peak moved to {}", peak(&out));
    Ok(format!("DC {dc:.12}, |H(25)| {:.9}, stopband max ok, peak at 1000", mag(25.0)))
}

// ---------------------------------------------------------------- 3

fn stft_oracle() -> Outcome {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for case in 0..40 {
        let win = r.random_range(2..64);
        let hop = r.random_range(1..=win);
        let n_fft = win + r.random_range(0..32);
        let window = if case % 2 == 0 { WindowKind::Hann } else { WindowKind::Rectangular };
        let cfg = StftConfig { window_length: win, hop, window, fft_length: n_fft };
        let x = uniform(win + r.random_range(0..200), -1.0, 1.0, &mut r);
        let spec = stft(&x, cfg, 1000.0).map_err(|e| e.to_string())?;
        let w = make_window(window, win).map_err(|e| e.to_string())?;
        for m in 0..spec.frames {
            let frame = &x[m * hop..m * hop + win];
            let oracle: Vec<Complex64> = (0..n_fft / 2 + 1)
                .map(|k| {
                    frame.iter().zip(&w).enumerate().fold(Complex64::new(0.0, 0.0), |acc, (n, (v, wn))| {
                        acc + Complex64::from_polar(v * wn, -2.0 * PI * ((k * n) % n_fft) as f64 / n_fft as f64)
                    })
                })
                .collect();
            let scale = oracle.iter().map(|c| c.norm()).fold(f64::MIN_POSITIVE, f64::max);
            for (k, o) in oracle.iter().enumerate() {
                worst = worst.max((spec.get(m, k) - o).norm() / scale);
            }
        }
    }
    ensure!(worst <= 1e-9, "DFT mismatch {worst:.2e}");

    let mut parseval: f64 = 0.0;
    for n in 2..64 {
        let cfg = StftConfig { window_length: n, hop: n, window: WindowKind::Rectangular, fft_length: n };
        let x = uniform(4 * n, -1.0, 1.0, &mut r);
        let spec = stft(&x, cfg, 1.0).map_err(|e| e.to_string())?;
        for m in 0..spec.frames {
            let energy: f64 = x[m * n..(m + 1) * n].iter().map(|v| v * v).sum();
            let mut spectral = 0.0;
            for k in 0..spec.bins {
                let mirrored = k != 0 && !(n % 2 == 0 && k == n / 2);
                spectral += spec.get(m, k).norm_sqr() * if mirrored { 2.0 } else { 1.0 };
            }
            parseval = parseval.max((spectral / n as f64 - energy).abs() / energy);
        }
    }
    ensure!(parseval <= 1e-9, "Parseval error {parseval:.2e}");
    Ok(format!("DFT max rel {worst:.1e}, Parseval max rel {parseval:.1e}"))
}

// ---------------------------------------------------------------- 4

fn lstm_fidelity() -> Outcome {
    let logistic = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let mut r = rng(seed);
        let (h, d) = (r.random_range(1..5), r.random_range(1..5));
        let w: Vec<Vec<f64>> = (0..4).map(|_| uniform(h * (h + d), -0.8, 0.8, &mut r)).collect();
        let b: Vec<Vec<f64>> = (0..4).map(|_| uniform(h, -0.8, 0.8, &mut r)).collect();
        let params = LstmCellParams::from_gates(h, d, [&w[0], &w[1], &w[2], &w[3]], [&b[0], &b[1], &b[2], &b[3]])
            .map_err(|e| e.to_string())?;
        let mut state = LstmState { h: uniform(h, -0.9, 0.9, &mut r), c: uniform(h, -1.0, 1.0, &mut r) };
        for _ in 0..6 {
            let x = uniform(d, -2.0, 2.0, &mut r);
            let z: Vec<f64> = state.h.iter().chain(&x).copied().collect();
            let affine = |g: usize, row: usize| b[g][row] + (0..h + d).map(|j| w[g][row * (h + d) + j] * z[j]).sum::<f64>();
            let next = lstm_step(&params, &state, &x).map_err(|e| e.to_string())?;
            for row in 0..h {
                let (i, f, o) = (logistic(affine(0, row)), logistic(affine(1, row)), logistic(affine(2, row)));
                let c = f * state.c[row] + i * affine(3, row).tanh();
                let hh = o * c.tanh();
                worst = worst.max((next.c[row] - c).abs()).max((next.h[row] - hh).abs());
            }
            state = next;
        }
    }
    ensure!(worst <= 1e-12, "hand equations differ by {worst:.2e}");

    // Forget gate saturated at 1 and input gate at 0: the cell is retained.
    let mut p = LstmCellParams::zeros(3, 2);
    p.bias[..3].fill(-40.0);
    p.bias[3..6].fill(40.0);
    let state = LstmState { h: vec![0.0; 3], c: vec![0.37, -1.4, 2.2] };
    let next = lstm_step(&p, &state, &[5.0, -3.0]).map_err(|e| e.to_string())?;
    let drift = next.c.iter().zip(&state.c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(drift <= 1e-8, "saturated cell drifted by {drift:.2e}");
    Ok(format!("max deviation {worst:.1e} over 50 cells x 6 steps; retention drift {drift:.1e}"))
}

// ---------------------------------------------------------------- 5

fn shape_formulas() -> Outcome {
    let mut checked = (0, 0);
    for kind in Extractor::ALL {
        let input = if kind.uses_stft() { [129, 29] } else { [1, 210] };
        let spec = architecture(kind, input);
        let model = Model::new(spec.clone(), 0).map_err(|e| e.to_string())?;
        let mut shape = vec![2];
        shape.extend(&spec.input_shape);
        let n = shape.iter().product();
        let x = Tensor::new(shape, uniform(n, -1.0, 1.0, &mut rng(1))).unwrap();
        let pass = model.forward_range(&x, model.layers().len(), Mode::Inference).map_err(|e| e.to_string())?;
        let mut len = input[1];
        for (i, layer) in model.layers().iter().enumerate() {
            match layer {
                Layer::Conv1d(c) => {
                    let num = len + 2 * c.padding - c.kernel;
                    let expect = num.div_ceil(c.stride) + 1;
                    ensure!(pass.shapes[i][1] == expect, "{kind} layer {i}: {} vs {expect}", pass.shapes[i][1]);
                    checked.0 += 1;
                }
                Layer::Dense(d) => {
                    let q = d.inputs * d.units + d.units;
                    ensure!(d.weight.value.len() + d.bias.value.len() == q, "{kind} dense {i}");
                    checked.1 += 1;
                }
                _ => {}
            }
            if let Some(&l) = pass.shapes[i].get(1) {
                len = l;
            }
        }
    }
    Ok(format!("{} conv lengths and {} dense parameter counts exact", checked.0, checked.1))
}

// ---------------------------------------------------------------- 6

fn blobs(n: usize, sep: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<BinaryClass>) {
    let mut r = rng(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let pos = i % 2 == 1;
        let c = if pos { sep } else { -sep };
        x.push(vec![c + r.random_range(-1.0..1.0), c + r.random_range(-1.0..1.0)]);
        y.push(if pos { Hypertension } else { PreHypertension });
    }
    (x, y)
}

fn dual_value(a: &[f64], q: &[Vec<f64>]) -> f64 {
    let quad: f64 = (0..a.len()).map(|i| (0..a.len()).map(|j| a[i] * q[i][j] * a[j]).sum::<f64>()).sum();
    a.iter().sum::<f64>() - 0.5 * quad
}

/// Projected gradient ascent on the box-and-equality constrained dual.
fn qp_oracle(q: &[Vec<f64>], y: &[f64], c: f64) -> f64 {
    let n = y.len();
    let project = |v: &[f64]| {
        let at = |lam: f64| -> Vec<f64> { v.iter().zip(y).map(|(vi, yi)| (vi - lam * yi).clamp(0.0, c)).collect() };
        let (mut lo, mut hi) = (-1e6, 1e6);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if at(mid).iter().zip(y).map(|(a, yi)| a * yi).sum::<f64>() > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        at(0.5 * (lo + hi))
    };
    let step = 1.0 / q.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut a = vec![0.0; n];
    for _ in 0..100_000 {
        let v: Vec<f64> = (0..n).map(|i| a[i] + step * (1.0 - (0..n).map(|j| q[i][j] * a[j]).sum::<f64>())).collect();
        a = project(&v);
    }
    dual_value(&a, q)
}

fn svm_criterion() -> Outcome {
    let mut worst_rel: f64 = 0.0;
    let mut worst_gap: f64 = 0.0;
    for (seed, kernel, c, n) in [
        (1u64, KernelSpec::Linear, 1.0, 20),
        (2, KernelSpec::Linear, 10.0, 25),
        (3, KernelSpec::Rbf { gamma: Some(0.5) }, 1.0, 24),
        (4, KernelSpec::Rbf { gamma: None }, 2.0, 16),
    ] {
        let (x, y) = blobs(n, 1.0, seed);
        let m = svm_fit(&x, &y, &SvmConfig { kernel, c, ..Default::default() }).map_err(|e| e.to_string())?;
        ensure!(m.state.gap <= 1e-6, "seed {seed}: gap {:.2e}", m.state.gap);
        worst_gap = worst_gap.max(m.state.gap);
        let q: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| m.y[i] * m.y[j] * m.kernel.eval(&x[i], &x[j])).collect())
            .collect();
        let oracle = qp_oracle(&q, &m.y, c);
        let ours = dual_value(&m.alpha, &q);
        let rel = (ours - oracle).abs() / oracle.abs();
        ensure!(rel <= 1e-4, "seed {seed}: dual {ours} vs oracle {oracle}");
        worst_rel = worst_rel.max(rel);
        let mut balance = 0.0;
        for (i, p) in x.iter().enumerate() {
            let (a, margin) = (m.alpha[i], m.y[i] * m.decision_value(p).map_err(|e| e.to_string())?);
            ensure!((0.0..=c).contains(&a), "alpha {a} outside [0, C]");
            let ok = if a == 0.0 {
                margin >= 1.0 - 1e-6
            } else if a < c {
                (margin - 1.0).abs() <= 1e-6
            } else {
                margin <= 1.0 + 1e-6
            };
            ensure!(ok, "seed {seed}: KKT violated at {i} (alpha {a}, margin {margin})");
            balance += a * m.y[i];
        }
        ensure!(balance.abs() <= 1e-9, "y'a = {balance}");
    }
    Ok(format!("gap max {worst_gap:.1e}, dual vs QP oracle max rel {worst_rel:.1e}, KKT at 1e-6"))
}

// ---------------------------------------------------------------- 7

fn max_depth(node: &Node) -> usize {
    match node {
        Node::Leaf { .. } => 0,
        Node::Split { left, right, .. } => 1 + max_depth(left).max(max_depth(right)),
    }
}

fn leaves_ok(node: &Node, min_split: u32) -> bool {
    match node {
        Node::Leaf { counts } => counts[0] == 0 || counts[1] == 0 || counts[0] + counts[1] < min_split,
        Node::Split { left, right, .. } => leaves_ok(left, min_split) && leaves_ok(right, min_split),
    }
}

fn forest_criterion() -> Outcome {
    let cfg = ForestConfig::default();
    ensure!(
        (cfg.n_estimators, cfg.max_depth, cfg.min_samples_split) == (300, 100, 3),
        "defaults {:?}",
        cfg
    );
    // Two samples are below the minimum split of three.
    let tree = fit_tree(&[vec![0.0], vec![1.0]], &[PreHypertension, Hypertension], vec![0, 1], &cfg, rng(0))
        .map_err(|e| e.to_string())?;
    ensure!(tree.root == Node::Leaf { counts: [1, 1] }, "two-sample node was split");
    // Three samples may be split, and the children are pure.
    let x3 = vec![vec![0.0], vec![1.0], vec![2.0]];
    let y3 = [PreHypertension, Hypertension, Hypertension];
    let tree = fit_tree(&x3, &y3, vec![0, 1, 2], &cfg, rng(0)).map_err(|e| e.to_string())?;
    ensure!(matches!(tree.root, Node::Split { .. }) && max_depth(&tree.root) == 1, "three-sample node not split once");
    // A pure node is never split.
    let tree = fit_tree(&x3, &[Hypertension; 3], vec![0, 1, 2], &cfg, rng(0)).map_err(|e| e.to_string())?;
    ensure!(matches!(tree.root, Node::Leaf { .. }), "pure node split");

    let mut r = rng(1);
    let x: Vec<Vec<f64>> = (0..200).map(|_| uniform(2, -1.0, 1.0, &mut r)).collect();
    let y: Vec<BinaryClass> =
        x.iter().map(|p| if (p[0] > 0.0) != (p[1] > 0.0) { Hypertension } else { PreHypertension }).collect();
    let forest = rf_fit(&x, &y, &ForestConfig { seed: 4, ..cfg }).map_err(|e| e.to_string())?;
    ensure!(forest.trees.len() == 300, "{} trees", forest.trees.len());
    for t in &forest.trees {
        ensure!(max_depth(&t.root) <= 100 && leaves_ok(&t.root, 3), "tree violates depth or split limits");
    }
    let hits = x.iter().zip(&y).filter(|(p, c)| rf_predict(&forest, p).map(|v| v.0 == **c).unwrap_or(false)).count();
    let acc = hits as f64 / 200.0;
    ensure!(acc >= 0.95, "XOR training accuracy {acc}");
    Ok(format!("split/purity fixtures hold; XOR training accuracy {acc:.3} with 300 trees"))
}

// ---------------------------------------------------------------- 8

fn metrics_exactness() -> Outcome {
    let mut r = rng(8);
    for case in 0..50 {
        let [tp, fp, fn_, tn] = [0; 4].map(|_| r.random_range(0..40u64));
        let cm = ConfusionMatrix { tp, fp, fn_, tn, positive_class: Hypertension };
        let m = compute_metrics(&cm);
        let frac = |n: u64, d: u64| (d > 0).then(|| (n, d));
        let same = |got: Option<Fraction>, want: Option<(u64, u64)>| match (got, want) {
            (None, None) => true,
            (Some(g), Some((n, d))) => g.num * d == n * g.den,
            _ => false,
        };
        let precision = frac(tp, tp + fp);
        let recall = frac(tp, tp + fn_);
        ensure!(same(m.precision, precision), "case {case}: precision");
        ensure!(same(m.recall, recall), "case {case}: recall");
        ensure!(same(m.specificity, frac(tn, tn + fp)), "case {case}: specificity");
        ensure!(same(m.accuracy, frac(tp + tn, tp + fp + fn_ + tn)), "case {case}: accuracy");
        // F1 is the harmonic mean 2PR / (P + R); with tp = 0 it is taken as 0.
        let f1_ok = match (m.f1, precision, recall) {
            (None, None, _) | (None, _, None) => true,
            (Some(g), Some((pn, pd)), Some((rn, rd))) => {
                let (num, den) = (2 * pn * rn, pn * rd + rn * pd);
                if den == 0 {
                    g.num == 0
                } else {
                    g.num * den == num * g.den
                }
            }
            _ => false,
        };
        ensure!(f1_ok, "case {case}: f1 {:?}", m.f1);
        // Swapping the positive class exchanges precision with NPV and
        // recall with specificity; accuracy is unchanged.
        let s = compute_metrics(&ConfusionMatrix { tp: tn, fp: fn_, fn_: fp, tn: tp, positive_class: PreHypertension });
        ensure!(same(s.recall, frac(tn, tn + fp)) && same(s.specificity, recall), "case {case}: swap recall");
        ensure!(same(s.accuracy, frac(tp + tn, tp + fp + fn_ + tn)), "case {case}: swap accuracy");
    }
    Ok("50 random count tuples exact; harmonic-mean and class-swap identities hold".into())
}

// ---------------------------------------------------------------- 9 and 12

fn synthetic_grid() -> GridConfig {
    let mut grid = GridConfig::default();
    grid.base.data = DataConfig { synthetic: Some(SynthConfig::default()), ..DataConfig::default() };
    grid
}

struct GridRun {
    reports: Vec<RunReport>,
    audit: AuditLog,
    elapsed: Duration,
}

fn synthetic_end_to_end(run: &GridRun) -> Outcome {
    let synth = SynthConfig::default();
    ensure!((synth.n_train, synth.n_test) == (400, 200), "synthetic corpus is {}/{}", synth.n_train, synth.n_test);
    let base = run.reports.iter().filter(|r| !r.stacked).count();
    ensure!(base == 30, "{base} extractor x head x batch rows");
    let mut lowest = (f64::INFINITY, String::new());
    for r in &run.reports {
        ensure!(r.is_completed(), "{} failed: {:?}", r.run_id, r.status);
        ensure!(r.n_test == 200, "{} evaluated on {} samples", r.run_id, r.n_test);
        let acc = r.accuracy().ok_or_else(|| format!("{} has no accuracy", r.run_id))?;
        if acc < lowest.0 {
            lowest = (acc, r.run_id.clone());
        }
    }
    ensure!(lowest.0 >= 0.95, "{} reached only {:.3}", lowest.1, lowest.0);
    let secs = run.elapsed.as_secs_f64();
    ensure!(secs < 600.0, "grid took {secs:.0} s");
    Ok(format!("{} runs, lowest accuracy {:.3} ({}); grid {secs:.0} s", run.reports.len(), lowest.0, lowest.1))
}

fn leakage_guards(run: &GridRun) -> Outcome {
    ensure!(!run.audit.touched(Partition::Test), "a fit saw test samples");
    let mut fits = 0;
    for e in run.audit.entries() {
        ensure!(e.counts.keys().all(|p| e.allowed.contains(p)), "{} admitted {:?}", e.fit, e.counts);
        ensure!(!e.fit.starts_with("stack:base") || e.counts.keys().all(|p| *p == Partition::Fold1), "{} saw fold 2", e.fit);
        fits += 1;
    }
    let mut stacked = 0;
    for r in run.reports.iter().filter(|r| r.stacked) {
        let diag = r.fold2_diagnostics.as_ref().ok_or_else(|| format!("{} lacks fold sizes", r.run_id))?;
        ensure!(diag.fold1_size + diag.fold2_size == r.n_train, "{}: folds do not cover train", r.run_id);
        // Every extractor or head fit inside a stacked run saw fold 1 only.
        for e in r.audit.iter().filter(|e| !e.fit.starts_with("stack:")) {
            let n = e.counts.get(&Partition::Train).copied().unwrap_or(0);
            ensure!(n == diag.fold1_size, "{} / {}: fit on {n} samples, fold 1 has {}", r.run_id, e.fit, diag.fold1_size);
        }
        let meta = r.audit.iter().find(|e| e.fit == "stack:meta").ok_or("no meta fit")?;
        ensure!(meta.counts.get(&Partition::Fold2) == Some(&diag.fold2_size), "{}: meta fit size", r.run_id);
        stacked += 1;
    }
    ensure!(stacked == 15, "{stacked} stacked rows");
    Ok(format!("{fits} audited fits, no test sample in any fit; {stacked} stacked runs keep fold 2 out of base fits"))
}

// ---------------------------------------------------------------- 10

#[derive(Clone, Copy)]
struct Point {
    id: usize,
    x: f64,
    label: BinaryClass,
}

fn probs(class: BinaryClass, confidence: f64) -> [f64; 2] {
    match class {
        Hypertension => [1.0 - confidence, confidence],
        PreHypertension => [confidence, 1.0 - confidence],
    }
}

/// Confidently right on its half of [0, 1), mildly wrong on the other.
struct HalfExpert(bool);

impl BaseLearner<Point> for HalfExpert {
    fn name(&self) -> String {
        format!("half-{}", self.0)
    }
    fn fit(&mut self, _: &[&Point], _: &[BinaryClass]) -> Result<(), String> {
        Ok(())
    }
    fn predict_proba(&self, p: &Point) -> Result<[f64; 2], String> {
        Ok(if (p.x < 0.5) == self.0 { probs(p.label, 0.95) } else { probs(p.label.other(), 0.6) })
    }
}

fn points(n: usize, seed: u64, offset: usize) -> Vec<Point> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let x: f64 = r.random_range(0.0..1.0);
            let label = if (x * 7.0).fract() > 0.5 { Hypertension } else { PreHypertension };
            Point { id: offset + i, x, label }
        })
        .collect()
}

fn stacking() -> Outcome {
    let train = points(400, 1, 0);
    let test = points(300, 2, 10_000);
    let labels: Vec<BinaryClass> = train.iter().map(|p| p.label).collect();
    let tags: Vec<SampleTag> = train.iter().map(|p| SampleTag::new(format!("s{}", p.id), Partition::Train)).collect();
    let cfg = StackConfig { seed: 5, ..Default::default() };
    ensure!(cfg.fold2_fraction == 0.25, "fold 2 fraction {}", cfg.fold2_fraction);
    let mut audit = AuditLog::new();
    let model = stack_fit(&train, &labels, &tags, vec![HalfExpert(true), HalfExpert(false)], &cfg, &mut audit)
        .map_err(|e| e.to_string())?;
    ensure!(model.fold2.len() == 100 && model.fold1.len() == 300, "folds {}/{}", model.fold1.len(), model.fold2.len());
    for n in [7usize, 10, 37, 401] {
        let expect = (n as f64 / 4.0 + 0.5).floor() as usize;
        ensure!(fold2_size(n, 0.25) == expect, "fold 2 of {n}: {}", fold2_size(n, 0.25));
    }
    let accuracy = |f: &dyn Fn(&Point) -> BinaryClass| test.iter().filter(|p| f(p) == p.label).count() as f64 / 300.0;
    let stacked = accuracy(&|p| stack_predict(&model, p).unwrap().0);
    let base = model
        .bases
        .iter()
        .map(|b| accuracy(&|p| if b.predict_proba(p).unwrap()[1] > 0.5 { Hypertension } else { PreHypertension }))
        .fold(0.0, f64::max);
    ensure!(stacked >= base, "stacked {stacked:.3} below best base {base:.3}");
    Ok(format!("held-out stacked {stacked:.3} >= best base {base:.3}; folds 300/100 of 400"))
}

// ---------------------------------------------------------------- 11

fn real_dataset(manifest: PathBuf) -> Outcome {
    let start = Instant::now();
    let config = ExperimentConfig {
        data: DataConfig { manifest: Some(manifest), ..DataConfig::default() },
        extractor: Extractor::LstmCnn,
        head: Head::Svm,
        batch_size: 3,
        ..ExperimentConfig::default()
    };
    let run = || run_experiment(&config).map_err(|e| e.to_string());
    let first = run()?;
    let hyper = first.class_metrics(Hypertension).and_then(|m| m.accuracy).ok_or("no hypertension accuracy")?;
    let acc = hyper.value();
    ensure!((0.55..=0.85).contains(&acc), "hypertension accuracy {acc:.3}");
    let second = run()?;
    ensure!(first.metrics == second.metrics, "repeated run differs");
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 1800.0, "took {secs:.0} s");
    Ok(format!("hypertension accuracy {acc:.3}, repeat identical, {secs:.0} s"))
}

// ----------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    })
}

fn main() {
    // libtest flags such as --nocapture or a name filter are accepted and ignored.
    let mut results: BTreeMap<u8, (&str, Option<Outcome>)> = BTreeMap::new();
    let mut record = |n: u8, name: &'static str, outcome: Option<Outcome>| {
        let (tag, detail) = match &outcome {
            Some(Ok(d)) => ("PASS", d.clone()),
            Some(Err(d)) => ("FAIL", d.clone()),
            None => ("SKIP", "PPGBP_MANIFEST not set; real dataset absent".to_string()),
        };
        println!("criterion {n:>2} {tag}: {name}: {detail}");
        results.insert(n, (name, outcome));
    };

    record(1, "gradient correctness", Some(guarded(gradient_correctness)));
    record(2, "filter specification", Some(guarded(filter_spec)));
    record(3, "STFT oracle equivalence", Some(guarded(stft_oracle)));
    record(4, "LSTM equation fidelity", Some(guarded(lstm_fidelity)));
    record(5, "shape formulas", Some(guarded(shape_formulas)));
    record(6, "SVM solver", Some(guarded(svm_criterion)));
    record(7, "random forest", Some(guarded(forest_criterion)));
    record(8, "metrics exactness", Some(guarded(metrics_exactness)));

    let grid = catch_unwind(|| {
        let start = Instant::now();
        let outcome = run_grid(&synthetic_grid());
        let run = GridRun { reports: outcome.reports, audit: outcome.audit, elapsed: start.elapsed() };
        (guarded(|| synthetic_end_to_end(&run)), guarded(|| leakage_guards(&run)))
    });
    let (e2e, leak) = grid.unwrap_or_else(|_| (Err("grid panicked".into()), Err("grid panicked".into())));
    record(9, "synthetic end-to-end grid", Some(e2e));
    record(10, "stacking", Some(guarded(stacking)));
    let manifest = std::env::var_os("PPGBP_MANIFEST").map(PathBuf::from);
    record(11, "real-dataset smoke", manifest.map(|m| guarded(|| real_dataset(m))));
    record(12, "leakage guards", Some(leak));

    let failed: Vec<u8> = results.iter().filter(|(_, (_, o))| matches!(o, Some(Err(_)))).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all criteria passed or skipped");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
