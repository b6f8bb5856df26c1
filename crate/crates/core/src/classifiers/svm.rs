//! Soft-margin kernel SVM trained by SMO with second-order working-set
//! selection.
//!
//! The dual is solved in minimization form
//!
//! ```text
//! min_a  f(a) = 1/2 a'Qa - sum(a),   Q_ij = y_i y_j K(x_i, x_j),
//! s.t.   0 <= a_i <= C,  y'a = 0
//! ```
//!
//! with gradient `G = Qa - 1`. The dual objective is `D(a) = -f(a)` and
//! `L(a)` in the feasibility gap is `f(a)` itself, so that
//! `Delta = (J + L) / (J + 1) = (J - D) / (J + 1)`, where `J` is the primal
//! `1/2 |w|^2 + C sum(hinge)` at `w = sum a_i y_i phi(x_i)` with the bias
//! minimizing the hinge sum. Weak duality gives `J >= D`, so `Delta >= 0`
//! and it vanishes exactly at the optimum. `J` is kept as the lowest value
//! seen over all iterates (each is a valid primal upper bound), which makes
//! the reported gap non-increasing.

use serde::{Deserialize, Serialize};

use super::{check_training_set, ClassifierError, Result};
use crate::dataset::BinaryClass;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Kernel::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d2).exp()
            }
        }
    }
}

/// Kernel choice before fitting; an unset rbf width becomes
/// `1 / (m * var(X))` over all feature values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelSpec {
    Linear,
    Rbf {
        #[serde(default)]
        gamma: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    pub kernel: KernelSpec,
    pub c: f64,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self { kernel: KernelSpec::Rbf { gamma: None }, c: 1.0, tol: 1e-6, max_sweeps: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub sweep: usize,
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmTrainState {
    /// Best primal objective `J` over all iterates.
    pub primal: f64,
    /// Dual objective `D = -L`.
    pub dual: f64,
    pub gap: f64,
    /// Largest KKT violation `m(a) - M(a)` at exit.
    pub kkt_violation: f64,
    pub iterations: usize,
    pub sweeps: usize,
    pub history: Vec<GapRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub kernel: Kernel,
    pub c: f64,
    pub bias: f64,
    /// `a_i` of every training point, including zeros.
    pub alpha: Vec<f64>,
    /// `+1` for Hypertension, `-1` for PreHypertension.
    pub y: Vec<f64>,
    pub support_vectors: Vec<Vec<f64>>,
    /// Indices of the support vectors in the training set.
    pub support: Vec<usize>,
    pub n_features: usize,
    pub state: SvmTrainState,
}

/// `(J, D)` from a gradient consistent with `alpha`.
fn objectives(alpha: &[f64], g: &[f64], y: &[f64], c: f64) -> (f64, f64) {
    let quad: f64 = 0.5 * alpha.iter().zip(g).map(|(a, gi)| a * (gi + 1.0)).sum::<f64>();
    let dual = alpha.iter().sum::<f64>() - quad;
    // f_i = sum_j a_j y_j K_ij = y_i (G_i + 1)
    let f: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| yi * (gi + 1.0)).collect();
    let primal = quad + c * min_hinge_sum(&f, y);
    (primal, dual)
}

/// `min_b sum_i max(0, 1 - y_i (f_i + b))`.
///
/// Convex piecewise linear in `b`: each term has its kink at `y_i - f_i`,
/// with slope -1 to the left for positives and +1 to the right for
/// negatives. The minimum sits at the kink where the slope changes sign.
fn min_hinge_sum(f: &[f64], y: &[f64]) -> f64 {
    let hinge = |b: f64| -> f64 { f.iter().zip(y).map(|(fi, yi)| (1.0 - yi * (fi + b)).max(0.0)).sum() };
    let mut kinks: Vec<f64> = f.iter().zip(y).map(|(fi, yi)| yi - fi).collect();
    kinks.sort_by(f64::total_cmp);
    // Left of every kink only positives are active; each kink raises the slope by one.
    let mut slope = -(y.iter().filter(|&&v| v > 0.0).count() as f64);
    for &b in &kinks {
        slope += 1.0;
        if slope >= 0.0 {
            return hinge(b);
        }
    }
    hinge(kinks.last().copied().unwrap_or(0.0))
}

struct Smo<'a> {
    k: &'a [Vec<f64>],
    y: &'a [f64],
    c: f64,
    alpha: Vec<f64>,
    g: Vec<f64>,
}

const TAU: f64 = 1e-12;

impl Smo<'_> {
    fn in_up(&self, t: usize) -> bool {
        (self.y[t] > 0.0 && self.alpha[t] < self.c) || (self.y[t] < 0.0 && self.alpha[t] > 0.0)
    }

    fn in_low(&self, t: usize) -> bool {
        (self.y[t] > 0.0 && self.alpha[t] > 0.0) || (self.y[t] < 0.0 && self.alpha[t] < self.c)
    }

    /// `(m, M)`: max of `-y G` over I_up and min over I_low.
    fn extremes(&self) -> (f64, f64) {
        let (mut m_up, mut m_low) = (f64::NEG_INFINITY, f64::INFINITY);
        for t in 0..self.y.len() {
            let v = -self.y[t] * self.g[t];
            if self.in_up(t) {
                m_up = m_up.max(v);
            }
            if self.in_low(t) {
                m_low = m_low.min(v);
            }
        }
        (m_up, m_low)
    }

    fn select(&self) -> Option<(usize, usize)> {
        let n = self.y.len();
        let mut i = None;
        let mut gmax = f64::NEG_INFINITY;
        for t in 0..n {
            let v = -self.y[t] * self.g[t];
            if self.in_up(t) && v > gmax {
                gmax = v;
                i = Some(t);
            }
        }
        let i = i?;
        let mut j = None;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !self.in_low(t) {
                continue;
            }
            let v = -self.y[t] * self.g[t];
            let b = gmax - v;
            if b > 0.0 {
                let mut a = self.k[i][i] + self.k[t][t] - 2.0 * self.k[i][t];
                if a <= 0.0 {
                    a = TAU;
                }
                let obj = -(b * b) / a;
                if obj < best {
                    best = obj;
                    j = Some(t);
                }
            }
        }
        j.map(|j| (i, j))
    }

    fn q(&self, a: usize, b: usize) -> f64 {
        self.y[a] * self.y[b] * self.k[a][b]
    }

    fn update(&mut self, i: usize, j: usize) {
        let c = self.c;
        let (old_i, old_j) = (self.alpha[i], self.alpha[j]);
        let (qii, qjj, qij) = (self.q(i, i), self.q(j, j), self.q(i, j));
        let (mut ai, mut aj) = (old_i, old_j);
        if self.y[i] != self.y[j] {
            let quad = (qii + qjj + 2.0 * qij).max(TAU);
            let delta = (-self.g[i] - self.g[j]) / quad;
            let diff = ai - aj;
            ai += delta;
            aj += delta;
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > 0.0 {
                if ai > c {
                    ai = c;
                    aj = c - diff;
                }
            } else if aj > c {
                aj = c;
                ai = c + diff;
            }
        } else {
            let quad = (qii + qjj - 2.0 * qij).max(TAU);
            let delta = (self.g[i] - self.g[j]) / quad;
            let sum = ai + aj;
            ai -= delta;
            aj += delta;
            if sum > c {
                if ai > c {
                    ai = c;
                    aj = sum - c;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > c {
                if aj > c {
                    aj = c;
                    ai = sum - c;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
        }
        self.alpha[i] = ai;
        self.alpha[j] = aj;
        let (di, dj) = (ai - old_i, aj - old_j);
        for t in 0..self.y.len() {
            self.g[t] += self.q(t, i) * di + self.q(t, j) * dj;
        }
    }

    /// Recomputes `G = Qa - 1` from scratch to shed accumulated rounding.
    fn refresh_gradient(&mut self) {
        let n = self.y.len();
        for t in 0..n {
            let mut s = -1.0;
            for u in 0..n {
                if self.alpha[u] != 0.0 {
                    s += self.q(t, u) * self.alpha[u];
                }
            }
            self.g[t] = s;
        }
    }

    /// Bias from the free support vectors, or the middle of the feasible
    /// interval when none are free.
    fn bias(&self) -> f64 {
        let (mut sum, mut count) = (0.0, 0usize);
        for t in 0..self.y.len() {
            if self.alpha[t] > 0.0 && self.alpha[t] < self.c {
                sum += -self.y[t] * self.g[t];
                count += 1;
            }
        }
        if count > 0 {
            sum / count as f64
        } else {
            let (m, mm) = self.extremes();
            match (m.is_finite(), mm.is_finite()) {
                (true, true) => (m + mm) / 2.0,
                (true, false) => m,
                (false, true) => mm,
                _ => 0.0,
            }
        }
    }
}

fn resolve_kernel(spec: KernelSpec, x: &[Vec<f64>]) -> Kernel {
    match spec {
        KernelSpec::Linear => Kernel::Linear,
        KernelSpec::Rbf { gamma: Some(g) } => Kernel::Rbf { gamma: g },
        KernelSpec::Rbf { gamma: None } => {
            let m = x[0].len();
            let all = x.iter().flatten();
            let n = (x.len() * m) as f64;
            let mean = all.clone().sum::<f64>() / n;
            let var = all.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let gamma = if var > 0.0 { 1.0 / (m as f64 * var) } else { 1.0 };
            Kernel::Rbf { gamma }
        }
    }
}

pub fn svm_fit(x: &[Vec<f64>], labels: &[BinaryClass], config: &SvmConfig) -> Result<SvmModel> {
    let (n, m) = check_training_set(x, labels, true)?;
    if !(config.c > 0.0 && config.tol > 0.0 && config.max_sweeps > 0) {
        return Err(ClassifierError::InvalidConfig("C, tol and max_sweeps must be positive".into()));
    }
    let kernel = resolve_kernel(config.kernel, x);
    let gram: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| kernel.eval(&x[i], &x[j])).collect()).collect();
    let y: Vec<f64> = labels.iter().map(|c| c.sign()).collect();
    let mut smo = Smo { k: &gram, y: &y, c: config.c, alpha: vec![0.0; n], g: vec![-1.0; n] };

    let mut history = Vec::new();
    let mut best_primal = f64::INFINITY;
    let mut iterations = 0usize;
    let mut sweeps = 0usize;
    let tol = config.tol;
    let mut measure = |smo: &Smo, sweep: usize, history: &mut Vec<GapRecord>| -> (f64, f64, f64) {
        let (primal, dual) = objectives(&smo.alpha, &smo.g, &y, config.c);
        best_primal = best_primal.min(primal);
        let gap = ((best_primal - dual) / (best_primal + 1.0)).max(0.0);
        history.push(GapRecord { sweep, primal: best_primal, dual, gap });
        (best_primal, dual, gap)
    };

    let (primal, dual, gap, violation) = loop {
        let (m_up, m_low) = smo.extremes();
        let violation = (m_up - m_low).max(0.0);
        let sweep_done = iterations > 0 && iterations % n == 0;
        if violation <= tol || sweep_done {
            smo.refresh_gradient();
            let (m_up, m_low) = smo.extremes();
            let violation = (m_up - m_low).max(0.0);
            if sweep_done {
                sweeps += 1;
            }
            let (p, d, gap) = measure(&smo, sweeps, &mut history);
            if violation <= tol && gap <= tol {
                break (p, d, gap, violation);
            }
            if sweeps >= config.max_sweeps {
                return Err(ClassifierError::NoConvergence(config.max_sweeps));
            }
        }
        match smo.select() {
            Some((i, j)) => smo.update(i, j),
            None => {
                smo.refresh_gradient();
                let (m_up, m_low) = smo.extremes();
                let (p, d, gap) = measure(&smo, sweeps, &mut history);
                break (p, d, gap, (m_up - m_low).max(0.0));
            }
        }
        iterations += 1;
    };

    let bias = smo.bias();
    let support: Vec<usize> = (0..n).filter(|&t| smo.alpha[t] > 0.0).collect();
    log::debug!("svm: {iterations} iterations, {} support vectors, gap {gap:e}", support.len());
    Ok(SvmModel {
        kernel,
        c: config.c,
        bias,
        support_vectors: support.iter().map(|&t| x[t].clone()).collect(),
        support,
        alpha: smo.alpha,
        y,
        n_features: m,
        state: SvmTrainState { primal, dual, gap, kkt_violation: violation, iterations, sweeps, history },
    })
}

impl SvmModel {
    /// `sum a_i y_i K(x_i, x) + b` over the support vectors.
    pub fn decision_value(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(ClassifierError::ShapeMismatch { expected: self.n_features, found: x.len() });
        }
        let s: f64 = self
            .support
            .iter()
            .zip(&self.support_vectors)
            .map(|(&t, sv)| self.alpha[t] * self.y[t] * self.kernel.eval(sv, x))
            .sum();
        Ok(s + self.bias)
    }

    /// `[P(PreHypertension), P(Hypertension)]` as a logistic squash of the
    /// decision value.
    pub fn predict_proba(&self, x: &[f64]) -> Result<[f64; 2]> {
        let p = crate::nn::sigmoid(self.decision_value(x)?);
        Ok([1.0 - p, p])
    }
}

/// Class by the sign of the decision value (zero counts as Hypertension).
pub fn svm_predict(model: &SvmModel, x: &[f64]) -> Result<(BinaryClass, f64)> {
    let d = model.decision_value(x)?;
    let class = if d >= 0.0 { BinaryClass::Hypertension } else { BinaryClass::PreHypertension };
    Ok((class, d))
}
