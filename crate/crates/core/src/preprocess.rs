//! Signal conditioning for raw PPG: median filter, Chebyshev type-II
//! low-pass applied forward-backward, linear detrend and z-scoring.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::dataset::{PpgSegment, SAMPLE_RATE_HZ};

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("median kernel must be odd, got {0}")]
    EvenKernel(usize),
    #[error("median kernel {kernel} exceeds signal length {len}")]
    KernelTooLarge { kernel: usize, len: usize },
    #[error("invalid filter specification: {0}")]
    InvalidSpec(String),
    #[error("signal of length {len} too short for forward-backward filtering (needs > {min})")]
    SignalTooShort { len: usize, min: usize },
    #[error("signal of length {0} too short (needs at least 2 samples)")]
    TooShort(usize),
    #[error("signal has zero variance")]
    ZeroVariance,
}

pub type Result<T> = std::result::Result<T, PreprocessError>;

/// Chebyshev type-II low-pass specification. `cutoff_hz` is the stopband
/// edge: the response there equals `-stopband_attenuation_db`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cheby2Spec {
    pub order: usize,
    pub cutoff_hz: f64,
    pub stopband_attenuation_db: f64,
    pub sample_rate_hz: f64,
}

impl Default for Cheby2Spec {
    fn default() -> Self {
        Self {
            order: 4,
            cutoff_hz: 25.0,
            stopband_attenuation_db: 10.0,
            sample_rate_hz: SAMPLE_RATE_HZ,
        }
    }
}

/// Transfer function `b(z) / a(z)` with `a[0] == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IirFilter {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    pub design: Cheby2Spec,
}

impl IirFilter {
    pub fn order(&self) -> usize {
        self.a.len() - 1
    }

    /// Complex response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / self.design.sample_rate_hz;
        let eval = |coeffs: &[f64]| {
            coeffs
                .iter()
                .enumerate()
                .map(|(k, &c)| c * Complex64::from_polar(1.0, -w * k as f64))
                .sum::<Complex64>()
        };
        eval(&self.b) / eval(&self.a)
    }

    pub fn magnitude(&self, freq_hz: f64) -> f64 {
        self.response(freq_hz).norm()
    }

    /// Roots of the denominator, from the eigenvalues of its companion matrix.
    pub fn poles(&self) -> Vec<Complex64> {
        let n = self.order();
        if n == 0 {
            return Vec::new();
        }
        let mut companion = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            companion[(0, j)] = -self.a[j + 1] / self.a[0];
        }
        for i in 1..n {
            companion[(i, i - 1)] = 1.0;
        }
        companion.complex_eigenvalues().iter().copied().collect()
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.norm() < 1.0)
    }

    /// Steady-state transposed direct-form state for a unit step input.
    fn step_state(&self) -> Vec<f64> {
        let n = self.order();
        let dc = self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>();
        let mut zi = vec![0.0; n];
        let mut acc = 0.0;
        for i in (0..n).rev() {
            acc += self.b[i + 1] - self.a[i + 1] * dc;
            zi[i] = acc;
        }
        zi
    }

    /// Single causal pass (transposed direct form II) from state `zi`.
    pub fn lfilter(&self, signal: &[f64], zi: &[f64]) -> Vec<f64> {
        let n = self.order();
        let mut z = zi.to_vec();
        let mut out = Vec::with_capacity(signal.len());
        for &x in signal {
            let y = self.b[0] * x + z.first().copied().unwrap_or(0.0);
            for i in 0..n {
                let next = if i + 1 < n { z[i + 1] } else { 0.0 };
                z[i] = self.b[i + 1] * x - self.a[i + 1] * y + next;
            }
            out.push(y);
        }
        out
    }
}

/// Digital Chebyshev type-II low-pass: analog prototype, stopband edge
/// pre-warped, bilinear transform.
pub fn design_cheby2(spec: Cheby2Spec) -> Result<IirFilter> {
    let Cheby2Spec {
        order: n,
        cutoff_hz,
        stopband_attenuation_db: atten,
        sample_rate_hz: fs,
    } = spec;
    if n == 0 {
        return Err(PreprocessError::InvalidSpec("order must be at least 1".into()));
    }
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(PreprocessError::InvalidSpec(format!("sample rate {fs} Hz")));
    }
    if !(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0) {
        return Err(PreprocessError::InvalidSpec(format!(
            "cutoff {cutoff_hz} Hz outside (0, {}) Hz",
            fs / 2.0
        )));
    }
    if !(atten > 0.0 && atten.is_finite()) {
        return Err(PreprocessError::InvalidSpec(format!("attenuation {atten} dB")));
    }

    // Analog prototype with the stopband edge at 1 rad/s.
    let eps = 1.0 / (10f64.powf(0.1 * atten) - 1.0).sqrt();
    let mu = (1.0 / eps).asinh() / n as f64;
    let ms: Vec<f64> = (0..n).map(|i| -(n as f64) + 1.0 + 2.0 * i as f64).collect();
    let mut zeros: Vec<Complex64> = ms
        .iter()
        .filter(|&&m| m != 0.0)
        .map(|&m| Complex64::new(0.0, 1.0 / (m * PI / (2.0 * n as f64)).sin()))
        .collect();
    let mut poles: Vec<Complex64> = ms
        .iter()
        .map(|&m| {
            let p = -Complex64::from_polar(1.0, PI * m / (2.0 * n as f64));
            Complex64::new(mu.sinh() * p.re, mu.cosh() * p.im).inv()
        })
        .collect();
    let mut gain = (poles.iter().map(|p| -p).product::<Complex64>()
        / zeros.iter().map(|z| -z).product::<Complex64>())
    .re;

    // Move the stopband edge to the pre-warped analog frequency.
    let fs2 = 2.0 * fs;
    let warped = fs2 * (PI * cutoff_hz / fs).tan();
    zeros.iter_mut().for_each(|z| *z *= warped);
    poles.iter_mut().for_each(|p| *p *= warped);
    let degree = poles.len() - zeros.len();
    gain *= warped.powi(degree as i32);

    // Bilinear transform.
    let num = zeros.iter().map(|z| fs2 - z).product::<Complex64>();
    let den = poles.iter().map(|p| fs2 - p).product::<Complex64>();
    let gain_d = gain * (num / den).re;
    let mut zeros_d: Vec<Complex64> = zeros.iter().map(|z| (fs2 + z) / (fs2 - z)).collect();
    zeros_d.extend(std::iter::repeat_n(Complex64::new(-1.0, 0.0), degree));
    let poles_d: Vec<Complex64> = poles.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();

    let b: Vec<f64> = poly(&zeros_d).into_iter().map(|c| gain_d * c).collect();
    let a = poly(&poles_d);
    Ok(IirFilter { b, a, design: spec })
}

/// Monic polynomial coefficients (highest power first) from its roots;
/// conjugate-paired roots give a real result.
fn poly(roots: &[Complex64]) -> Vec<f64> {
    let mut coeffs = vec![Complex64::new(1.0, 0.0)];
    for r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); coeffs.len() + 1];
        for (i, c) in coeffs.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * r;
        }
        coeffs = next;
    }
    coeffs.into_iter().map(|c| c.re).collect()
}

/// Zero-phase filtering: odd-reflection padding of `3 * order` samples on
/// each side and steady-state initial conditions. The forward-backward and
/// backward-forward orderings are averaged so the result commutes exactly
/// with time reversal, edge transients included.
pub fn filtfilt(filter: &IirFilter, signal: &[f64]) -> Result<Vec<f64>> {
    let pad = 3 * filter.order();
    let n = signal.len();
    if n <= pad {
        return Err(PreprocessError::SignalTooShort { len: n, min: pad });
    }
    let first = signal[0];
    let last = signal[n - 1];
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
    ext.extend_from_slice(signal);
    ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));

    let fb = forward_backward(filter, &ext);
    ext.reverse();
    let mut bf = forward_backward(filter, &ext);
    bf.reverse();
    Ok(fb[pad..pad + n]
        .iter()
        .zip(&bf[pad..pad + n])
        .map(|(a, b)| 0.5 * (a + b))
        .collect())
}

fn forward_backward(filter: &IirFilter, x: &[f64]) -> Vec<f64> {
    let zi = filter.step_state();
    let scaled = |x0: f64| zi.iter().map(|z| z * x0).collect::<Vec<_>>();
    let mut y = filter.lfilter(x, &scaled(x[0]));
    y.reverse();
    let mut y = filter.lfilter(&y, &scaled(y[0]));
    y.reverse();
    y
}

/// Running median over a `kernel`-wide centred window, replicating the
/// boundary samples at the edges.
pub fn median_filter(signal: &[f64], kernel: usize) -> Result<Vec<f64>> {
    if kernel % 2 == 0 {
        return Err(PreprocessError::EvenKernel(kernel));
    }
    if kernel > signal.len() {
        return Err(PreprocessError::KernelTooLarge {
            kernel,
            len: signal.len(),
        });
    }
    let half = kernel / 2;
    let last = signal.len() - 1;
    let mut window = vec![0.0; kernel];
    Ok((0..signal.len())
        .map(|i| {
            for (j, w) in window.iter_mut().enumerate() {
                let idx = (i + j).saturating_sub(half).min(last);
                *w = signal[idx];
            }
            *window.select_nth_unstable_by(half, f64::total_cmp).1
        })
        .collect())
}

/// Removes the least-squares straight line.
pub fn detrend(signal: &[f64]) -> Result<Vec<f64>> {
    let n = signal.len();
    if n < 2 {
        return Err(PreprocessError::TooShort(n));
    }
    let t_mean = (n - 1) as f64 / 2.0;
    let x_mean = signal.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &x) in signal.iter().enumerate() {
        let dt = i as f64 - t_mean;
        sxy += dt * (x - x_mean);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    Ok(signal
        .iter()
        .enumerate()
        .map(|(i, &x)| x - x_mean - slope * (i as f64 - t_mean))
        .collect())
}

/// Z-score with the population (divide-by-N) standard deviation.
pub fn normalize(signal: &[f64]) -> Result<Vec<f64>> {
    let n = signal.len();
    if n < 2 {
        return Err(PreprocessError::TooShort(n));
    }
    let mean = signal.iter().sum::<f64>() / n as f64;
    let var = signal.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    let scale = signal.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if std <= 1e-12 * scale || std == 0.0 {
        return Err(PreprocessError::ZeroVariance);
    }
    Ok(signal.iter().map(|x| (x - mean) / std).collect())
}

/// Winsorizes at `mean ± sigmas * std`.
pub fn clip(signal: &[f64], sigmas: f64) -> Vec<f64> {
    let n = signal.len() as f64;
    let mean = signal.iter().sum::<f64>() / n;
    let std = (signal.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let (lo, hi) = (mean - sigmas * std, mean + sigmas * std);
    signal.iter().map(|x| x.clamp(lo, hi)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DetrendKind {
    #[default]
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeKind {
    #[default]
    Zscore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub median_kernel: usize,
    pub filter: Cheby2Spec,
    pub detrend: DetrendKind,
    pub normalize: NormalizeKind,
    /// Winsorizing threshold in standard deviations; off when `None`.
    pub clip_sigma: Option<f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            median_kernel: 3,
            filter: Cheby2Spec::default(),
            detrend: DetrendKind::Linear,
            normalize: NormalizeKind::Zscore,
            clip_sigma: None,
        }
    }
}

/// The conditioning chain with its filter designed once.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    config: PreprocessConfig,
    filter: IirFilter,
}

impl Preprocessor {
    pub fn new(config: PreprocessConfig) -> Result<Self> {
        if config.median_kernel == 0 || config.median_kernel % 2 == 0 {
            return Err(PreprocessError::EvenKernel(config.median_kernel));
        }
        let filter = design_cheby2(config.filter)?;
        Ok(Self { config, filter })
    }

    pub fn filter(&self) -> &IirFilter {
        &self.filter
    }

    pub fn config(&self) -> &PreprocessConfig {
        &self.config
    }

    /// median -> filtfilt -> detrend -> normalize (-> clip).
    pub fn apply(&self, signal: &[f64]) -> Result<Vec<f64>> {
        let x = median_filter(signal, self.config.median_kernel)?;
        let x = filtfilt(&self.filter, &x)?;
        let x = match self.config.detrend {
            DetrendKind::Linear => detrend(&x)?,
        };
        let x = match self.config.normalize {
            NormalizeKind::Zscore => normalize(&x)?,
        };
        Ok(match self.config.clip_sigma {
            Some(k) => clip(&x, k),
            None => x,
        })
    }
}

pub fn preprocess_pipeline(raw: &PpgSegment, config: &PreprocessConfig) -> Result<PpgSegment> {
    let samples = Preprocessor::new(config.clone())?.apply(&raw.samples)?;
    Ok(PpgSegment {
        samples,
        sample_rate_hz: raw.sample_rate_hz,
        record: raw.record.clone(),
    })
}
