//! Time-frequency and source-separation front-ends: a framed STFT and
//! symmetric FastICA.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("invalid window length {0} (needs at least 2)")]
    InvalidLength(usize),
    #[error("invalid STFT configuration: {0}")]
    InvalidConfig(String),
    #[error("signal of length {len} shorter than the window ({window})")]
    SignalTooShort { len: usize, window: usize },
    #[error("need at least 2 observations per channel, got {0}")]
    TooFewSamples(usize),
    #[error("requested {requested} components from {channels} channels")]
    TooManyComponents { requested: usize, channels: usize },
    #[error("covariance is rank deficient")]
    RankDeficient,
    #[error("FastICA did not converge within {0} iterations")]
    NoConvergence(usize),
}

pub type Result<T> = std::result::Result<T, SpectralError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Hann,
    Rectangular,
}

/// Periodic Hann (`0.5 * (1 - cos(2*pi*n/N))`) or all-ones weights.
pub fn make_window(kind: WindowKind, len: usize) -> Result<Vec<f64>> {
    if len < 2 {
        return Err(SpectralError::InvalidLength(len));
    }
    Ok(match kind {
        WindowKind::Rectangular => vec![1.0; len],
        WindowKind::Hann => (0..len)
            .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()))
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop: usize,
    pub window: WindowKind,
    pub fft_length: usize,
}

impl Default for StftConfig {
    /// 29 frames x 129 bins on a 2100-sample segment.
    fn default() -> Self {
        Self {
            window_length: 256,
            hop: 64,
            window: WindowKind::Hann,
            fft_length: 256,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_length < 2 {
            return Err(SpectralError::InvalidLength(self.window_length));
        }
        if !(1 <= self.hop && self.hop <= self.window_length && self.window_length <= self.fft_length) {
            return Err(SpectralError::InvalidConfig(format!(
                "need 1 <= hop ({}) <= window ({}) <= fft_length ({})",
                self.hop, self.window_length, self.fft_length
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_length / 2 + 1
    }

    pub fn frames(&self, signal_len: usize) -> usize {
        if signal_len < self.window_length {
            0
        } else {
            (signal_len - self.window_length) / self.hop + 1
        }
    }
}

/// One-sided STFT, frames x bins, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Vec<Complex64>,
    pub frames: usize,
    pub bins: usize,
    pub config: StftConfig,
    pub sample_rate_hz: f64,
}

impl Spectrogram {
    pub fn get(&self, frame: usize, bin: usize) -> Complex64 {
        self.values[frame * self.bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[Complex64] {
        &self.values[frame * self.bins..(frame + 1) * self.bins]
    }

    pub fn bin_hz(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate_hz / self.config.fft_length as f64
    }
}

/// STFT with a planned FFT and precomputed window, reusable across signals.
pub struct Stft {
    config: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("config", &self.config).finish()
    }
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let window = make_window(config.window, config.window_length)?;
        let fft = FftPlanner::new().plan_fft_forward(config.fft_length);
        Ok(Self { config, window, fft })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// Frame `m` covers samples `[m*hop, m*hop + window_length)`; each frame
    /// is windowed, zero-padded to `fft_length` and transformed. Phases are
    /// relative to the frame start.
    pub fn transform(&self, signal: &[f64], sample_rate_hz: f64) -> Result<Spectrogram> {
        let cfg = &self.config;
        if signal.len() < cfg.window_length {
            return Err(SpectralError::SignalTooShort {
                len: signal.len(),
                window: cfg.window_length,
            });
        }
        let frames = cfg.frames(signal.len());
        let bins = cfg.bins();
        let mut values = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_length];
        for m in 0..frames {
            let start = m * cfg.hop;
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (n, (x, w)) in signal[start..start + cfg.window_length].iter().zip(&self.window).enumerate() {
                buf[n] = Complex64::new(x * w, 0.0);
            }
            self.fft.process(&mut buf);
            values.extend_from_slice(&buf[..bins]);
        }
        Ok(Spectrogram {
            values,
            frames,
            bins,
            config: *cfg,
            sample_rate_hz,
        })
    }
}

pub fn stft(signal: &[f64], config: StftConfig, sample_rate_hz: f64) -> Result<Spectrogram> {
    Stft::new(config)?.transform(signal, sample_rate_hz)
}

pub const LOG_FLOOR: f64 = 1e-10;

/// `ln(|X| + 1e-10)`, frames x bins, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<f64>,
}

impl LogSpectrogram {
    pub fn get(&self, frame: usize, bin: usize) -> f64 {
        self.values[frame * self.bins + bin]
    }

    /// Bins x frames, row-major: bins become channels for a conv over time.
    pub fn bins_by_frames(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for f in 0..self.frames {
            for b in 0..self.bins {
                out[b * self.frames + f] = self.values[f * self.bins + b];
            }
        }
        out
    }

    /// CSV with a `frame` column followed by one column per bin.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame");
        for b in 0..self.bins {
            let _ = write!(s, ",bin{b}");
        }
        s.push('\n');
        for f in 0..self.frames {
            let _ = write!(s, "{f}");
            for b in 0..self.bins {
                let _ = write!(s, ",{}", self.get(f, b));
            }
            s.push('\n');
        }
        s
    }
}

pub fn log_magnitude(spec: &Spectrogram) -> LogSpectrogram {
    LogSpectrogram {
        frames: spec.frames,
        bins: spec.bins,
        values: spec.values.iter().map(|c| (c.norm() + LOG_FLOOR).ln()).collect(),
    }
}

/// Subtracts each row's mean. Returns the centred matrix and the means.
pub fn ica_center(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if x.ncols() < 2 {
        return Err(SpectralError::TooFewSamples(x.ncols()));
    }
    let mean = x.column_mean();
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    Ok((centered, mean))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastIcaConfig {
    pub n_components: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl FastIcaConfig {
    pub fn new(n_components: usize, seed: u64) -> Self {
        Self {
            n_components,
            max_iter: 500,
            tol: 1e-6,
            seed,
        }
    }
}

/// Fitted model for `x = A s` (channels x samples).
#[derive(Debug, Clone, PartialEq)]
pub struct IcaModel {
    pub mean: DVector<f64>,
    /// k x n, maps centred data to unit covariance.
    pub whitening: DMatrix<f64>,
    /// k x k orthonormal rotation found in the whitened space.
    pub rotation: DMatrix<f64>,
    /// k x n, `rotation * whitening`.
    pub unmixing: DMatrix<f64>,
    /// n x k mixing estimate (pseudo-inverse of `unmixing`).
    pub mixing: DMatrix<f64>,
    pub iterations: usize,
}

impl IcaModel {
    pub fn whiten(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.whitening * self.centered(x)
    }

    /// Estimated sources, k x T.
    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.unmixing * self.centered(x)
    }

    /// `A s + mean`.
    pub fn reconstruct(&self, sources: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = &self.mixing * sources;
        for mut col in x.column_iter_mut() {
            col += &self.mean;
        }
        x
    }

    fn centered(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut c = x.clone();
        for mut col in c.column_iter_mut() {
            col -= &self.mean;
        }
        c
    }
}

/// `(W W^T)^{-1/2} W`
fn symmetric_decorrelation(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(w * w.transpose());
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.max(f64::MIN_POSITIVE).sqrt()));
    &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose() * w
}

/// Symmetric FastICA with the `tanh` contrast.
pub fn fastica_fit(x: &DMatrix<f64>, config: FastIcaConfig) -> Result<IcaModel> {
    let (n, t) = x.shape();
    let k = config.n_components;
    if k == 0 || k > n {
        return Err(SpectralError::TooManyComponents { requested: k, channels: n });
    }
    let (xc, mean) = ica_center(x)?;

    let cov = &xc * xc.transpose() / t as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let largest = eig.eigenvalues[order[0]];
    if largest <= 0.0 || eig.eigenvalues[order[k - 1]] <= 1e-12 * largest {
        return Err(SpectralError::RankDeficient);
    }
    let mut whitening = DMatrix::zeros(k, n);
    for (row, &idx) in order.iter().take(k).enumerate() {
        let scale = 1.0 / eig.eigenvalues[idx].sqrt();
        for col in 0..n {
            whitening[(row, col)] = eig.eigenvectors[(col, idx)] * scale;
        }
    }
    let z = &whitening * &xc;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = DMatrix::from_fn(k, k, |_, _| StandardNormal.sample(&mut rng));
    let mut w = symmetric_decorrelation(&init);

    let mut converged_at = None;
    for iter in 1..=config.max_iter {
        let wz = &w * &z;
        let g = wz.map(f64::tanh);
        let g_prime_mean = DVector::from_iterator(
            k,
            g.row_iter().map(|row| row.iter().map(|v| 1.0 - v * v).sum::<f64>() / t as f64),
        );
        let w_next = &g * z.transpose() / t as f64 - DMatrix::from_diagonal(&g_prime_mean) * &w;
        let w_next = symmetric_decorrelation(&w_next);
        let lim = (&w_next * w.transpose())
            .diagonal()
            .iter()
            .map(|d| (1.0 - d.abs()).abs())
            .fold(0.0, f64::max);
        w = w_next;
        if lim <= config.tol {
            converged_at = Some(iter);
            break;
        }
    }
    let iterations = converged_at.ok_or(SpectralError::NoConvergence(config.max_iter))?;

    let unmixing = &w * &whitening;
    let mixing = unmixing
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|_| SpectralError::RankDeficient)?;
    Ok(IcaModel {
        mean,
        whitening,
        rotation: w,
        unmixing,
        mixing,
        iterations,
    })
}
