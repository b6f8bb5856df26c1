use serde::{Deserialize, Serialize};

use super::{NnError, Result};

/// Dense row-major array of `f64`.
///
/// Batched tensors carry the batch as their leading dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NnError::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Leading dimension.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Shape without the leading dimension.
    pub fn sample_shape(&self) -> &[usize] {
        &self.shape[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.sample_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Stacks equally shaped samples along a new leading dimension.
    pub fn stack<'a, I>(samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Tensor>,
    {
        let mut iter = samples.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| NnError::ShapeMismatch("cannot stack an empty list".into()))?;
        let mut data = first.data.clone();
        let mut count = 1;
        for t in iter {
            if t.shape != first.shape {
                return Err(NnError::ShapeMismatch(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
            count += 1;
        }
        let mut shape = vec![count];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Splits off the leading dimension.
    pub fn unstack(&self) -> Vec<Tensor> {
        let shape = self.sample_shape().to_vec();
        (0..self.batch())
            .map(|i| Tensor { shape: shape.clone(), data: self.sample(i).to_vec() })
            .collect()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }
}

// The kernels below are compiled twice: portable, and with AVX2+FMA for
// hosts that report both at run time.

#[inline(always)]
fn axpy_body(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = a.mul_add(xi, *yi);
    }
}

#[inline(always)]
fn axpy_portable(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Eight interleaved partial sums so the loop vectorizes.
#[inline(always)]
fn dot_body(x: &[f64], y: &[f64], fma: bool) -> f64 {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &y[..n]);
    let mut acc = [0.0; 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for k in 0..8 {
            acc[k] = if fma { a[k].mul_add(b[k], acc[k]) } else { acc[k] + a[k] * b[k] };
        }
    }
    let tail: f64 = xr.iter().zip(yr).map(|(a, b)| a * b).sum();
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7])) + tail
}

#[cfg(target_arch = "x86_64")]
mod fast {
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
        super::axpy_body(a, x, y)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn dot(x: &[f64], y: &[f64]) -> f64 {
        super::dot_body(x, y, true)
    }

}

#[cfg(target_arch = "x86_64")]
pub(super) fn simd_available() -> bool {
    std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
}

/// `y += a * x`
#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if simd_available() {
        // SAFETY: the required CPU features were detected at run time.
        return unsafe { fast::axpy(a, x, y) };
    }
    axpy_portable(a, x, y)
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if simd_available() {
        // SAFETY: the required CPU features were detected at run time.
        return unsafe { fast::dot(x, y) };
    }
    dot_body(x, y, false)
}
