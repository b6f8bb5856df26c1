//! Branch-free `exp`, `sigmoid` and `tanh` that vectorize over slices.
//! Accurate to a few ulp over the whole double range.

use std::f64::consts::LOG2_E;

/// 1.5 * 2^52: adding it rounds to the nearest integer.
const ROUND: f64 = 6755399441055744.0;
const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;

/// `(2^n, expm1(r))` with `x = n ln 2 + r`, `|r| <= ln 2 / 2`.
#[inline(always)]
fn split(x: f64) -> (f64, f64) {
    let x = x.clamp(-700.0, 700.0);
    let t = x * LOG2_E + ROUND;
    let n = t - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    // Taylor series of expm1 to degree 13; the tail is below 2^-56.
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
    ] {
        p = p * r + c;
    }
    // The low mantissa bits of `t` hold `n` modulo 2^11.
    let scale = f64::from_bits((t.to_bits().wrapping_add(1023) & 0x7ff) << 52);
    (scale, p * r)
}

#[inline(always)]
pub fn exp(x: f64) -> f64 {
    let (scale, m1) = split(x);
    scale + scale * m1
}

#[inline(always)]
pub fn expm1(x: f64) -> f64 {
    let (scale, m1) = split(x);
    (scale - 1.0) + scale * m1
}

#[inline(always)]
pub fn sigmoid(x: f64) -> f64 {
    let e = exp(-x.abs());
    let s = 1.0 / (1.0 + e);
    if x >= 0.0 {
        s
    } else {
        e * s
    }
}

#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    // tanh rounds to +-1 beyond |x| = 19.1.
    let u = expm1(2.0 * x.abs().min(20.0));
    (u / (u + 2.0)).copysign(x)
}

#[inline(always)]
fn sigmoid_body(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = sigmoid(*x));
}

#[inline(always)]
fn tanh_body(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = tanh(*x));
}

#[cfg(target_arch = "x86_64")]
mod fast {
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn sigmoid(v: &mut [f64]) {
        super::sigmoid_body(v)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn tanh(v: &mut [f64]) {
        super::tanh_body(v)
    }
}

pub fn sigmoid_in_place(v: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if super::tensor::simd_available() {
        // SAFETY: the required CPU features were detected at run time.
        return unsafe { fast::sigmoid(v) };
    }
    sigmoid_body(v)
}

pub fn tanh_in_place(v: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if super::tensor::simd_available() {
        // SAFETY: the required CPU features were detected at run time.
        return unsafe { fast::tanh(v) };
    }
    tanh_body(v)
}
