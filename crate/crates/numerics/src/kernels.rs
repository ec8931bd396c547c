//! Pure vector kernels. The tape reuses these for its forward passes.

use crate::matrix::Real;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Numerically stable softmax (max-subtracted). Empty input gives empty output.
pub fn softmax<T: Real>(v: &[T]) -> Vec<T> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place<T: Real>(v: &mut [T]) {
    if v.is_empty() {
        return;
    }
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

pub fn log_sum_exp<T: Real>(v: &[T]) -> T {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let total: T = v.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}

/// Statistics kept from a layer-norm forward pass for the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct NormStats<T> {
    pub mean: T,
    pub inv_std: T,
}

/// `gain ⊙ (v − mean)/sqrt(var + eps) + bias` with population variance.
pub fn layer_norm<T: Real>(v: &[T], gain: &[T], bias: &[T], eps: T) -> Vec<T> {
    let mut out = vec![T::zero(); v.len()];
    layer_norm_into(v, gain, bias, eps, &mut out);
    out
}

pub fn layer_norm_into<T: Real>(
    v: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
    out: &mut [T],
) -> NormStats<T> {
    assert_eq!(v.len(), gain.len(), "layer_norm gain length mismatch");
    assert_eq!(v.len(), bias.len(), "layer_norm bias length mismatch");
    let n = T::of(v.len() as f64);
    let mean = v.iter().copied().sum::<T>() / n;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    for i in 0..v.len() {
        out[i] = gain[i] * (v[i] - mean) * inv_std + bias[i];
    }
    NormStats { mean, inv_std }
}

/// Mean of the selected rows of a row-major `(_, width)` buffer; zero vector for an empty selection.
pub fn masked_mean<T: Real>(data: &[T], width: usize, selection: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); width];
    if selection.is_empty() {
        return out;
    }
    for &r in selection {
        for (o, &x) in out.iter_mut().zip(&data[r * width..(r + 1) * width]) {
            *o += x;
        }
    }
    let inv = T::one() / T::of(selection.len() as f64);
    for o in &mut out {
        *o *= inv;
    }
    out
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
