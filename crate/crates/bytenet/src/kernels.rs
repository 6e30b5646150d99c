//! Low-level numeric kernels shared by the batched tape forward pass and the
//! incremental decoder.
//!
//! Generation caches past layer activations and computes one column at a
//! time, and it must reproduce the batched forward pass bit for bit. Both
//! paths therefore funnel every floating-point reduction through the same
//! kernel on the same operands; only then is the result independent of which
//! path produced it. Summation order inside a kernel is fixed: eight
//! independent accumulator lanes combined pairwise, then the remainder tail.

use crate::scalar::Scalar;

const LANES: usize = 8;

/// Dot product with a fixed lane-parallel summation order.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for j in 0..LANES {
            lanes[j] = lanes[j] + xa[j] * xb[j];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + *x * *y;
    }
    let head = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    head + tail
}

/// `y += a * x`, elementwise.
#[inline]
pub fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

/// `y += x`, elementwise.
#[inline]
pub fn add_assign<T: Scalar>(y: &mut [T], x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += *xi;
    }
}

#[inline]
pub fn relu_s<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

#[inline]
pub fn sigmoid_s<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn tanh_s<T: Scalar>(x: T) -> T {
    x.tanh()
}

/// Normalization affine: `(x - mean) * inv_std * gamma + beta`.
/// The parenthesization is part of the bit-identity contract.
#[inline]
pub fn norm_affine_s<T: Scalar>(x: T, mean: T, inv_std: T, gamma: T, beta: T) -> T {
    ((x - mean) * inv_std) * gamma + beta
}

/// `1 / sqrt(var + eps)`, the only way inference turns a stored variance
/// into a scale factor.
#[inline]
pub fn inv_std_s<T: Scalar>(var: T, eps: T) -> T {
    T::one() / (var + eps).sqrt()
}

/// Log-softmax of one logit column, written into `out`.
///
/// Stable form: shift by the maximum, accumulate `exp` with [`sum_fixed`],
/// subtract `ln` of the total.
#[inline]
pub fn log_softmax_col<T: Scalar>(logits: &[T], out: &mut [T]) {
    debug_assert_eq!(logits.len(), out.len());
    let mut m = T::neg_infinity();
    for &v in logits {
        if v > m {
            m = v;
        }
    }
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = (v - m).exp();
    }
    let total = sum_fixed(out);
    let log_total = total.ln();
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = v - m - log_total;
    }
}

/// Sum with the same fixed lane order as [`dot`].
#[inline]
pub fn sum_fixed<T: Scalar>(xs: &[T]) -> T {
    let mut lanes = [T::zero(); LANES];
    let mut cx = xs.chunks_exact(LANES);
    for x in &mut cx {
        for j in 0..LANES {
            lanes[j] = lanes[j] + x[j];
        }
    }
    let mut tail = T::zero();
    for &x in cx.remainder() {
        tail = tail + x;
    }
    let head = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    head + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_on_f64() {
        let a: Vec<f64> = (0..37).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64).cos()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn dot_is_deterministic_across_calls() {
        let a: Vec<f32> = (0..1003).map(|i| ((i * 37) % 101) as f32 * 0.013 - 0.5).collect();
        let b: Vec<f32> = (0..1003).map(|i| ((i * 53) % 97) as f32 * 0.017 - 0.7).collect();
        let first = dot(&a, &b);
        for _ in 0..5 {
            assert_eq!(first.to_bits(), dot(&a, &b).to_bits());
        }
    }

    #[test]
    fn log_softmax_sums_to_one_and_is_shift_invariant() {
        let logits = [1.0f64, -2.0, 0.5, 3.25, -0.75];
        let mut lp = [0.0; 5];
        log_softmax_col(&logits, &mut lp);
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = logits.iter().map(|v| v + 100.0).collect();
        let mut lp2 = [0.0; 5];
        log_softmax_col(&shifted, &mut lp2);
        for (x, y) in lp.iter().zip(&lp2) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn relu_at_zero_is_zero() {
        assert_eq!(relu_s(0.0f64), 0.0);
        assert_eq!(relu_s(-1.5f64), 0.0);
        assert_eq!(relu_s(2.5f64), 2.5);
    }
}
