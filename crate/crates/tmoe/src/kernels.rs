//! Shared numeric kernels.
//!
//! The tape ops and the incremental (no-grad) decode path both route through
//! these functions. Accumulation order is fixed (ascending index) everywhere,
//! so a full-sequence tape forward and a token-by-token cached forward produce
//! bit-identical values.

use crate::real::{rf, Real};

/// `a [m,k] @ b [k,n]`, row-major, ikj loop order.
pub fn matmul<T: Real>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &b_lj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_il * b_lj;
            }
        }
    }
    out
}

/// `a [m,k] @ b^T` where `b` is `[n,k]`: out[i][j] = dot(a_i, b_j).
pub fn matmul_nt<T: Real>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `a^T @ b` where `a` is `[k,m]`, `b` is `[k,n]` (gradient helper).
pub fn matmul_tn<T: Real>(a: &[T], k: usize, m: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for l in 0..k {
        let a_row = &a[l * m..(l + 1) * m];
        let b_row = &b[l * n..(l + 1) * n];
        for (i, &a_li) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &b_lj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_li * b_lj;
            }
        }
    }
    out
}

/// Dot product, ascending index.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

/// In-place stable softmax over one row (max subtraction).
pub fn softmax_row<T: Real>(row: &mut [T]) {
    let mut max = row[0];
    for &x in row.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Stable log-softmax of a row, computed in f64 (used for sampling math and
/// reward bookkeeping regardless of model precision).
pub fn log_softmax_f64<T: Real>(logits: &[T]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &x in logits {
        max = max.max(x.to_f64());
    }
    let mut sum = 0.0;
    for &x in logits {
        sum += (x.to_f64() - max).exp();
    }
    let lse = max + sum.ln();
    logits.iter().map(|&x| x.to_f64() - lse).collect()
}

/// In-place stable log-softmax over one row in the row's own precision.
pub fn log_softmax_row<T: Real>(row: &mut [T]) {
    let mut max = row[0];
    for &x in row.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for &x in row.iter() {
        sum += (x - max).exp();
    }
    let lse = max + sum.ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

/// RMS normalization of one row with a learnable per-channel scale.
/// Returns the reciprocal RMS (handy for gradients).
pub fn rmsnorm_row<T: Real>(x: &[T], scale: &[T], eps: f64, out: &mut [T]) -> T {
    debug_assert_eq!(x.len(), scale.len());
    let mut sum_sq = T::zero();
    for &v in x {
        sum_sq += v * v;
    }
    let mean_sq = sum_sq / rf::<T>(x.len() as f64);
    let inv = (mean_sq + rf::<T>(eps)).sqrt().recip();
    for ((o, &v), &s) in out.iter_mut().zip(x.iter()).zip(scale.iter()) {
        *o = v * inv * s;
    }
    inv
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// GELU, tanh approximation.
pub fn gelu<T: Real>(x: T) -> T {
    let half = rf::<T>(0.5);
    let inner = rf::<T>(GELU_C) * (x + rf::<T>(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

/// Derivative of the tanh-approximation GELU.
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = rf::<T>(0.5);
    let c = rf::<T>(GELU_C);
    let a = rf::<T>(GELU_A);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + rf::<T>(3.0) * a * x * x)
}

pub fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Rotary position encoding applied in place to one head row of even width.
/// `inverse = true` applies the transpose rotation (used by the backward pass).
pub fn rope_rotate<T: Real>(row: &mut [T], pos: usize, base: f64, inverse: bool) {
    let d = row.len();
    debug_assert!(d % 2 == 0, "rope needs an even head dimension");
    let half = d / 2;
    for i in 0..half {
        let freq = base.powf(-2.0 * i as f64 / d as f64);
        let mut angle = pos as f64 * freq;
        if inverse {
            angle = -angle;
        }
        let (sin, cos) = (rf::<T>(angle.sin()), rf::<T>(angle.cos()));
        let a = row[2 * i];
        let b = row[2 * i + 1];
        row[2 * i] = a * cos - b * sin;
        row[2 * i + 1] = a * sin + b * cos;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_identity() {
        // [1 2; 3 4] @ [1 0; 0 1]
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let id = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(matmul(&a, 2, 2, &id, 2), a);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2,3]
        let b = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // [3,2]
        let c = matmul(&a, 2, 3, &b, 2);
        // b^T is [2,3]; matmul_nt(a, b^T rows)
        let bt = vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        assert_eq!(matmul_nt(&a, 2, 3, &bt, 2), c);
        // a = (a^T)^T: matmul_tn with a^T [3,2]
        let at = vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        assert_eq!(matmul_tn(&at, 3, 2, &b, 2), c);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut row = vec![0.0f64; 3];
        softmax_row(&mut row);
        for &p in &row {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_handles_masked_entries() {
        let mut row = vec![1.0f32, -1e30, 2.0];
        softmax_row(&mut row);
        assert_eq!(row[1], 0.0);
        assert!((row[0] + row[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(sigmoid(0.0f64), 0.5);
    }

    #[test]
    fn rmsnorm_hand_value() {
        // x = [3,4], eps = 0, scale = 1: x / sqrt(mean(x^2)) = x / sqrt(12.5)
        let x = [3.0f64, 4.0];
        let scale = [1.0, 1.0];
        let mut out = [0.0; 2];
        rmsnorm_row(&x, &scale, 0.0, &mut out);
        assert!((out[0] - 3.0 / 12.5f64.sqrt()).abs() < 1e-15);
        assert!((out[1] - 4.0 / 12.5f64.sqrt()).abs() < 1e-15);
        assert!((out[0] - 0.8485281374238570).abs() < 1e-12);
        assert!((out[1] - 1.1313708498984760).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_matches_softmax_log() {
        let logits = vec![0.3f64, -1.2, 2.0, 0.0];
        let lp = log_softmax_f64(&logits);
        let mut sm = logits.clone();
        softmax_row(&mut sm);
        for (l, s) in lp.iter().zip(sm.iter()) {
            assert!((l.exp() - s).abs() < 1e-12);
        }
        let total: f64 = lp.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rope_round_trips() {
        let orig = vec![0.3f64, -1.4, 0.9, 2.2];
        let mut row = orig.clone();
        rope_rotate(&mut row, 17, 10_000.0, false);
        rope_rotate(&mut row, 17, 10_000.0, true);
        for (a, b) in row.iter().zip(orig.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0f64, -1.0, -0.1, 0.0, 0.2, 1.5, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(
                (gelu_grad(x) - fd).abs() < 1e-8,
                "gelu'({x}) = {} vs fd {fd}",
                gelu_grad(x)
            );
        }
    }
}
