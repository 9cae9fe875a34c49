//! Inner loops shared by forward and backward passes.

use super::Scalar;

/// Dot product with eight independent accumulators, reduced in a fixed order.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let chunks = n / 8;
    let mut acc = [T::zero(); 8];
    for c in 0..chunks {
        let base = c * 8;
        let aa = &a[base..base + 8];
        let bb = &b[base..base + 8];
        for l in 0..8 {
            acc[l] = acc[l] + aa[l] * bb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

/// `c += a · b` for `a: [m, k]`, `b: [k, n]`.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip != T::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], crow);
            }
        }
    }
}

/// `c += a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = c[i * n + j] + dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c += aᵀ · b` for `a: [m, k]`, `b: [m, n]`, giving `c: [k, n]`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != T::zero() {
                axpy(aip, brow, &mut c[p * n..(p + 1) * n]);
            }
        }
    }
}

/// In-place softmax of `x / temperature` over the middle extent.
pub(crate) fn softmax_axis<T: Scalar>(
    x: &mut [T],
    outer: usize,
    len: usize,
    inner: usize,
    temperature: T,
) {
    let inv_t = T::one() / temperature;
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = ((x[at(j)] - max) * inv_t).exp();
                x[at(j)] = e;
                sum = sum + e;
            }
            for j in 0..len {
                x[at(j)] = x[at(j)] / sum;
            }
        }
    }
}

/// In-place log-softmax of `x / temperature` over the middle extent.
pub(crate) fn log_softmax_axis<T: Scalar>(
    x: &mut [T],
    outer: usize,
    len: usize,
    inner: usize,
    temperature: T,
) {
    let inv_t = T::one() / temperature;
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                sum = sum + ((x[at(j)] - max) * inv_t).exp();
            }
            let lse = sum.ln();
            for j in 0..len {
                x[at(j)] = (x[at(j)] - max) * inv_t - lse;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}
