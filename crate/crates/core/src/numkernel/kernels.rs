//! Slice-level math shared by the tape and the plain-tensor entry points.
//!
//! Every reduction runs sequentially in row-major order so results are
//! bit-reproducible.

use super::tensor::Scalar;

pub const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608;
pub const GELU_CUBIC: f64 = 0.044715;

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, (k, 1), b, (n, 1), T::zero(), &mut c, (n, 1));
    c
}

/// `da[m×k] += dc[m×n] · bᵀ`
pub fn matmul_grad_a<T: Scalar>(dc: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(m, n, k, dc, (n, 1), b, (1, n), T::one(), da, (k, 1));
}

/// `db[k×n] += aᵀ · dc[m×n]`
pub fn matmul_grad_b<T: Scalar>(a: &[T], dc: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(k, m, n, a, (1, k), dc, (n, 1), T::one(), db, (n, 1));
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (xr, yr) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - max).exp();
            sum += *y;
        }
        let inv = T::one() / sum;
        yr.iter_mut().for_each(|y| *y = *y * inv);
    }
    out
}

/// dx = y ⊙ (dy − ⟨dy, y⟩) per row.
pub fn softmax_rows_grad<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T], cols: usize) {
    for ((yr, dyr), dxr) in y
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let mut dot = T::zero();
        for (&a, &b) in yr.iter().zip(dyr) {
            dot += a * b;
        }
        for ((d, &a), &b) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d += a * (b - dot);
        }
    }
}

/// Normalized rows and per-row reciprocal standard deviations.
pub fn layer_norm_rows<T: Scalar>(x: &[T], cols: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / cols;
    let n = T::from_f64(cols as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for (xr, hr) in x.chunks_exact(cols).zip(xhat.chunks_exact_mut(cols)) {
        let mut mean = T::zero();
        for &v in xr {
            mean += v;
        }
        mean = mean / n;
        let mut var = T::zero();
        for &v in xr {
            let d = v - mean;
            var += d * d;
        }
        var = var / n;
        let r = T::one() / (var + eps).sqrt();
        for (h, &v) in hr.iter_mut().zip(xr) {
            *h = (v - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}
