//! Matrix kernels behind the differentiable ops.
//!
//! All kernels accumulate into `out` (callers zero the buffer when they need
//! a plain product) and compute every output element in a fixed order, so
//! results are bitwise reproducible regardless of thread count.

use super::tensor::Real;
use rayon::prelude::*;

/// Rows below this stay serial; above it, rows are farmed out to rayon.
const PAR_ROWS: usize = 64;

/// out[M,N] += a[M,K] @ b[K,N]
pub fn mm<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let row = |out_row: &mut [T], a_row: &[T]| {
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m >= PAR_ROWS {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(o, ar)| row(o, ar));
    } else {
        for (o, ar) in out.chunks_mut(n).zip(a.chunks(k)) {
            row(o, ar);
        }
    }
}

/// out[M,N] += a[M,K] @ b[N,K]^T
pub fn mm_nt<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(b.len(), n * k);
    // Transposing b once turns the dot-product loop into the vector-friendly
    // ikj form used by `mm`.
    let mut bt = vec![T::zero(); k * n];
    for i in 0..n {
        for j in 0..k {
            bt[j * n + i] = b[i * k + j];
        }
    }
    mm(out, a, &bt, m, k, n);
}

/// out[K,N] += a[M,K]^T @ b[M,N]
pub fn mm_tn<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Fixed-order lane-accumulated dot product: deterministic and vectorizable.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        for l in 0..LANES {
            acc[l] += a[base + l] * b[base + l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let mut s = tail;
    for l in 0..LANES {
        s += acc[l];
    }
    s
}

pub fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod bench {
    use super::*;

    // run manually: cargo test -p radwb-core matmul_throughput -- --ignored --nocapture
    #[test]
    #[ignore]
    fn matmul_throughput() {
        let (m, k, n) = (1024usize, 256usize, 256usize);
        let a = vec![1.0f32; m * k];
        let b = vec![0.5f32; k * n];
        let mut out = vec![0.0f32; m * n];
        let reps = 40;
        let start = std::time::Instant::now();
        for _ in 0..reps {
            out.iter_mut().for_each(|v| *v = 0.0);
            mm(&mut out, &a, &b, m, k, n);
        }
        let secs = start.elapsed().as_secs_f64();
        let gflops = (2.0 * (m * k * n * reps) as f64) / secs / 1e9;
        println!("mm {m}x{k}x{n}: {gflops:.2} GFlop/s over {reps} reps ({secs:.3}s)");
    }
}
