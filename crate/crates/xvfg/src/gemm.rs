//! Row-major f64 matrix products on top of `matrixmultiply`.
//!
//! `XVFG_THREADS` caps worker threads (default 1). When more than one thread
//! is allowed, products are split across disjoint row bands of the output;
//! each output element is still produced by a single fixed-order accumulation,
//! so results are bit-identical across runs at a given thread count.

use std::sync::OnceLock;

/// Worker-thread cap from `XVFG_THREADS`; default 1 for bit determinism.
pub fn threads() -> usize {
    static CAP: OnceLock<usize> = OnceLock::new();
    *CAP.get_or_init(|| {
        std::env::var("XVFG_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
            .min(64)
    })
}

fn band_rows(m: usize) -> usize {
    let t = threads().min(m.max(1));
    m.div_ceil(t).max(1)
}

/// c[m x n] = a[m x k] * b[k x n] + beta * c, all row-major.
pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let rows = band_rows(m);
    if rows >= m {
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
        return;
    }
    std::thread::scope(|scope| {
        for (band, c_band) in c.chunks_mut(rows * n).enumerate() {
            let i0 = band * rows;
            let mb = c_band.len() / n;
            let a_band = &a[i0 * k..(i0 + mb) * k];
            scope.spawn(move || unsafe {
                matrixmultiply::dgemm(
                    mb, k, n, 1.0,
                    a_band.as_ptr(), k as isize, 1,
                    b.as_ptr(), n as isize, 1,
                    beta,
                    c_band.as_mut_ptr(), n as isize, 1,
                );
            });
        }
    });
}

/// c[m x n] = a[m x k] * b^T + beta * c, where b is [n x k] row-major.
pub fn matmul_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c[m x n] = a^T * b[k x n] + beta * c, where a is [k x m] row-major.
pub fn matmul_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let rows = band_rows(m);
    if rows >= m {
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0,
                a.as_ptr(), 1, m as isize,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
        return;
    }
    std::thread::scope(|scope| {
        for (band, c_band) in c.chunks_mut(rows * n).enumerate() {
            let i0 = band * rows;
            let mb = c_band.len() / n;
            let a_ptr = SendPtr(unsafe { a.as_ptr().add(i0) });
            scope.spawn(move || unsafe {
                matrixmultiply::dgemm(
                    mb, k, n, 1.0,
                    a_ptr.get(), 1, m as isize,
                    b.as_ptr(), n as isize, 1,
                    beta,
                    c_band.as_mut_ptr(), n as isize, 1,
                );
            });
        }
    });
}

struct SendPtr(*const f64);
unsafe impl Send for SendPtr {}

impl SendPtr {
    fn get(&self) -> *const f64 {
        self.0
    }
}
