//! Row-major dense matrix products.
//!
//! All routines accumulate into `c` (`c += ...`); callers zero it first when a
//! plain product is wanted. The inner loops run over contiguous rows so they
//! vectorize without any unsafe code.

use alloc::vec;

use crate::real::Real;

/// `c[m×p] += a[m×k] · b[k×p]`
pub fn gemm_nn<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(c.len(), m * p);
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(p)) {
        for (&a_ik, b_row) in a_row.iter().zip(b.chunks_exact(p)) {
            if a_ik == R::zero() {
                continue;
            }
            for (c_ij, &b_kj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ik * b_kj;
            }
        }
    }
}

/// `c[k×p] += aᵀ · b` for `a[m×k]`, `b[m×p]`
pub fn gemm_tn<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * p);
    debug_assert_eq!(c.len(), k * p);
    for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(p)) {
        for (&a_ri, c_row) in a_row.iter().zip(c.chunks_exact_mut(p)) {
            if a_ri == R::zero() {
                continue;
            }
            for (c_ij, &b_rj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ri * b_rj;
            }
        }
    }
}

/// `c[m×p] += a · bᵀ` for `a[m×k]`, `b[p×k]`
pub fn gemm_nt<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, p: usize) {
    debug_assert_eq!(b.len(), p * k);
    let mut bt = vec![R::zero(); k * p];
    transpose(b, &mut bt, p, k);
    gemm_nn(a, &bt, c, m, k, p);
}

/// Writes the transpose of `src[rows×cols]` into `dst[cols×rows]`.
pub fn transpose<R: Copy>(src: &[R], dst: &mut [R], rows: usize, cols: usize) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for (r, row) in src.chunks_exact(cols).enumerate() {
        for (c, &x) in row.iter().enumerate() {
            dst[c * rows + r] = x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                for l in 0..k {
                    c[i * p + j] += a[i * k + l] * b[l * p + j];
                }
            }
        }
        c
    }

    #[test]
    fn transposed_variants_agree_with_naive() {
        let (m, k, p) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * p).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, p);

        let mut c = vec![0.0; m * p];
        gemm_nn(&a, &b, &mut c, m, k, p);
        assert_eq!(c, want);

        let mut at = vec![0.0; m * k];
        transpose(&a, &mut at, m, k);
        let mut c = vec![0.0; m * p];
        gemm_tn(&at, &b, &mut c, k, m, p);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-14);
        }

        let mut bt = vec![0.0; k * p];
        transpose(&b, &mut bt, k, p);
        let mut c = vec![0.0; m * p];
        gemm_nt(&a, &bt, &mut c, m, k, p);
        assert_eq!(c, want);
    }
}
