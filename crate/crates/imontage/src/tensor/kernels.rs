//! Matrix-multiply kernels.
//!
//! `matmul_2d` walks i-k-j so the inner loop is a contiguous axpy over rows of
//! B, which the compiler vectorizes. For any fixed output element the partial
//! products still accumulate in ascending k order — exactly the order of the
//! textbook i-j-k loop — so the two kernels agree bitwise and either can serve
//! as the reference for the other.

use super::Scalar;

/// C[m,n] += A[m,k] * B[k,n], row-major, i-k-j order.
pub fn matmul_2d<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c = av.mul_add(bv, *c);
            }
        }
    }
}

/// Textbook i-j-k triple loop, kept as an independent oracle for `matmul_2d`.
pub fn matmul_2d_reference<S: Scalar>(
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [S],
) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = out[i * n + j];
            for p in 0..k {
                acc = a[i * k + p].mul_add(b[p * n + j], acc);
            }
            out[i * n + j] = acc;
        }
    }
}

/// out[n,m] = transpose of a[m,n].
pub fn transpose_2d<S: Scalar>(a: &[S], m: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}
