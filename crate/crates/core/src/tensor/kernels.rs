//! Raw matrix kernels over row-major slices.
//!
//! These are the hot loops of the whole system; everything else is either a
//! thin wrapper or memory-bound. The NN kernel processes four rows of A per
//! sweep so each B row is loaded once per four C rows, with a contiguous axpy
//! inner loop. Accumulation order over the inner dimension is ascending and
//! independent of blocking, so results are bit-identical run to run.

use crate::scalar::Scalar;

/// C[m×n] = A[m×k] · B[k×n]
pub fn matmul<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    c.fill(F::zero());
    matmul_acc(m, k, n, a, b, c);
}

/// C[m×n] += A[m×k] · B[k×n]
pub fn matmul_acc<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let zero = F::zero();
    let mut i = 0;
    while i + 4 <= m {
        for p in 0..k {
            let (x0, x1, x2, x3) =
                (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            // Zero-filled inputs (masked modalities) skip whole sweeps.
            if x0 == zero && x1 == zero && x2 == zero && x3 == zero {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            let (c01, c23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
            let (c0, c1) = c01.split_at_mut(n);
            let (c2, c3) = c23.split_at_mut(n);
            for j in 0..n {
                let bv = b_row[j];
                c0[j] += x0 * bv;
                c1[j] += x1 * bv;
                c2[j] += x2 * bv;
                c3[j] += x3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == zero {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
        i += 1;
    }
}

/// C[m×n] = A[m×k] · B[n×k]ᵀ. B is transposed into scratch first; the NN
/// kernel is markedly faster than column-strided dot products.
pub fn matmul_nt<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    c.fill(F::zero());
    matmul_nt_acc(m, k, n, a, b, c);
}

/// C[m×n] += A[m×k] · B[n×k]ᵀ
pub fn matmul_nt_acc<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let mut bt = vec![F::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul_acc(m, k, n, a, &bt, c);
}

/// C[k×n] += A[m×k]ᵀ · B[m×n]
pub fn matmul_tn_acc<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let zero = F::zero();
    let mut i = 0;
    while i + 4 <= m {
        let b0 = &b[i * n..(i + 1) * n];
        let b1 = &b[(i + 1) * n..(i + 2) * n];
        let b2 = &b[(i + 2) * n..(i + 3) * n];
        let b3 = &b[(i + 3) * n..(i + 4) * n];
        for p in 0..k {
            let (x0, x1, x2, x3) =
                (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            if x0 == zero && x1 == zero && x2 == zero && x3 == zero {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += x0 * b0[j] + x1 * b1[j] + x2 * b2[j] + x3 * b3[j];
            }
        }
        i += 4;
    }
    while i < m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == zero {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
        i += 1;
    }
}

/// out += s · x
pub fn axpy<F: Scalar>(s: F, x: &[F], out: &mut [F]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o += s * v;
    }
}

pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut s = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}
