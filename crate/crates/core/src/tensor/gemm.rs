//! Row-major matrix products.
//!
//! Every output element accumulates its terms in ascending inner-index
//! order starting from the existing value of `c`, without fused
//! multiply-add. Vectorization only happens across output columns, so the
//! result is bit-identical to a textbook triple loop.

const COL_BLOCK: usize = 256;

/// `c[m×n] += a[m×k] · b[k×n]`.
pub fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for j0 in (0..n).step_by(COL_BLOCK) {
        let j1 = (j0 + COL_BLOCK).min(n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n + j0..i * n + j1];
            for (p, &aip) in arow.iter().enumerate() {
                let brow = &b[p * n + j0..p * n + j1];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
    }
}

/// Transpose of a row-major `rows×cols` matrix.
pub(crate) fn transpose2(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
