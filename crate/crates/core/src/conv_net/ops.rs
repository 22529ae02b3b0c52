//! Dense kernels: GEMM wrappers, patch gather/scatter, rectifier.

use super::patch::{PatchTable, PATCH};
use crate::mesh::EdgeFeatureMatrix;

/// `C = alpha * op(A) op(B) + beta * C` for row-major buffers, with
/// transposition expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c.iter_mut() {
            *x *= beta;
        }
        return;
    }
    // SAFETY: the buffers hold m*k, k*n and m*n elements for the given
    // strides, which every caller checks through the slice lengths below.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `A (m x k) * B (k x n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (n, 1), 0.0, &mut c);
    c
}

/// `C += Aᵀ (k x m) * B (m x n)` where `A` is stored `m x k`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    gemm(k, m, n, a, (1, k), b, (n, 1), 1.0, c);
}

/// `A (m x n) * Bᵀ` where `B` is stored `k x n`; result `m x k`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    gemm(m, n, k, a, (n, 1), b, (1, n), 0.0, &mut c);
    c
}

/// Neighbor features laid out `m x (13 k)`, slot-major within a row.
pub fn gather(patches: &PatchTable, f: &EdgeFeatureMatrix) -> Vec<f64> {
    let k = f.cols;
    let mut out = vec![0.0; f.rows * PATCH * k];
    for (e, row) in patches.rows.iter().enumerate() {
        let dst = &mut out[e * PATCH * k..(e + 1) * PATCH * k];
        for (s, &n) in row.iter().enumerate() {
            dst[s * k..(s + 1) * k].copy_from_slice(f.row(n));
        }
    }
    out
}

/// Adjoint of [`gather`].
pub fn scatter(patches: &PatchTable, g: &[f64], k: usize) -> EdgeFeatureMatrix {
    let m = patches.rows.len();
    let mut out = EdgeFeatureMatrix::zeros(m, k);
    for (e, row) in patches.rows.iter().enumerate() {
        let src = &g[e * PATCH * k..(e + 1) * PATCH * k];
        for (s, &n) in row.iter().enumerate() {
            for (d, x) in out.row_mut(n).iter_mut().zip(&src[s * k..(s + 1) * k]) {
                *d += x;
            }
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Gradient through the rectifier given its input.
pub fn relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn column_sums_acc(x: &[f64], cols: usize, out: &mut [f64]) {
    for row in x.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// `[a | b]` row by row.
pub fn concat(a: &EdgeFeatureMatrix, b: &EdgeFeatureMatrix) -> EdgeFeatureMatrix {
    assert_eq!(a.rows, b.rows);
    let cols = a.cols + b.cols;
    let mut data = Vec::with_capacity(a.rows * cols);
    for r in 0..a.rows {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    EdgeFeatureMatrix::from_vec(a.rows, cols, data)
}

/// Splits a gradient of `[a | b]` into its two column blocks.
pub fn split(g: &EdgeFeatureMatrix, left: usize) -> (EdgeFeatureMatrix, EdgeFeatureMatrix) {
    let right = g.cols - left;
    let mut a = Vec::with_capacity(g.rows * left);
    let mut b = Vec::with_capacity(g.rows * right);
    for r in 0..g.rows {
        let row = g.row(r);
        a.extend_from_slice(&row[..left]);
        b.extend_from_slice(&row[left..]);
    }
    (
        EdgeFeatureMatrix::from_vec(g.rows, left, a),
        EdgeFeatureMatrix::from_vec(g.rows, right, b),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_match_naive_loops() {
        let (m, k, n) = (4, 3, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let c = matmul(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // Aᵀ C with A m x k and C m x n.
        let mut tn = vec![0.0; k * n];
        matmul_tn_acc(&a, &c, m, k, n, &mut tn);
        for i in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|t| a[t * k + i] * c[t * n + j]).sum();
                assert!((tn[i * n + j] - want).abs() < 1e-12);
            }
        }
        // C Bᵀ with C m x n and B k x n.
        let nt = matmul_nt(&c, &b, m, n, k);
        for i in 0..m {
            for j in 0..k {
                let want: f64 = (0..n).map(|t| c[i * n + t] * b[j * n + t]).sum();
                assert!((nt[i * k + j] - want).abs() < 1e-12);
            }
        }
    }
}
