//! Dense symmetric linear algebra helpers over row-major `f64` slices.

use nalgebra::DMatrix;

use crate::tensor::gemm;

/// Eigenvalues of a symmetric `n x n` matrix, ascending.
pub fn sym_eigenvalues(n: usize, data: &[f64]) -> Vec<f64> {
    assert_eq!(data.len(), n * n);
    let m = DMatrix::from_row_slice(n, n, data);
    let mut ev: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Log-determinant of a symmetric positive semi-definite matrix after adding
/// `jitter` to the diagonal. The flag reports numerical rank deficiency of
/// the un-jittered matrix.
pub fn psd_logdet(n: usize, data: &[f64], jitter: f64) -> (f64, bool) {
    let ev = sym_eigenvalues(n, data);
    let max = ev.last().copied().unwrap_or(0.0).abs();
    let tol = max * n as f64 * 1e-12;
    let deficient = ev.first().is_none_or(|&l| l <= tol);
    let logdet = ev.iter().map(|&l| (l.max(0.0) + jitter).ln()).sum();
    (logdet, deficient)
}

/// Gram matrix of the rows of a row-major `rows x cols` matrix.
pub fn row_gram(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * rows];
    gemm(rows, cols, rows, data, false, data, true, &mut out, 0.0);
    out
}

/// Nuclear norm (sum of singular values) via the smaller Gram matrix.
pub fn nuclear_norm(rows: usize, cols: usize, data: &[f64]) -> f64 {
    assert_eq!(data.len(), rows * cols);
    let (n, gram) = if rows <= cols {
        (rows, row_gram(rows, cols, data))
    } else {
        let mut g = vec![0.0; cols * cols];
        gemm(cols, rows, cols, data, true, data, false, &mut g, 0.0);
        (cols, g)
    };
    sym_eigenvalues(n, &gram).iter().map(|&l| l.max(0.0).sqrt()).sum()
}

/// Pearson correlation matrix of the rows (`np.corrcoef` convention).
/// Rows with zero variance produce NaN entries.
pub fn row_corrcoef(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    let mut centered = data.to_vec();
    for r in centered.chunks_mut(cols) {
        let mean = r.iter().sum::<f64>() / cols as f64;
        r.iter_mut().for_each(|v| *v -= mean);
    }
    let mut c = row_gram(rows, cols, &centered);
    let diag: Vec<f64> = (0..rows).map(|i| c[i * rows + i].sqrt()).collect();
    for i in 0..rows {
        for j in 0..rows {
            c[i * rows + j] /= diag[i] * diag[j];
        }
    }
    c
}
