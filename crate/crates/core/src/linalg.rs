//! Small dense linear-algebra helpers on top of nalgebra.
//!
//! Everything here works on dynamically sized matrices; the problem sizes
//! (n, m ≤ a few dozen) make dense factorizations the right tool.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);

pub fn to_complex(m: &DMatrix<f64>) -> CMatrix {
    m.map(|v| Complex64::new(v, 0.0))
}

pub fn to_complex_vec(v: &DVector<f64>) -> CVector {
    v.map(|x| Complex64::new(x, 0.0))
}

pub fn real_part(m: &CMatrix) -> DMatrix<f64> {
    m.map(|v| v.re)
}

pub fn real_part_vec(v: &CVector) -> DVector<f64> {
    v.map(|x| x.re)
}

pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.norm()))
}

pub fn max_abs_real(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

pub fn max_imag(m: &CMatrix) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.im.abs()))
}

/// Induced infinity norm (maximum absolute row sum).
pub fn inf_norm(m: &CMatrix) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|v| v.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn inf_norm_real(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn vec_inf_norm(v: &CVector) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.norm()))
}

pub fn vec_inf_norm_real(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Singular values in descending order.
pub fn singular_values(m: &CMatrix) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s
}

pub fn singular_values_real(m: &DMatrix<f64>) -> Vec<f64> {
    singular_values(&to_complex(m))
}

/// Numerical rank with a threshold relative to the largest singular value.
pub fn rank(m: &CMatrix, rel_tol: f64) -> usize {
    let s = singular_values(m);
    match s.first() {
        None => 0,
        Some(&0.0) => 0,
        Some(&smax) => s.iter().filter(|&&v| v > rel_tol * smax).count(),
    }
}

pub fn rank_real(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    rank(&to_complex(m), rel_tol)
}

/// 2-norm condition number; infinite for singular input.
pub fn condition_number(m: &CMatrix) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Eigenvalues of a real square matrix (complex in general).
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex64> {
    m.clone().complex_eigenvalues().iter().copied().collect()
}

/// Orthonormal basis (as columns) of the null space of `m`, using the
/// `dim` smallest right singular vectors.
pub fn null_space(m: &CMatrix, dim: usize) -> CMatrix {
    let cols = m.ncols();
    if dim == 0 {
        return CMatrix::zeros(cols, 0);
    }
    // pad to at least square so the SVD yields a full set of right singular vectors
    let rows = m.nrows().max(cols);
    let mut padded = CMatrix::zeros(rows, cols);
    padded.view_mut((0, 0), (m.nrows(), cols)).copy_from(m);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[a]
            .partial_cmp(&svd.singular_values[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut basis = CMatrix::zeros(cols, dim);
    for (k, &idx) in order.iter().take(dim).enumerate() {
        for r in 0..cols {
            basis[(r, k)] = v_t[(idx, r)].conj();
        }
    }
    basis
}

/// Rescale so the entry of largest modulus is real and positive (ties go to the
/// first such entry), and the vector has unit 2-norm.
pub fn normalize_phase(v: &mut CVector) {
    let norm = v.norm();
    if norm == 0.0 {
        return;
    }
    let mut best = 0;
    let mut best_abs = -1.0;
    for (i, x) in v.iter().enumerate() {
        // prefer earlier entries unless clearly larger
        if x.norm() > best_abs * (1.0 + 1e-9) {
            best_abs = x.norm();
            best = i;
        }
    }
    let phase = v[best] / v[best].norm();
    let scale = phase.conj() / norm;
    for x in v.iter_mut() {
        *x *= scale;
    }
    v[best] = Complex64::new(v[best].re, 0.0);
}

/// Inverse of a Hermitian positive-definite matrix via Cholesky.
pub fn hermitian_inverse(m: &CMatrix) -> Result<CMatrix> {
    let sym = hermitian_part(m);
    let chol = nalgebra::Cholesky::new(sym)
        .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?;
    let inv = chol.inverse();
    Ok(hermitian_part(&inv))
}

pub fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()).map(|v| v * 0.5)
}

/// Smallest eigenvalue of a Hermitian matrix, computed through its real
/// symmetric embedding (the embedding duplicates every eigenvalue).
pub fn hermitian_min_eigenvalue(m: &CMatrix) -> f64 {
    let emb = real_embed(&hermitian_part(m));
    let emb = (&emb + emb.transpose()) * 0.5;
    emb.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn block_diag(blocks: &[CMatrix]) -> CMatrix {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = CMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn vstack(blocks: &[CMatrix]) -> CMatrix {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = CMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack column mismatch");
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(b);
        r += b.nrows();
    }
    out
}

pub fn vstack_vec(parts: &[CVector]) -> CVector {
    let len: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = CVector::zeros(len);
    let mut r = 0;
    for p in parts {
        out.rows_mut(r, p.len()).copy_from(p);
        r += p.len();
    }
    out
}

pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let mut out = CMatrix::zeros(a.nrows() * b.nrows(), a.ncols() * b.ncols());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let s = a[(i, j)];
            for k in 0..b.nrows() {
                for l in 0..b.ncols() {
                    out[(i * b.nrows() + k, j * b.ncols() + l)] = s * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Real representation `[[Re, -Im], [Im, Re]]` of a complex matrix.
pub fn real_embed(m: &CMatrix) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let mut out = DMatrix::zeros(2 * r, 2 * c);
    for i in 0..r {
        for j in 0..c {
            let v = m[(i, j)];
            out[(i, j)] = v.re;
            out[(i, j + c)] = -v.im;
            out[(i + r, j)] = v.im;
            out[(i + r, j + c)] = v.re;
        }
    }
    out
}

/// Minimum-norm least-squares solution of `m x = b` through the pseudo-inverse.
pub fn min_norm_solve(m: &CMatrix, b: &CVector, rel_tol: f64) -> CVector {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    svd.solve(b, rel_tol * smax.max(f64::MIN_POSITIVE))
        .expect("U and V were computed")
}

/// Orthogonal projector onto the row space of `m` (rank taken from `rel_tol`).
pub fn row_space_projector(m: &CMatrix, rel_tol: f64) -> CMatrix {
    let cols = m.ncols();
    let r = rank(m, rel_tol);
    if r == 0 {
        return CMatrix::zeros(cols, cols);
    }
    let rows = m.nrows().max(cols);
    let mut padded = CMatrix::zeros(rows, cols);
    padded.view_mut((0, 0), (m.nrows(), cols)).copy_from(m);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    // rows of v_t span the (conjugated) row space
    let mut basis = CMatrix::zeros(r, cols);
    for (k, &idx) in order.iter().take(r).enumerate() {
        basis.set_row(k, &v_t.row(idx));
    }
    basis.adjoint() * basis
}

/// Cholesky-based lower factor `L` with `m = L L^H`.
pub fn cholesky_lower(m: &CMatrix) -> Result<CMatrix> {
    let chol = nalgebra::Cholesky::new(hermitian_part(m))
        .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?;
    Ok(chol.l())
}

/// Real Cholesky factor of a symmetric PSD matrix; zero rows/cols are allowed
/// (the factor is taken on a jittered copy, then exact zero blocks are restored).
pub fn psd_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if max_abs_real(m) == 0.0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let sym = (m + m.transpose()) * 0.5;
    if let Some(ch) = nalgebra::Cholesky::new(sym.clone()) {
        return Ok(ch.l());
    }
    // semidefinite: fall back to the symmetric eigen-decomposition
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut out = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < -1e-9 * scale {
            return Err(Error::NotPositiveDefinite(format!(
                "matrix has negative eigenvalue {lam:e}"
            )));
        }
        let s = lam.max(0.0).sqrt();
        for i in 0..n {
            out[(i, j)] *= s;
        }
    }
    Ok(out)
}
