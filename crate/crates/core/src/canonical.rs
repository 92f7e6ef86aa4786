//! Design-phase analysis: coverage sets, sparse observability indices, the canonical
//! transforms `P_i` and the matrices of the fused estimation problem.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::decomposition::{LocalBank, LocalEstimates};
use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, CVector, ONE};
use crate::system::{LtiSystem, StatePartition};
use crate::tolerance::ToleranceConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageData {
    /// Observability matrix of (A, C_i) per sensor.
    pub o: Vec<DMatrix<f64>>,
    /// `e[j]`: zero-based sensors whose observability matrix has a nonzero column j.
    pub e: Vec<Vec<usize>>,
    pub m: usize,
}

impl CoverageData {
    /// Honest sensors observing state j.
    pub fn h(&self, j: usize, attacked: &[usize]) -> usize {
        self.e[j].iter().filter(|i| !attacked.contains(i)).count()
    }

    /// Compromised sensors observing state j.
    pub fn c(&self, j: usize, attacked: &[usize]) -> usize {
        self.e[j].iter().filter(|i| attacked.contains(i)).count()
    }

    /// States (zero-based) observed by sensor i.
    pub fn observed_by(&self, i: usize) -> Vec<usize> {
        (0..self.e.len()).filter(|&j| self.e[j].contains(&i)).collect()
    }
}

/// Coverage sets `E_j` from per-sensor observability matrices.
pub fn coverage(sys: &LtiSystem, tols: &ToleranceConfig) -> CoverageData {
    let (n, m) = (sys.n(), sys.m());
    let o: Vec<DMatrix<f64>> = (0..m).map(|i| sys.observability_matrix(&[i])).collect();
    let mut e = vec![Vec::new(); n];
    for (i, oi) in o.iter().enumerate() {
        let scale = oi.norm();
        for (j, ej) in e.iter_mut().enumerate() {
            if scale > 0.0 && oi.column(j).norm() > tols.col_tol * scale {
                ej.push(i);
            }
        }
    }
    CoverageData { o, e, m }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SparseIndices {
    pub obs_index: i64,
    pub det_index: i64,
    /// Largest p with the system 2p-sparse detectable.
    pub tolerable_p: i64,
}

/// Sparse observability and detectability indices from the coverage sets.
pub fn sparse_indices(cov: &CoverageData, partition: &StatePartition) -> SparseIndices {
    let card = |j: usize| cov.e[j].len() as i64;
    let obs_index = (0..cov.e.len()).map(card).min().map_or(-1, |v| v - 1);
    let det_index = if partition.n_u == 0 {
        cov.m as i64 - 1
    } else {
        (0..partition.n_u).map(card).min().map_or(-1, |v| v - 1)
    };
    SparseIndices { obs_index, det_index, tolerable_p: det_index.div_euclid(2) }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalData {
    pub n: usize,
    pub m: usize,
    pub partition: StatePartition,
    /// Per-sensor invertible transforms.
    pub p: Vec<CMatrix>,
    /// `H_i = P_i G_i`.
    pub h: Vec<CMatrix>,
    /// Stacked `H` (mn × n).
    pub h_stacked: CMatrix,
    /// `blockdiag(P_i)`.
    pub p_tilde: CMatrix,
    /// `I_m ⊗ [0 | I_{n_s}]`.
    pub n_sel: CMatrix,
    /// `[0 | I_{n_s}]`.
    pub l_sel: CMatrix,
    pub m_tilde: CMatrix,
    pub m_tilde_inv: CMatrix,
    /// Weight of the fused problem, size mn + m n_s.
    pub w_script: CMatrix,
    /// Sensitivity of `[μ; x̃_s]` to the multiplier, size (mn + n_s) × mn.
    pub f_script: CMatrix,
    pub f_inf_norm: f64,
    pub e: Vec<Vec<usize>>,
}

impl CanonicalData {
    /// Unstable block `H_i^U` (n × n_u).
    pub fn h_unstable(&self, i: usize) -> CMatrix {
        self.h[i].columns(0, self.partition.n_u).into_owned()
    }

    /// `H_{uu,i}`, `H_{us,i}`, `H_{ss,i}`.
    pub fn h_blocks(&self, i: usize) -> (CMatrix, CMatrix, CMatrix) {
        let (nu, ns) = (self.partition.n_u, self.partition.n_s);
        let hi = &self.h[i];
        (
            hi.view((0, 0), (nu, nu)).into_owned(),
            hi.view((0, nu), (nu, ns)).into_owned(),
            hi.view((nu, nu), (ns, ns)).into_owned(),
        )
    }

    /// `H_i^U` rounded to a 0/1 pattern.
    pub fn h_pattern(&self, i: usize) -> Vec<Vec<u8>> {
        let hu = self.h_unstable(i);
        (0..hu.nrows())
            .map(|r| (0..hu.ncols()).map(|c| u8::from((hu[(r, c)] - ONE).norm() < 0.5)).collect())
            .collect()
    }

    /// Largest deviation of `H_i^U` from its exact indicator pattern.
    pub fn pattern_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.m {
            let hu = self.h_unstable(i);
            for r in 0..hu.nrows() {
                for c in 0..hu.ncols() {
                    let target = if r == c && self.e[c].contains(&i) { ONE } else { linalg::ZERO };
                    worst = worst.max((hu[(r, c)] - target).norm());
                }
            }
        }
        worst
    }

    /// Frobenius distance between the projectors onto the row spaces of `G_i^U` and `H_i^U`.
    pub fn span_residual(&self, bank: &LocalBank, tols: &ToleranceConfig) -> f64 {
        let nu = self.partition.n_u;
        (0..self.m)
            .map(|i| {
                let gu = bank.g[i].columns(0, nu).into_owned();
                let hu = self.h_unstable(i);
                let pg = linalg::row_space_projector(&gu, tols.rank_tol);
                let ph = linalg::row_space_projector(&hu, tols.rank_tol);
                (pg - ph).norm()
            })
            .fold(0.0, f64::max)
    }

    pub fn is_real(&self) -> bool {
        linalg::max_imag(&self.h_stacked) == 0.0 && linalg::max_imag(&self.w_script) == 0.0
    }
}

/// Transform for one sensor: canonical rows for the unstable states it observes, the
/// remaining rows an orthonormal basis of the left null space of `G_i^U`.
fn build_p(gi: &CMatrix, observed_unstable: &[usize], n_u: usize, sensor: usize, tols: &ToleranceConfig) -> Result<CMatrix> {
    let n = gi.nrows();
    let gu = gi.columns(0, n_u).into_owned();
    let rank = if n_u == 0 { 0 } else { linalg::rank(&gu, tols.rank_tol) };
    if rank != observed_unstable.len() {
        return Err(Error::RankDeficient { sensor, rank, expected: observed_unstable.len() });
    }
    let gu_t = gu.transpose();
    let null = linalg::null_space(&gu_t, n - rank);
    let mut p = CMatrix::zeros(n, n);
    let mut next_null = 0;
    for j in 0..n {
        if observed_unstable.contains(&j) {
            let mut e = CVector::zeros(n_u);
            e[j] = ONE;
            let row = linalg::min_norm_solve(&gu_t, &e, tols.rank_tol);
            p.set_row(j, &row.transpose());
        } else {
            p.set_row(j, &null.column(next_null).transpose());
            next_null += 1;
        }
    }
    let cond = linalg::condition_number(&p);
    if !(cond < tols.max_cond_p) {
        return Err(Error::IllConditionedP { sensor, cond });
    }
    Ok(p)
}

/// Canonical transforms and the weight matrices of the fused problem.
pub fn build_canonical(
    partition: &StatePartition,
    bank: &LocalBank,
    cov: &CoverageData,
    tols: &ToleranceConfig,
) -> Result<CanonicalData> {
    let (n, m) = (bank.n, bank.m);
    let (n_u, n_s) = (partition.n_u, partition.n_s);
    if partition.n() != n || cov.m != m {
        return Err(Error::DimensionMismatch("partition or coverage does not match the bank".into()));
    }
    let mut p = Vec::with_capacity(m);
    let mut h = Vec::with_capacity(m);
    for i in 0..m {
        let observed: Vec<usize> = (0..n_u).filter(|&j| cov.e[j].contains(&i)).collect();
        let pi = build_p(&bank.g[i], &observed, n_u, i, tols)?;
        h.push(&pi * &bank.g[i]);
        p.push(pi);
    }
    let h_stacked = linalg::vstack(&h);
    let p_tilde = linalg::block_diag(&p);
    let m_tilde = linalg::hermitian_part(&(&p_tilde * &bank.w_tilde * p_tilde.adjoint()));
    let m_tilde_inv = linalg::hermitian_inverse(&m_tilde)?;

    let mut l_sel = CMatrix::zeros(n_s, n);
    for k in 0..n_s {
        l_sel[(k, n_u + k)] = ONE;
    }
    let n_sel = linalg::kron(&CMatrix::identity(m, m), &l_sel);
    let mn = m * n;
    let ms = m * n_s;
    let mut w_script = CMatrix::zeros(mn + ms, mn + ms);
    w_script
        .view_mut((0, 0), (mn, mn))
        .copy_from(&(&m_tilde_inv + n_sel.adjoint() * &n_sel));
    w_script.view_mut((0, mn), (mn, ms)).copy_from(&n_sel.adjoint());
    w_script.view_mut((mn, 0), (ms, mn)).copy_from(&n_sel);
    w_script.view_mut((mn, mn), (ms, ms)).copy_from(&CMatrix::identity(ms, ms));
    let w_script = linalg::hermitian_part(&w_script);
    let min_eig = linalg::hermitian_min_eigenvalue(&w_script);
    if !(min_eig > 0.0) {
        return Err(Error::NotPositiveDefinite(format!("weight matrix has eigenvalue {min_eig:e}")));
    }

    let lh = &l_sel * h_stacked.adjoint();
    let left = linalg::block_diag(&[CMatrix::identity(mn, mn), &lh * n_sel.adjoint()]);
    let right = linalg::block_diag(&[CMatrix::identity(mn, mn), &n_sel * &h_stacked * l_sel.adjoint()]);
    let core = left * &w_script * right;
    let rhs = linalg::vstack(&[CMatrix::identity(mn, mn), lh]);
    let f_script = core
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NotPositiveDefinite("KKT block matrix is singular".into()))?;
    let f_inf_norm = linalg::inf_norm(&f_script);

    Ok(CanonicalData {
        n,
        m,
        partition: *partition,
        p,
        h,
        h_stacked,
        p_tilde,
        n_sel,
        l_sel,
        m_tilde,
        m_tilde_inv,
        w_script,
        f_script,
        f_inf_norm,
        e: cov.e.clone(),
    })
}

/// `Y = [P_1 ζ_1; …; P_m ζ_m]`.
pub fn assemble_y(canon: &CanonicalData, est: &LocalEstimates) -> Result<CVector> {
    if est.zeta.len() != canon.m || est.zeta.iter().any(|z| z.len() != canon.n) {
        return Err(Error::DimensionMismatch("local estimates do not match the canonical data".into()));
    }
    let parts: Vec<CVector> = canon.p.iter().zip(&est.zeta).map(|(p, z)| p * z).collect();
    Ok(linalg::vstack_vec(&parts))
}
