//! Per-sensor decomposition of the fixed-gain Kalman filter.
//!
//! With `A - KCA = V Π V⁻¹`, the filter state equals `Σ_i F_i ζ_i` where each local
//! estimator `ζ_i` only consumes sensor i:
//! `ζ_i(k+1) = Π ζ_i(k) + 1 y_i(k+1) + (G_i - 1 C_i) B u(k)`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kalman::KalmanSteady;
use crate::linalg::{self, CMatrix, CVector, ONE, ZERO};
use crate::system::LtiSystem;
use crate::tolerance::ToleranceConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralData {
    /// Unit-norm eigenvectors as columns; the first nonzero entry of each is real positive.
    pub v: CMatrix,
    pub v_inv: CMatrix,
    /// Eigenvalues of `A - KCA`, by descending modulus then descending angle.
    pub pi: Vec<Complex64>,
}

impl SpectralData {
    pub fn n(&self) -> usize {
        self.pi.len()
    }

    pub fn pi_matrix(&self) -> CMatrix {
        CMatrix::from_diagonal(&CVector::from_vec(self.pi.clone()))
    }

    /// `Π` repeated m times on the diagonal.
    pub fn pi_tilde(&self, m: usize) -> CMatrix {
        let d: Vec<Complex64> = (0..m).flat_map(|_| self.pi.iter().copied()).collect();
        CMatrix::from_diagonal(&CVector::from_vec(d))
    }

    /// `‖V Π V⁻¹ - M‖ / ‖M‖` (infinity norm).
    pub fn reconstruction_residual(&self, m: &DMatrix<f64>) -> f64 {
        let rec = &self.v * self.pi_matrix() * &self.v_inv;
        let mc = linalg::to_complex(m);
        linalg::inf_norm(&(rec - &mc)) / linalg::inf_norm(&mc).max(f64::MIN_POSITIVE)
    }

    pub fn is_real(&self) -> bool {
        self.pi.iter().all(|p| p.im == 0.0)
    }
}

fn first_nonzero_phase(v: &mut CVector) {
    let norm = v.norm();
    if norm == 0.0 {
        return;
    }
    let lead = v.iter().copied().find(|x| x.norm() > 1e-10 * norm).unwrap_or(ONE);
    let scale = lead.conj() / lead.norm() / norm;
    for x in v.iter_mut() {
        *x *= scale;
    }
    if let Some(x) = v.iter_mut().find(|x| x.norm() > 1e-10) {
        x.im = 0.0;
    }
}

/// Eigendecomposition of `A - KCA` with deterministic ordering and normalization.
/// Real eigenvalues are stored with zero imaginary part and conjugate pairs are
/// paired exactly.
pub fn decompose(ks: &KalmanSteady, tols: &ToleranceConfig) -> Result<SpectralData> {
    let acl = &ks.closed_loop;
    let n = acl.nrows();
    let scale = linalg::max_abs_real(acl).max(f64::MIN_POSITIVE);
    let mut pis: Vec<Complex64> = linalg::eigenvalues(acl)
        .into_iter()
        .map(|p| if p.im.abs() <= 1e-12 * scale { Complex64::new(p.re, 0.0) } else { p })
        .collect();
    pis.sort_by(|a, b| {
        b.norm()
            .partial_cmp(&a.norm())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.arg().partial_cmp(&a.arg()).unwrap_or(std::cmp::Ordering::Equal))
    });
    // a conjugate pair has equal modulus, so the partner of a negative-angle entry is just before it
    for j in 1..n {
        if pis[j].im < 0.0 && (pis[j - 1] - pis[j].conj()).norm() <= 1e-9 * scale {
            pis[j] = pis[j - 1].conj();
        }
    }
    let acl_c = linalg::to_complex(acl);
    let mut v = CMatrix::zeros(n, n);
    for j in 0..n {
        let col = if j > 0 && pis[j].im < 0.0 && pis[j] == pis[j - 1].conj() {
            v.column(j - 1).map(|x| x.conj())
        } else {
            let shifted = &acl_c - CMatrix::identity(n, n) * pis[j];
            let mut c: CVector = linalg::null_space(&shifted, 1).column(0).into_owned();
            if pis[j].im == 0.0 {
                // real eigenvalue: rotate to a real vector
                first_nonzero_phase(&mut c);
                c = c.map(|x| Complex64::new(x.re, 0.0));
                c /= Complex64::new(c.norm(), 0.0);
            } else {
                first_nonzero_phase(&mut c);
            }
            c
        };
        v.set_column(j, &col);
    }
    let cond = linalg::condition_number(&v);
    if !(cond <= tols.max_cond_v) {
        return Err(Error::IllConditionedV(cond));
    }
    let v_inv = v.clone().try_inverse().ok_or(Error::IllConditionedV(f64::INFINITY))?;
    Ok(SpectralData { v, v_inv, pi: pis })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalBank {
    pub n: usize,
    pub m: usize,
    pub pi: Vec<Complex64>,
    /// Row j of `g[i]` is `C_i A (A - π_j I)⁻¹`.
    pub g: Vec<CMatrix>,
    /// `F_i = V diag(V⁻¹ K_i)`.
    pub f: Vec<CMatrix>,
    /// `G_i - 1 C_i`.
    pub gamma: Vec<CMatrix>,
    /// `(G_i - 1 C_i) B`.
    pub input_map: Vec<CMatrix>,
    pub q_tilde: CMatrix,
    /// Stationary covariance of the stacked local errors.
    pub w_tilde: CMatrix,
}

impl LocalBank {
    /// Stacked `G` (mn × n).
    pub fn g_stacked(&self) -> CMatrix {
        linalg::vstack(&self.g)
    }

    /// `[F_1 … F_m]` (n × mn).
    pub fn f_stacked(&self) -> CMatrix {
        let mut out = CMatrix::zeros(self.n, self.n * self.m);
        for (i, fi) in self.f.iter().enumerate() {
            out.view_mut((0, i * self.n), (self.n, self.n)).copy_from(fi);
        }
        out
    }

    fn pi_at(&self, a: usize) -> Complex64 {
        self.pi[a % self.n]
    }

    /// `‖W̃ - Π̃ W̃ Π̃' - Q̃‖ / ‖Q̃‖` (max-entry norm).
    pub fn lyapunov_residual(&self) -> f64 {
        let size = self.n * self.m;
        let mut worst = 0.0f64;
        for a in 0..size {
            for b in 0..size {
                let r = self.w_tilde[(a, b)] - self.pi_at(a) * self.w_tilde[(a, b)] * self.pi_at(b).conj() - self.q_tilde[(a, b)];
                worst = worst.max(r.norm());
            }
        }
        worst / linalg::max_abs(&self.q_tilde).max(f64::MIN_POSITIVE)
    }

    /// Largest relative residual of `G_i A - 1 C_i A - Π G_i` over sensors.
    pub fn shift_identity_residual(&self, sys: &LtiSystem) -> f64 {
        let a = linalg::to_complex(&sys.a);
        let ca = linalg::to_complex(&(&sys.c * &sys.a));
        let pi = CMatrix::from_diagonal(&CVector::from_vec(self.pi.clone()));
        let ones = CMatrix::from_element(self.n, 1, ONE);
        self.g
            .iter()
            .enumerate()
            .map(|(i, gi)| {
                let lhs = gi * &a - &ones * ca.rows(i, 1);
                let res = linalg::max_abs(&(lhs - &pi * gi));
                res / linalg::max_abs(gi).max(f64::MIN_POSITIVE)
            })
            .fold(0.0, f64::max)
    }

    /// Stacked local errors `ζ - G x`.
    pub fn epsilon(&self, est: &LocalEstimates, x: &DVector<f64>) -> CVector {
        let xc = linalg::to_complex_vec(x);
        let parts: Vec<CVector> = est.zeta.iter().zip(&self.g).map(|(z, g)| z - g * &xc).collect();
        linalg::vstack_vec(&parts)
    }

    /// `Σ F_i ζ_i`, which reproduces the fixed-gain filter state.
    pub fn fuse(&self, est: &LocalEstimates) -> CVector {
        let mut out = CVector::zeros(self.n);
        for (f, z) in self.f.iter().zip(&est.zeta) {
            out += f * z;
        }
        out
    }
}

/// Assemble the local-estimator bank.
pub fn build_bank(sys: &LtiSystem, ks: &KalmanSteady, spectral: &SpectralData, tols: &ToleranceConfig) -> Result<LocalBank> {
    let (n, m) = (sys.n(), sys.m());
    if spectral.n() != n || ks.k.shape() != (n, m) {
        return Err(Error::DimensionMismatch("spectral data does not match the system".into()));
    }
    if let Some(p) = spectral.pi.iter().find(|p| p.norm() >= 1.0) {
        return Err(Error::DistinctSpectrumViolated(format!("closed-loop eigenvalue {p} is not stable")));
    }
    let a = linalg::to_complex(&sys.a);
    let ca_t = linalg::to_complex(&(&sys.c * &sys.a)).transpose();
    let mut g = vec![CMatrix::zeros(n, n); m];
    for (j, &pj) in spectral.pi.iter().enumerate() {
        let shifted = &a - CMatrix::identity(n, n) * pj;
        let sv = linalg::singular_values(&shifted);
        if sv[n - 1] <= tols.rank_tol * sv[0] {
            return Err(Error::SingularShift(format!("{pj}")));
        }
        // rows C_i A (A - π I)⁻¹ for all sensors: solve (A - π I)ᵀ X = (C A)ᵀ
        let x = shifted
            .transpose()
            .lu()
            .solve(&ca_t)
            .ok_or_else(|| Error::SingularShift(format!("{pj}")))?;
        for (i, gi) in g.iter_mut().enumerate() {
            for c in 0..n {
                gi[(j, c)] = x[(c, i)];
            }
        }
    }

    let kc = linalg::to_complex(&ks.k);
    let f: Vec<CMatrix> = (0..m)
        .map(|i| {
            let d = &spectral.v_inv * kc.column(i);
            &spectral.v * CMatrix::from_diagonal(&d)
        })
        .collect();

    let ones = CMatrix::from_element(n, 1, ONE);
    let c = linalg::to_complex(&sys.c);
    let b = linalg::to_complex(&sys.b);
    let gamma: Vec<CMatrix> = g.iter().enumerate().map(|(i, gi)| gi - &ones * c.rows(i, 1)).collect();
    let input_map = gamma.iter().map(|gm| gm * &b).collect();

    let big_gamma = linalg::vstack(&gamma);
    let q = linalg::to_complex(&sys.q);
    let r = linalg::to_complex(&sys.r);
    let q_tilde = linalg::hermitian_part(
        &(&big_gamma * q * big_gamma.adjoint() + linalg::kron(&r, &CMatrix::from_element(n, n, ONE))),
    );
    let size = n * m;
    let mut w_tilde = CMatrix::from_element(size, size, ZERO);
    for a_ in 0..size {
        for b_ in 0..size {
            let denom = ONE - spectral.pi[a_ % n] * spectral.pi[b_ % n].conj();
            w_tilde[(a_, b_)] = q_tilde[(a_, b_)] / denom;
        }
    }
    Ok(LocalBank { n, m, pi: spectral.pi.clone(), g, f, gamma, input_map, q_tilde, w_tilde })
}

/// Local estimator states `ζ_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEstimates {
    pub zeta: Vec<CVector>,
    pub k: usize,
}

impl LocalEstimates {
    pub fn zeros(bank: &LocalBank) -> Self {
        Self { zeta: vec![CVector::zeros(bank.n); bank.m], k: 0 }
    }

    /// `ζ_i(0) = G_i x̂(0)`.
    pub fn from_state(bank: &LocalBank, x0: &DVector<f64>) -> Self {
        let xc = linalg::to_complex_vec(x0);
        Self { zeta: bank.g.iter().map(|g| g * &xc).collect(), k: 0 }
    }

    pub fn stacked(&self) -> CVector {
        linalg::vstack_vec(&self.zeta)
    }
}

/// One step of every local estimator.
pub fn bank_step(
    bank: &LocalBank,
    est: &LocalEstimates,
    u_prev: &DVector<f64>,
    y_next: &DVector<f64>,
) -> Result<LocalEstimates> {
    if y_next.len() != bank.m || est.zeta.len() != bank.m {
        return Err(Error::DimensionMismatch(format!(
            "bank step with {} measurements and {} local states for m = {}",
            y_next.len(),
            est.zeta.len(),
            bank.m
        )));
    }
    let d = bank.input_map.first().map_or(0, |b| b.ncols());
    if u_prev.len() != d {
        return Err(Error::DimensionMismatch(format!("input has length {}, expected {d}", u_prev.len())));
    }
    let uc = linalg::to_complex_vec(u_prev);
    let zeta = est
        .zeta
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let mut next = CVector::from_iterator(bank.n, z.iter().zip(&bank.pi).map(|(zj, pj)| pj * zj));
            next.add_scalar_mut(Complex64::new(y_next[i], 0.0));
            next + &bank.input_map[i] * &uc
        })
        .collect();
    Ok(LocalEstimates { zeta, k: est.k + 1 })
}

/// Monic characteristic polynomial of `a` by Faddeev–LeVerrier; `coef[i]` multiplies `x^i`.
pub fn char_poly(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut coef = vec![0.0; n + 1];
    coef[n] = 1.0;
    let mut mk = DMatrix::<f64>::zeros(n, n);
    for k in 1..=n {
        mk = a * &mk + DMatrix::identity(n, n) * coef[n - k + 1];
        coef[n - k] = -(a * &mk).trace() / k as f64;
    }
    coef
}

fn poly_eval(coef: &[f64], x: Complex64) -> Complex64 {
    coef.iter().rev().fold(ZERO, |acc, &c| acc * x + c)
}

/// Verify `G_i = D1 D2 D3 O_i A` from the characteristic polynomial of A, independent of
/// the eigen-solver used for the bank. Returns the largest relative residual.
pub fn check_g_structure(sys: &LtiSystem, bank: &LocalBank, tol: f64) -> Result<f64> {
    let n = sys.n();
    let coef = char_poly(&sys.a);
    let mut d1 = CMatrix::zeros(n, n);
    let mut d2 = CMatrix::zeros(n, n);
    for (j, &pj) in bank.pi.iter().enumerate() {
        d1[(j, j)] = -ONE / poly_eval(&coef, pj);
        for r in 0..n {
            d2[(j, r)] = pj.powu((n - 1 - r) as u32);
        }
    }
    let mut d3 = CMatrix::zeros(n, n);
    for r in 0..n {
        for c in 0..=r {
            d3[(r, c)] = Complex64::new(coef[n - r + c], 0.0);
        }
    }
    let lead = d1 * d2 * d3;
    let a_c = linalg::to_complex(&sys.a);
    let mut worst = 0.0f64;
    for (i, gi) in bank.g.iter().enumerate() {
        let oi = linalg::to_complex(&sys.observability_matrix(&[i]));
        let rebuilt = &lead * oi * &a_c;
        let res = linalg::max_abs(&(gi - rebuilt)) / linalg::max_abs(gi).max(f64::MIN_POSITIVE);
        if res > tol {
            return Err(Error::StructureMismatch { sensor: i, residual: res });
        }
        worst = worst.max(res);
    }
    Ok(worst)
}
