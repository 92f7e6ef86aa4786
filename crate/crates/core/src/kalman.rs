//! Steady-state Kalman gain and the fixed-gain filter.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg;
use crate::system::LtiSystem;
use crate::tolerance::ToleranceConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanSteady {
    /// Steady error covariance.
    pub p: DMatrix<f64>,
    /// Steady prediction covariance `A P A' + Q`.
    pub p_plus: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// `A - K C A`.
    pub closed_loop: DMatrix<f64>,
    pub iterations: usize,
}

impl KalmanSteady {
    /// Relative residual of the fixed-point equation for P.
    pub fn riccati_residual(&self, sys: &LtiSystem) -> f64 {
        let pp = &self.p_plus;
        let s = &sys.c * pp * sys.c.transpose() + &sys.r;
        let s_inv = s.try_inverse().unwrap_or_else(|| DMatrix::zeros(sys.m(), sys.m()));
        let p = pp - pp * sys.c.transpose() * s_inv * &sys.c * pp;
        let pp_next = &sys.a * &p * sys.a.transpose() + &sys.q;
        let scale = linalg::inf_norm_real(pp).max(f64::MIN_POSITIVE);
        linalg::inf_norm_real(&(&p - &self.p)).max(linalg::inf_norm_real(&(pp_next - pp))) / scale
    }
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Riccati fixed-point iteration from `P(0|-1) = Σ` without the spectral checks.
pub fn solve_riccati(sys: &LtiSystem, tols: &ToleranceConfig) -> Result<KalmanSteady> {
    let (a, c, q, r) = (&sys.a, &sys.c, &sys.q, &sys.r);
    let mut p_plus = sys.sigma.clone();
    let mut change = f64::INFINITY;
    for it in 1..=tols.riccati_max_iter {
        let s = c * &p_plus * c.transpose() + r;
        let s_inv = nalgebra::Cholesky::new(sym(s))
            .ok_or_else(|| Error::NotPositiveDefinite("innovation covariance".into()))?
            .inverse();
        let k = &p_plus * c.transpose() * &s_inv;
        let p = sym(&p_plus - &k * c * &p_plus);
        let next = sym(a * &p * a.transpose() + q);
        change = linalg::inf_norm_real(&(&next - &p_plus));
        let done = change <= tols.riccati_tol * linalg::inf_norm_real(&next);
        p_plus = next;
        if done {
            let s = c * &p_plus * c.transpose() + r;
            let s_inv = nalgebra::Cholesky::new(sym(s))
                .ok_or_else(|| Error::NotPositiveDefinite("innovation covariance".into()))?
                .inverse();
            let k = &p_plus * c.transpose() * s_inv;
            let p = sym(&p_plus - &k * c * &p_plus);
            let closed_loop = a - &k * c * a;
            return Ok(KalmanSteady { p, p_plus, k, closed_loop, iterations: it });
        }
    }
    Err(Error::NoConvergence { iterations: tols.riccati_max_iter, change })
}

/// Steady-state gain with the distinct-eigenvalue checks on `A - KCA`.
pub fn solve_steady_kalman(sys: &LtiSystem, tols: &ToleranceConfig) -> Result<KalmanSteady> {
    let ks = solve_riccati(sys, tols)?;
    check_distinct_spectrum(sys, &ks, tols)?;
    Ok(ks)
}

/// `A - KCA` must be Schur stable with n distinct eigenvalues, none shared with A.
pub fn check_distinct_spectrum(sys: &LtiSystem, ks: &KalmanSteady, tols: &ToleranceConfig) -> Result<()> {
    let pis = linalg::eigenvalues(&ks.closed_loop);
    let lams = linalg::eigenvalues(&sys.a);
    let scale = pis.iter().fold(0.0f64, |acc, p| acc.max(p.norm()));
    let gap_tol = tols.eig_gap_rel * scale.max(f64::MIN_POSITIVE);
    let fmt = |z: &Complex64| format!("{:.6}{:+.6}i", z.re, z.im);
    if let Some(p) = pis.iter().find(|p| p.norm() >= 1.0) {
        return Err(Error::DistinctSpectrumViolated(format!("eigenvalue {} of A - KCA is not inside the unit circle", fmt(p))));
    }
    for i in 0..pis.len() {
        for j in (i + 1)..pis.len() {
            if (pis[i] - pis[j]).norm() <= gap_tol {
                return Err(Error::DistinctSpectrumViolated(format!(
                    "A - KCA has repeated eigenvalues {} and {}",
                    fmt(&pis[i]),
                    fmt(&pis[j])
                )));
            }
        }
        for lam in &lams {
            if (pis[i] - lam).norm() <= gap_tol {
                return Err(Error::DistinctSpectrumViolated(format!(
                    "eigenvalue {} of A - KCA is also an eigenvalue of A",
                    fmt(&pis[i])
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x_hat: DVector<f64>,
    pub k: usize,
}

impl FilterState {
    pub fn new(x_hat: DVector<f64>) -> Self {
        Self { x_hat, k: 0 }
    }
}

/// `x̂(k+1) = (I - KC)(A x̂(k) + B u(k)) + K y(k+1)`.
pub fn filter_step(
    ks: &KalmanSteady,
    sys: &LtiSystem,
    state: &FilterState,
    u_prev: &DVector<f64>,
    y_next: &DVector<f64>,
) -> Result<FilterState> {
    if state.x_hat.len() != sys.n() || u_prev.len() != sys.d() || y_next.len() != sys.m() {
        return Err(Error::DimensionMismatch(format!(
            "filter step with x̂ {}, u {}, y {} for (n, d, m) = ({}, {}, {})",
            state.x_hat.len(),
            u_prev.len(),
            y_next.len(),
            sys.n(),
            sys.d(),
            sys.m()
        )));
    }
    let pred = &sys.a * &state.x_hat + &sys.b * u_prev;
    let innov = y_next - &sys.c * &pred;
    Ok(FilterState { x_hat: pred + &ks.k * innov, k: state.k + 1 })
}
