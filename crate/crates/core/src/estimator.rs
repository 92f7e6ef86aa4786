//! Fused estimators on top of the local bank: least squares, the secure L1-regularized
//! estimator, the baseline estimator, and the recovery and bound diagnostics.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::canonical::CanonicalData;
use crate::decomposition::{LocalBank, LocalEstimates};
use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, CVector};
use crate::solver::{AdmmSettings, AdmmState, GroupLasso};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub gamma: f64,
    pub rho: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
    pub polish: bool,
    /// Target for the largest KKT residual; a solve that stops above it is refined
    /// from its own warm start with tighter ADMM tolerances. Zero disables refinement.
    pub kkt_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { gamma: 10.0, rho: 1.0, abs_tol: 1e-8, rel_tol: 1e-6, max_iter: 50_000, polish: true, kkt_tol: 1e-7 }
    }
}

impl SolverConfig {
    pub fn with_gamma(gamma: f64) -> Self {
        Self { gamma, ..Self::default() }
    }

    fn admm(&self) -> AdmmSettings {
        AdmmSettings {
            rho: self.rho,
            abs_tol: self.abs_tol,
            rel_tol: self.rel_tol,
            max_iter: self.max_iter,
            adaptive_rho: true,
            polish: self.polish,
            polish_every: 100,
        }
    }
}

/// Least squares `min ½ (d - A_x x - A_ν ν)ᴴ W (d - A_x x - A_ν ν)` (with zero-padded data)
/// plus `γ ‖ν‖₁`, over real x and complex (or real) ν, in a real embedding.
pub struct QuadL1Problem {
    n: usize,
    n_nu: usize,
    real: bool,
    lasso: GroupLasso,
    /// Maps the (embedded) data to the linear term.
    q_map: DMatrix<f64>,
    data_len: usize,
    warm: Option<AdmmState>,
}

impl QuadL1Problem {
    /// `ax`: rows × n, `anu`: rows × n_nu, `w`: rows × rows, data fills the first `data_len` rows.
    pub fn new(ax: &CMatrix, anu: &CMatrix, w: &CMatrix, data_len: usize) -> Result<Self> {
        let rows = ax.nrows();
        if anu.nrows() != rows || w.shape() != (rows, rows) || data_len > rows {
            return Err(Error::DimensionMismatch("inconsistent problem blocks".into()));
        }
        let n = ax.ncols();
        let n_nu = anu.ncols();
        let real = linalg::max_imag(ax) == 0.0 && linalg::max_imag(anu) == 0.0 && linalg::max_imag(w) == 0.0;
        let (a_r, w_r, data_cols): (DMatrix<f64>, DMatrix<f64>, Vec<usize>) = if real {
            let mut a = DMatrix::zeros(rows, n + n_nu);
            a.columns_mut(0, n).copy_from(&linalg::real_part(ax));
            a.columns_mut(n, n_nu).copy_from(&linalg::real_part(anu));
            (a, linalg::real_part(w), (0..data_len).collect())
        } else {
            let mut a = DMatrix::zeros(2 * rows, n + 2 * n_nu);
            a.view_mut((0, 0), (rows, n)).copy_from(&linalg::real_part(ax));
            a.view_mut((rows, 0), (rows, n)).copy_from(&ax.map(|v| v.im));
            a.view_mut((0, n), (2 * rows, 2 * n_nu)).copy_from(&linalg::real_embed(anu));
            let cols = (0..data_len).chain(rows..rows + data_len).collect();
            (a, linalg::real_embed(w), cols)
        };
        let at_w = a_r.transpose() * &w_r;
        let p = &at_w * &a_r;
        let mut q_map = DMatrix::zeros(at_w.nrows(), data_cols.len());
        for (c, &src) in data_cols.iter().enumerate() {
            q_map.set_column(c, &at_w.column(src));
        }
        let groups: Vec<Vec<usize>> = if real {
            (0..n_nu).map(|g| vec![n + g]).collect()
        } else {
            (0..n_nu).map(|g| vec![n + g, n + n_nu + g]).collect()
        };
        let lasso = GroupLasso::new(p, groups)?;
        Ok(Self { n, n_nu, real, lasso, q_map, data_len, warm: None })
    }

    pub fn is_real(&self) -> bool {
        self.real
    }

    pub fn reset_warm_start(&mut self) {
        self.warm = None;
    }

    fn embed_data(&self, data: &CVector) -> DVector<f64> {
        if self.real {
            DVector::from_iterator(self.data_len, data.iter().map(|v| v.re))
        } else {
            DVector::from_iterator(2 * self.data_len, data.iter().map(|v| v.re).chain(data.iter().map(|v| v.im)))
        }
    }

    /// Solve for `(x, ν)`; warm-started from the previous call.
    pub fn solve(&mut self, data: &CVector, cfg: &SolverConfig) -> Result<(DVector<f64>, CVector, usize, bool, bool)> {
        if data.len() != self.data_len {
            return Err(Error::DimensionMismatch(format!("data has length {}, expected {}", data.len(), self.data_len)));
        }
        if self.real && data.iter().any(|v| v.im != 0.0) {
            return Err(Error::InvalidInput("complex data for a real problem".into()));
        }
        let q = &self.q_map * self.embed_data(data);
        let res = self.lasso.solve(&q, cfg.gamma, &cfg.admm(), self.warm.as_ref())?;
        self.warm = Some(res.state.clone());
        let x = res.z.rows(0, self.n).into_owned();
        let nu = if self.real {
            CVector::from_iterator(self.n_nu, res.z.rows(self.n, self.n_nu).iter().map(|v| Complex64::new(*v, 0.0)))
        } else {
            CVector::from_iterator(
                self.n_nu,
                (0..self.n_nu).map(|g| Complex64::new(res.z[self.n + g], res.z[self.n + self.n_nu + g])),
            )
        };
        Ok((x, nu, res.iterations, res.converged, res.polished))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktResiduals {
    /// `(M̃⁻¹ + N'N)μ + N'NHx̃ - λ` (∞-norm).
    pub kkt1: f64,
    /// Real part of `H'N'Nμ + H'N'NHx̃ - H'λ`, relative to its terms.
    pub kkt2: f64,
    /// Distance of λ to `γ ∂‖ν‖₁`, relative to `1 + γ`.
    pub kkt3: f64,
    /// `Y - Hx̃ - μ - ν` (∞-norm, relative to `1 + ‖Y‖∞`).
    pub kkt4: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.kkt1.max(self.kkt2).max(self.kkt3).max(self.kkt4)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecureSolve {
    pub x_tilde: DVector<f64>,
    pub mu: CVector,
    pub nu: CVector,
    pub lambda: CVector,
    pub objective: f64,
    pub kkt: KktResiduals,
    pub iterations: usize,
    pub converged: bool,
    pub polished: bool,
}

const REFINE_ROUNDS: usize = 3;

/// Reusable solver for the secure problem of one canonical system.
pub struct SecureEstimator {
    problem: QuadL1Problem,
    hn: CMatrix,
}

impl SecureEstimator {
    pub fn new(canon: &CanonicalData) -> Result<Self> {
        let mn = canon.m * canon.n;
        let ms = canon.n_sel.nrows();
        let nh = &canon.n_sel * &canon.h_stacked;
        // residual [Y - Hx - ν; 0 + NHx] written as c - A z
        let ax = linalg::vstack(&[canon.h_stacked.clone(), -nh.clone()]);
        let anu = linalg::vstack(&[CMatrix::identity(mn, mn), CMatrix::zeros(ms, mn)]);
        let problem = QuadL1Problem::new(&ax, &anu, &canon.w_script, mn)?;
        Ok(Self { problem, hn: nh })
    }

    pub fn reset(&mut self) {
        self.problem.reset_warm_start();
    }

    pub fn solve(&mut self, canon: &CanonicalData, y: &CVector, cfg: &SolverConfig) -> Result<SecureSolve> {
        let (x, nu, iterations, converged, polished) = self.problem.solve(y, cfg)?;
        let mut best = finish_secure(canon, &self.hn, y, x, nu, cfg.gamma, iterations, converged, polished);
        let mut round = *cfg;
        for _ in 0..REFINE_ROUNDS {
            if best.kkt.max() <= cfg.kkt_tol || best.iterations >= cfg.max_iter {
                break;
            }
            round.abs_tol = (round.abs_tol * 1e-2).max(1e-15);
            round.rel_tol = (round.rel_tol * 1e-2).max(1e-13);
            round.max_iter = cfg.max_iter - best.iterations;
            let (x, nu, it, conv, pol) = self.problem.solve(y, &round)?;
            // convergence at the caller's tolerances is not undone by a refinement that stalls
            let next = finish_secure(canon, &self.hn, y, x, nu, cfg.gamma, best.iterations + it, best.converged || conv, pol);
            if next.kkt.max() < best.kkt.max() {
                best = next;
            } else {
                best.iterations = next.iterations;
            }
        }
        Ok(best)
    }
}

fn l1(v: &CVector) -> f64 {
    v.iter().map(|x| x.norm()).sum()
}

fn subgradient_distance(lambda: &CVector, nu: &CVector, gamma: f64) -> f64 {
    let scale = nu.iter().fold(0.0f64, |a, v| a.max(v.norm())).max(1e-300);
    lambda
        .iter()
        .zip(nu.iter())
        .map(|(l, v)| {
            if v.norm() > 1e-12 * scale && v.norm() > 0.0 {
                (l - v / v.norm() * gamma).norm()
            } else {
                (l.norm() - gamma).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

#[allow(clippy::too_many_arguments)]
fn finish_secure(
    canon: &CanonicalData,
    nh: &CMatrix,
    y: &CVector,
    x: DVector<f64>,
    nu: CVector,
    gamma: f64,
    iterations: usize,
    converged: bool,
    polished: bool,
) -> SecureSolve {
    let xc = linalg::to_complex_vec(&x);
    let hx = &canon.h_stacked * &xc;
    let mu = y - &hx - &nu;
    let n_t = canon.n_sel.adjoint();
    let nhx = nh * &xc;
    let lambda = (&canon.m_tilde_inv + &n_t * &canon.n_sel) * &mu + &n_t * &nhx;
    let h_t = canon.h_stacked.adjoint();

    let kkt1_vec = (&canon.m_tilde_inv + &n_t * &canon.n_sel) * &mu + &n_t * &nhx - &lambda;
    let t1 = &h_t * (&n_t * (&canon.n_sel * &mu));
    let t2 = &h_t * (&n_t * &nhx);
    let t3 = &h_t * &lambda;
    let kkt2_vec = &t1 + &t2 - &t3;
    let kkt2_scale = 1.0 + linalg::vec_inf_norm(&t1).max(linalg::vec_inf_norm(&t2)).max(linalg::vec_inf_norm(&t3));
    let kkt2 = kkt2_vec.iter().fold(0.0f64, |a, v| a.max(v.re.abs())) / kkt2_scale;
    let kkt4_vec = y - &hx - &mu - &nu;
    let kkt = KktResiduals {
        kkt1: linalg::vec_inf_norm(&kkt1_vec) / (1.0 + linalg::vec_inf_norm(&lambda)),
        kkt2,
        kkt3: subgradient_distance(&lambda, &nu, gamma) / (1.0 + gamma),
        kkt4: linalg::vec_inf_norm(&kkt4_vec) / (1.0 + linalg::vec_inf_norm(y)),
    };
    let s = linalg::vstack_vec(&[mu.clone(), nhx]);
    let objective = 0.5 * (s.adjoint() * &canon.w_script * &s)[(0, 0)].re + gamma * l1(&nu);
    SecureSolve { x_tilde: x, mu, nu, lambda, objective, kkt, iterations, converged, polished }
}

/// One-shot secure solve (no warm start).
pub fn solve_secure(canon: &CanonicalData, y: &CVector, cfg: &SolverConfig) -> Result<SecureSolve> {
    if !(cfg.gamma.is_finite() && cfg.gamma >= 0.0) {
        return Err(Error::InvalidGamma(cfg.gamma));
    }
    SecureEstimator::new(canon)?.solve(canon, y, cfg)
}

/// Objective of the secure problem at an arbitrary `(x, ν)`, with `μ = Y - Hx - ν`.
pub fn secure_objective(canon: &CanonicalData, y: &CVector, x: &DVector<f64>, nu: &CVector, gamma: f64) -> f64 {
    let xc = linalg::to_complex_vec(x);
    let mu = y - &canon.h_stacked * &xc - nu;
    let nhx = &canon.n_sel * &canon.h_stacked * &xc;
    let s = linalg::vstack_vec(&[mu, nhx]);
    0.5 * (s.adjoint() * &canon.w_script * &s)[(0, 0)].re + gamma * l1(nu)
}

/// Generalized least squares `min ½ (d - A x)ᴴ M⁻¹ (d - A x)` over real x, through the
/// Cholesky factor of M (whitening), then a real least-squares solve.
pub fn weighted_least_squares(a: &CMatrix, m: &CMatrix, d: &CVector) -> Result<DVector<f64>> {
    let l = linalg::cholesky_lower(m)?;
    let la = l
        .solve_lower_triangular(a)
        .ok_or(Error::SingularNormalEquations)?;
    let ld = l
        .solve_lower_triangular(d)
        .ok_or(Error::SingularNormalEquations)?;
    let rows = la.nrows();
    let mut ar = DMatrix::zeros(2 * rows, a.ncols());
    ar.rows_mut(0, rows).copy_from(&linalg::real_part(&la));
    ar.rows_mut(rows, rows).copy_from(&la.map(|v| v.im));
    let dr = DVector::from_iterator(2 * rows, ld.iter().map(|v| v.re).chain(ld.iter().map(|v| v.im)));
    let svd = ar.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-14 * smax) {
        return Err(Error::SingularNormalEquations);
    }
    svd.solve(&dr, 0.0).map_err(|_| Error::SingularNormalEquations)
}

/// Least-squares fusion; returns `(x_ls, φ = Y - H x_ls)`.
pub fn solve_least_squares(canon: &CanonicalData, y: &CVector) -> Result<(DVector<f64>, CVector)> {
    if y.len() != canon.h_stacked.nrows() {
        return Err(Error::DimensionMismatch("Y does not match H".into()));
    }
    let x = weighted_least_squares(&canon.h_stacked, &canon.m_tilde, y)?;
    let phi = y - &canon.h_stacked * linalg::to_complex_vec(&x);
    Ok((x, phi))
}

/// Reusable solver for the baseline problem `½μ'W̃⁻¹μ + γ‖ν‖₁` s.t. `ζ = Gx + μ + ν`.
pub struct BaselineEstimator {
    problem: QuadL1Problem,
}

impl BaselineEstimator {
    pub fn new(bank: &LocalBank) -> Result<Self> {
        let g = bank.g_stacked();
        let w_inv = linalg::hermitian_inverse(&bank.w_tilde)?;
        let mn = g.nrows();
        let problem = QuadL1Problem::new(&g, &CMatrix::identity(mn, mn), &w_inv, mn)?;
        Ok(Self { problem })
    }

    pub fn solve(&mut self, zeta: &CVector, cfg: &SolverConfig) -> Result<(DVector<f64>, CVector)> {
        let (x, nu, _, _, _) = self.problem.solve(zeta, cfg)?;
        Ok((x, nu))
    }
}

/// One-shot baseline estimate from the stacked local states.
pub fn solve_baseline(bank: &LocalBank, zeta: &CVector, gamma: f64) -> Result<DVector<f64>> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::InvalidGamma(gamma));
    }
    Ok(BaselineEstimator::new(bank)?.solve(zeta, &SolverConfig::with_gamma(gamma))?.0)
}

/// `P̃ (I - G F) ε`: the least-squares residual expressed through the local errors.
pub fn phi_from_epsilon(canon: &CanonicalData, bank: &LocalBank, eps: &CVector) -> CVector {
    let g = bank.g_stacked();
    let f = bank.f_stacked();
    let inner = eps - &g * (&f * eps);
    &canon.p_tilde * inner
}

/// Precomputed maps for the recovery condition: `P̃(I - GF)`, `NH` and `𝒲`.
#[derive(Debug, Clone)]
pub struct RecoveryMap {
    phi_map: CMatrix,
    nh: CMatrix,
    w_script: CMatrix,
}

impl RecoveryMap {
    pub fn new(canon: &CanonicalData, bank: &LocalBank) -> Self {
        let g = bank.g_stacked();
        let f = bank.f_stacked();
        let mn = g.nrows();
        let phi_map = &canon.p_tilde * (CMatrix::identity(mn, mn) - g * f);
        Self { phi_map, nh: &canon.n_sel * &canon.h_stacked, w_script: canon.w_script.clone() }
    }

    /// `‖𝒲 [P̃(I - GF)ε; N H x̂]‖∞`.
    pub fn lhs(&self, eps: &CVector, x_hat: &DVector<f64>) -> f64 {
        let v = linalg::vstack_vec(&[&self.phi_map * eps, &self.nh * linalg::to_complex_vec(x_hat)]);
        linalg::vec_inf_norm(&(&self.w_script * v))
    }
}

/// `‖𝒲 [P̃(I - GF)ε; N H x̂]‖∞`.
pub fn recovery_lhs(canon: &CanonicalData, bank: &LocalBank, eps: &CVector, x_hat: &DVector<f64>) -> f64 {
    RecoveryMap::new(canon, bank).lhs(eps, x_hat)
}

/// Whether the secure estimate is guaranteed to reproduce the Kalman estimate.
pub fn check_recovery_condition(
    canon: &CanonicalData,
    bank: &LocalBank,
    eps: &CVector,
    x_hat: &DVector<f64>,
    gamma: f64,
) -> (bool, f64) {
    let lhs = recovery_lhs(canon, bank, eps, x_hat);
    (lhs <= gamma, lhs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub gamma_o: f64,
    pub bound: Vec<f64>,
    pub observed: Vec<f64>,
    pub norm_f_inf: f64,
    /// States (zero-based) where the observed difference exceeds the bound.
    pub violations: Vec<usize>,
    /// `‖[μ; x̃_s]‖∞` against `γ ‖𝓕‖∞`.
    pub stable_part: f64,
    pub stable_limit: f64,
}

/// Per-state bound on `|x̃_j - x̂ᵒ_j|` from oracle (attack-free) quantities.
pub fn evaluate_bound(
    canon: &CanonicalData,
    bank: &LocalBank,
    solve: &SecureSolve,
    zeta_o: &LocalEstimates,
    eps_o: &CVector,
    x_hat_o: &DVector<f64>,
    gamma: f64,
) -> BoundReport {
    evaluate_bound_with(canon, &RecoveryMap::new(canon, bank), solve, zeta_o, eps_o, x_hat_o, gamma)
}

/// [`evaluate_bound`] with a precomputed recovery map.
pub fn evaluate_bound_with(
    canon: &CanonicalData,
    map: &RecoveryMap,
    solve: &SecureSolve,
    zeta_o: &LocalEstimates,
    eps_o: &CVector,
    x_hat_o: &DVector<f64>,
    gamma: f64,
) -> BoundReport {
    let gamma_o = map.lhs(eps_o, x_hat_o);
    let f = canon.f_inf_norm;
    let eta: Vec<CVector> = canon.p.iter().zip(&zeta_o.zeta).map(|(p, z)| p * z).collect();
    let n = canon.n;
    let mut bound = Vec::with_capacity(n);
    let mut observed = Vec::with_capacity(n);
    let mut violations = Vec::new();
    for j in 0..n {
        let b = if canon.partition.is_unstable(j) {
            let set = &canon.e[j];
            let mut spread = 0.0f64;
            for &i1 in set {
                for &i2 in set {
                    spread = spread.max((eta[i1][j] - eta[i2][j]).norm());
                }
            }
            spread + (gamma + gamma_o) * f
        } else {
            gamma * f + x_hat_o[j].abs()
        };
        let o = (solve.x_tilde[j] - x_hat_o[j]).abs();
        // allow rounding in the comparison
        if o > b * (1.0 + 1e-9) + 1e-12 {
            violations.push(j);
        }
        bound.push(b);
        observed.push(o);
    }
    let xs = solve.x_tilde.rows(canon.partition.n_u, canon.partition.n_s);
    let stable_part = linalg::vec_inf_norm(&solve.mu).max(linalg::vec_inf_norm_real(&xs.into_owned()));
    BoundReport { gamma_o, bound, observed, norm_f_inf: f, violations, stable_part, stable_limit: gamma * f }
}

/// Distance of each unstable `x̃_j` from the median interval of `[ξ_i]_j` over `i ∈ E_j`,
/// with `ξ_i = η_{i,u} - μ_{i,u} - H_{us,i} x̃_s`. Real systems only; returns the largest
/// distance (zero when the property holds).
pub fn median_diagnostic(canon: &CanonicalData, y: &CVector, solve: &SecureSolve) -> f64 {
    let (n, nu, ns) = (canon.n, canon.partition.n_u, canon.partition.n_s);
    let xs = linalg::to_complex_vec(&solve.x_tilde.rows(nu, ns).into_owned());
    let mut worst = 0.0f64;
    for j in 0..nu {
        let mut vals: Vec<f64> = canon.e[j]
            .iter()
            .map(|&i| {
                let (_, hus, _) = canon.h_blocks(i);
                let xi = y.rows(i * n, nu) - solve.mu.rows(i * n, nu) - &hus * &xs;
                xi[j].re
            })
            .collect();
        if vals.is_empty() {
            continue;
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let l = vals.len();
        let (lo, hi) = if l % 2 == 1 { (vals[l / 2], vals[l / 2]) } else { (vals[l / 2 - 1], vals[l / 2]) };
        let x = solve.x_tilde[j];
        worst = worst.max((lo - x).max(x - hi).max(0.0));
    }
    worst
}
