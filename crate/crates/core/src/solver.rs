//! ADMM for `min ½ zᵀ P z - qᵀ z + γ Σ_g ‖z_g‖₂` where the groups cover a subset of the
//! coordinates and the remaining coordinates are free.
//!
//! The quadratic block is solved through a Cholesky factor of `P + ρ D` (D selects the
//! penalized coordinates), refactored only when ρ changes. The result is polished on its
//! support: by feature-sign search when every group is a single coordinate, otherwise by
//! Newton's method on the optimality conditions of the nonzero groups.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmSettings {
    pub rho: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
    pub adaptive_rho: bool,
    pub polish: bool,
    /// Attempt the active-set polish every this many iterations and stop once it certifies
    /// optimality (0 disables the periodic attempts).
    pub polish_every: usize,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self { rho: 1.0, abs_tol: 1e-8, rel_tol: 1e-6, max_iter: 50_000, adaptive_rho: true, polish: true, polish_every: 100 }
    }
}

/// ADMM iterate, reusable as a warm start.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub z: DVector<f64>,
    /// Split copy of the penalized coordinates.
    pub t: DVector<f64>,
    /// Scaled dual.
    pub u: DVector<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoResult {
    pub z: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub polished: bool,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub state: AdmmState,
}

pub struct GroupLasso {
    p: DMatrix<f64>,
    groups: Vec<Vec<usize>>,
    /// Flattened group coordinates; row r of E selects `sel[r]`.
    sel: Vec<usize>,
    factor: Option<(f64, Cholesky<f64, Dyn>)>,
    /// Largest diagonal entry of P, used to seed ρ on cold starts.
    diag_scale: f64,
}

impl GroupLasso {
    pub fn new(p: DMatrix<f64>, groups: Vec<Vec<usize>>) -> Result<Self> {
        let dim = p.nrows();
        if p.ncols() != dim {
            return Err(Error::DimensionMismatch("quadratic term must be square".into()));
        }
        let sel: Vec<usize> = groups.iter().flatten().copied().collect();
        let mut seen = vec![false; dim];
        for &i in &sel {
            if i >= dim || seen[i] {
                return Err(Error::InvalidInput("groups must be disjoint coordinates".into()));
            }
            seen[i] = true;
        }
        let p = (&p + p.transpose()) * 0.5;
        let diag_scale = sel.iter().map(|&i| p[(i, i)].abs()).fold(0.0, f64::max);
        Ok(Self { p, groups, sel, factor: None, diag_scale })
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn quadratic(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    fn factor(&mut self, rho: f64) -> Result<&Cholesky<f64, Dyn>> {
        let stale = !matches!(&self.factor, Some((r, _)) if *r == rho);
        if stale {
            let mut k = self.p.clone();
            for &i in &self.sel {
                k[(i, i)] += rho;
            }
            let ch = Cholesky::new(k).ok_or(Error::SingularNormalEquations)?;
            self.factor = Some((rho, ch));
        }
        Ok(&self.factor.as_ref().expect("factor set above").1)
    }

    /// Objective `½ zᵀPz - qᵀz + γ Σ‖z_g‖`.
    pub fn objective(&self, z: &DVector<f64>, q: &DVector<f64>, gamma: f64) -> f64 {
        let quad = 0.5 * z.dot(&(&self.p * z)) - q.dot(z);
        let pen: f64 = self
            .groups
            .iter()
            .map(|g| g.iter().map(|&i| z[i] * z[i]).sum::<f64>().sqrt())
            .sum();
        quad + gamma * pen
    }

    /// Sum of the magnitudes of the objective's terms; the rounding error of
    /// [`Self::objective`] is proportional to this, not to the objective itself.
    fn objective_scale(&self, z: &DVector<f64>, q: &DVector<f64>, gamma: f64) -> f64 {
        let pen: f64 = self.sel.iter().map(|&i| z[i].abs()).sum();
        0.5 * z.dot(&(&self.p * z)).abs() + q.dot(z).abs() + gamma * pen
    }

    fn split_point(&self, st: &AdmmState) -> DVector<f64> {
        let mut z = st.z.clone();
        for (r, &i) in self.sel.iter().enumerate() {
            z[i] = st.t[r];
        }
        z
    }

    fn select(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.sel.len(), self.sel.iter().map(|&i| z[i]))
    }

    fn scatter(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for (r, &i) in self.sel.iter().enumerate() {
            out[i] = v[r];
        }
        out
    }

    /// Group soft-thresholding of the split variable (indices are positions in `sel`).
    fn shrink(&self, v: &DVector<f64>, thresh: f64) -> DVector<f64> {
        let mut out = v.clone();
        let mut r = 0;
        for g in &self.groups {
            let len = g.len();
            let norm = v.rows(r, len).norm();
            let scale = if norm > thresh { 1.0 - thresh / norm } else { 0.0 };
            for k in r..r + len {
                out[k] = v[k] * scale;
            }
            r += len;
        }
        out
    }

    pub fn cold_state(&self, rho: f64) -> AdmmState {
        AdmmState {
            z: DVector::zeros(self.dim()),
            t: DVector::zeros(self.sel.len()),
            u: DVector::zeros(self.sel.len()),
            rho,
        }
    }

    /// Solve for the given linear term. `warm` is reused when supplied.
    pub fn solve(
        &mut self,
        q: &DVector<f64>,
        gamma: f64,
        settings: &AdmmSettings,
        warm: Option<&AdmmState>,
    ) -> Result<LassoResult> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::InvalidGamma(gamma));
        }
        if q.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!("linear term has length {}, expected {}", q.len(), self.dim())));
        }
        let rho0 = if self.diag_scale > 0.0 { settings.rho.max(1e-3 * self.diag_scale) } else { settings.rho };
        // keep P + ρD comfortably positive definite when warm starts carry ρ across solves
        let (rho_lo, rho_hi) = (1e-6 * rho0, 1e6 * rho0);
        let mut st = match warm {
            Some(w) if w.z.len() == self.dim() => {
                let mut w = w.clone();
                let r = w.rho.clamp(rho_lo, rho_hi);
                w.u *= w.rho / r;
                w.rho = r;
                w
            }
            _ => self.cold_state(rho0),
        };
        let n_pen = self.sel.len();
        let n_all = self.dim();
        let can_polish = settings.polish;
        let mut iterations = 0;
        let mut converged = false;
        let mut polished_z = None;
        let mut r_norm = f64::INFINITY;
        let mut s_norm = f64::INFINITY;
        while iterations < settings.max_iter {
            iterations += 1;
            let rho = st.rho;
            let rhs = q + self.scatter(&((&st.t - &st.u) * rho));
            let z = self.factor(rho)?.solve(&rhs);
            let ez = self.select(&z);
            let t_prev = st.t.clone();
            let t = self.shrink(&(&ez + &st.u), gamma / rho);
            let u = &st.u + &ez - &t;
            r_norm = (&ez - &t).norm();
            s_norm = rho * (&t - &t_prev).norm();
            let eps_pri = (n_pen as f64).sqrt() * settings.abs_tol + settings.rel_tol * ez.norm().max(t.norm());
            let eps_dual = (n_all as f64).sqrt() * settings.abs_tol + settings.rel_tol * rho * u.norm();
            st = AdmmState { z, t, u, rho };
            if r_norm <= eps_pri && s_norm <= eps_dual {
                converged = true;
                break;
            }
            if can_polish && settings.polish_every > 0 && iterations % settings.polish_every == 0 {
                if let Some(zp) = self.try_polish(q, gamma, &self.split_point(&st)) {
                    polished_z = Some(zp);
                    break;
                }
            }
            if settings.adaptive_rho && iterations % 5 == 0 {
                if r_norm > 10.0 * s_norm && st.rho * 2.0 <= rho_hi {
                    st.rho *= 2.0;
                    st.u /= 2.0;
                } else if s_norm > 10.0 * r_norm && st.rho / 2.0 >= rho_lo {
                    st.rho /= 2.0;
                    st.u *= 2.0;
                }
            }
        }
        // report the split copy as the penalized coordinates, so exact zeros survive
        let mut z = self.split_point(&st);
        if polished_z.is_none() && can_polish {
            polished_z = self.try_polish(q, gamma, &z);
        }
        let polished = polished_z.is_some();
        if let Some(zp) = polished_z {
            // the polished point satisfies the optimality conditions; sync the split state
            z = zp;
            st.t = self.select(&z);
            st.u = self.select(&(q - &self.p * &z)) / st.rho;
            st.z = z.clone();
        }
        if warm.is_some() && !converged && !polished {
            return self.solve(q, gamma, settings, None);
        }
        Ok(LassoResult {
            z,
            iterations,
            converged: converged || polished,
            polished,
            primal_residual: r_norm,
            dual_residual: s_norm,
            state: st,
        })
    }

    /// Polish from `z`, kept only if it does not worsen the objective beyond rounding; this
    /// rejects solutions of numerically singular active-set systems.
    fn try_polish(&self, q: &DVector<f64>, gamma: f64, z: &DVector<f64>) -> Option<DVector<f64>> {
        let zp = self.polish(q, gamma, z)?;
        let slack = 1e-10 * (1.0 + self.objective_scale(z, q, gamma));
        (self.objective(&zp, q, gamma) <= self.objective(z, q, gamma) + slack).then_some(zp)
    }

    fn polish(&self, q: &DVector<f64>, gamma: f64, z0: &DVector<f64>) -> Option<DVector<f64>> {
        if self.groups.iter().all(|g| g.len() == 1) {
            self.feature_sign(q, gamma, z0)
        } else {
            self.group_newton(q, gamma, z0)
        }
    }

    /// Newton's method on `P z - q + γ z_g/‖z_g‖ = 0` over the free coordinates and the
    /// groups that are nonzero in `z0`, with the other groups held at zero. Succeeds only if
    /// the support stays nonzero and the zero groups satisfy `‖(q - P z)_g‖ ≤ γ`.
    fn group_newton(&self, q: &DVector<f64>, gamma: f64, z0: &DVector<f64>) -> Option<DVector<f64>> {
        let dim = self.dim();
        let scale = z0.amax().max(1e-300);
        let mut z = z0.clone();
        let mut penal = vec![false; dim];
        let mut active: Vec<&Vec<usize>> = Vec::new();
        for g in &self.groups {
            for &i in g {
                penal[i] = true;
            }
            if g.iter().map(|&i| z[i] * z[i]).sum::<f64>().sqrt() > 1e-9 * scale {
                active.push(g);
            } else {
                for &i in g {
                    z[i] = 0.0;
                }
            }
        }
        let free: Vec<usize> = (0..dim).filter(|&i| !penal[i] || active.iter().any(|g| g.contains(&i))).collect();
        let k = free.len();
        let mut pos = vec![usize::MAX; dim];
        for (r, &i) in free.iter().enumerate() {
            pos[i] = r;
        }
        let p_ff = DMatrix::from_fn(k, k, |r, c| self.p[(free[r], free[c])]);
        let residual = |z: &DVector<f64>| {
            let mut r = DVector::from_fn(k, |r, _| self.p.row(free[r]).dot(&z.transpose()) - q[free[r]]);
            for g in &active {
                let norm = g.iter().map(|&i| z[i] * z[i]).sum::<f64>().sqrt();
                for &i in g.iter() {
                    r[pos[i]] += gamma * z[i] / norm;
                }
            }
            r
        };
        let tol = 1e-13 * (1.0 + self.objective_scale(z0, q, gamma));
        let mut res = residual(&z);
        for _ in 0..50 {
            if res.amax() <= tol {
                break;
            }
            let mut jac = p_ff.clone();
            for g in &active {
                let norm = g.iter().map(|&i| z[i] * z[i]).sum::<f64>().sqrt();
                for &a in g.iter() {
                    for &b in g.iter() {
                        let delta = if a == b { 1.0 } else { 0.0 };
                        jac[(pos[a], pos[b])] += gamma / norm * (delta - z[a] * z[b] / (norm * norm));
                    }
                }
            }
            let step = Cholesky::new(jac)?.solve(&res);
            // damp so that no active group is driven through the origin
            let mut t = 1.0f64;
            for g in &active {
                let norm = g.iter().map(|&i| z[i] * z[i]).sum::<f64>().sqrt();
                let dn = g.iter().map(|&i| step[pos[i]] * step[pos[i]]).sum::<f64>().sqrt();
                if dn > 0.5 * norm {
                    t = t.min(0.5 * norm / dn);
                }
            }
            let mut accepted = false;
            for _ in 0..30 {
                let mut zn = z.clone();
                for (r, &i) in free.iter().enumerate() {
                    zn[i] -= t * step[r];
                }
                let rn = residual(&zn);
                if rn.norm() < res.norm() {
                    z = zn;
                    res = rn;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if !(res.amax() <= 1e3 * tol) || z.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let g = q - &self.p * &z;
        let zero_ok = self
            .groups
            .iter()
            .filter(|grp| !active.contains(grp))
            .all(|grp| grp.iter().map(|&i| g[i] * g[i]).sum::<f64>().sqrt() <= gamma * (1.0 + 1e-9) + 1e-12);
        zero_ok.then_some(z)
    }

    /// Active-set correction for single-coordinate groups (feature-sign search): solve the
    /// optimality conditions on the current support with fixed signs, then take the best point
    /// on the segment towards that solution, checking every zero crossing. The objective never
    /// increases, so the loop cannot cycle.
    fn feature_sign(&self, q: &DVector<f64>, gamma: f64, z0: &DVector<f64>) -> Option<DVector<f64>> {
        let dim = self.dim();
        let mut penal = vec![false; dim];
        for &i in &self.sel {
            penal[i] = true;
        }
        let scale = z0.amax().max(1e-300);
        let mut z = z0.clone();
        let mut sign = vec![0.0f64; dim];
        for &i in &self.sel {
            if z[i].abs() > 1e-9 * scale {
                sign[i] = z[i].signum();
            } else {
                z[i] = 0.0;
            }
        }
        let grad_tol = 1e-9 * (1.0 + gamma);
        let mut f_cur = self.objective(&z, q, gamma);
        for _ in 0..(10 * dim + 50) {
            let free: Vec<usize> = (0..dim).filter(|&i| !penal[i] || sign[i] != 0.0).collect();
            let k = free.len();
            let mut target = DVector::zeros(dim);
            if k > 0 {
                let a = DMatrix::from_fn(k, k, |r, c| self.p[(free[r], free[c])]);
                let b = DVector::from_fn(k, |r, _| q[free[r]] - gamma * sign[free[r]]);
                // a singular support leaves a flat direction that only the L1 term pins down
                let eig = a.clone().symmetric_eigenvalues();
                if eig.min() <= 1e-12 * eig.max().abs() {
                    return None;
                }
                let sol = match Cholesky::new(a.clone()) {
                    Some(ch) => ch.solve(&b),
                    None => a.lu().solve(&b)?,
                };
                if sol.iter().any(|v| !v.is_finite()) {
                    return None;
                }
                for (r, &i) in free.iter().enumerate() {
                    target[i] = sol[r];
                }
            }
            let consistent = self.sel.iter().all(|&i| sign[i] == 0.0 || target[i] * sign[i] > 0.0);
            if !consistent {
                // best point among the target and the zero crossings on the segment
                let d = &target - &z;
                let mut best = (self.objective(&target, q, gamma), target.clone(), usize::MAX);
                for &i in &self.sel {
                    if z[i] != 0.0 && z[i] * target[i] <= 0.0 {
                        let t = z[i] / (z[i] - target[i]);
                        let mut zt = &z + &d * t;
                        zt[i] = 0.0;
                        let f = self.objective(&zt, q, gamma);
                        if f < best.0 {
                            best = (f, zt, i);
                        }
                    }
                }
                let (f_new, z_new, _) = best;
                if f_new > f_cur + 1e-12 * (1.0 + self.objective_scale(&z, q, gamma)) {
                    return None;
                }
                z = z_new;
                f_cur = f_new;
                for &i in &self.sel {
                    sign[i] = if z[i] == 0.0 { 0.0 } else { z[i].signum() };
                }
                continue;
            }
            z = target;
            f_cur = self.objective(&z, q, gamma);
            let g = q - &self.p * &z;
            let worst = self
                .sel
                .iter()
                .copied()
                .filter(|&i| sign[i] == 0.0 && g[i].abs() > gamma + grad_tol)
                .max_by(|&x, &y| g[x].abs().partial_cmp(&g[y].abs()).unwrap_or(std::cmp::Ordering::Equal));
            match worst {
                Some(i) => sign[i] = g[i].signum(),
                None => return Some(z),
            }
        }
        None
    }
}
