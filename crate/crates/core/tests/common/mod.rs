#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secest::harness::{build_pipeline, Pipeline};
use secest::linalg::{CMatrix, CVector};
use secest::{LtiSystem, ToleranceConfig};

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random plant in real modal form, unstable modes first, with its eigenvalues.
#[derive(Debug, Clone)]
pub struct RandomPlant {
    pub system: LtiSystem,
    pub eigenvalues: Vec<Complex64>,
    pub n_u: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PlantShape {
    pub n_max: usize,
    pub m_max: usize,
    /// Probability that a C entry is zero.
    pub sparsity: f64,
    /// Allow 2×2 rotation blocks for complex pairs.
    pub complex: bool,
    /// Redraw C until `(A, C)` passes the PBH observability test.
    pub observable: bool,
}

fn distinct(vals: &[Complex64], z: Complex64) -> bool {
    vals.iter().all(|v| (v - z).norm() > 0.05)
}

/// Real modal blocks: a list of (size, eigenvalue) where size 2 means a conjugate pair.
fn draw_modes(rng: &mut TestRng, count: usize, unstable: bool, complex: bool, taken: &mut Vec<Complex64>) -> Vec<(usize, Complex64)> {
    let mut out = Vec::new();
    let mut left = count;
    while left > 0 {
        let pair = complex && left >= 2 && rng.random_bool(0.3);
        let modulus = if unstable { rng.random_range(1.02..1.5) } else { rng.random_range(0.05..0.95) };
        let z = if pair {
            let ang = rng.random_range(0.2..2.8);
            Complex64::from_polar(modulus, ang)
        } else {
            let sign = if rng.random_bool(0.8) { 1.0 } else { -1.0 };
            Complex64::new(sign * modulus, 0.0)
        };
        if !distinct(taken, z) || (pair && !distinct(taken, z.conj())) {
            continue;
        }
        taken.push(z);
        if pair {
            taken.push(z.conj());
            out.push((2, z));
            left -= 2;
        } else {
            out.push((1, z));
            left -= 1;
        }
    }
    out
}

fn random_spd(rng: &mut TestRng, n: usize, scale: f64) -> DMatrix<f64> {
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&l * l.transpose() + DMatrix::identity(n, n) * 0.2) * scale
}

/// Random plant in block form. Not every draw satisfies the design assumptions; callers
/// use [`random_pipeline`] to reject those.
pub fn random_plant(rng: &mut TestRng, shape: &PlantShape) -> RandomPlant {
    let n = rng.random_range(1..=shape.n_max);
    let m = rng.random_range(1..=shape.m_max);
    let n_u = rng.random_range(0..=n);
    let mut taken = Vec::new();
    let modes_u = draw_modes(rng, n_u, true, shape.complex, &mut taken);
    let modes_s = draw_modes(rng, n - n_u, false, shape.complex, &mut taken);
    let mut a = DMatrix::zeros(n, n);
    let mut eigenvalues = Vec::new();
    let mut k = 0;
    for (size, z) in modes_u.iter().chain(&modes_s) {
        if *size == 1 {
            a[(k, k)] = z.re;
            eigenvalues.push(*z);
        } else {
            a[(k, k)] = z.re;
            a[(k, k + 1)] = -z.im;
            a[(k + 1, k)] = z.im;
            a[(k + 1, k + 1)] = z.re;
            eigenvalues.push(*z);
            eigenvalues.push(z.conj());
        }
        k += *size;
    }
    let c = loop {
        let c = DMatrix::from_fn(m, n, |_, _| {
            if rng.random_bool(shape.sparsity) {
                0.0
            } else {
                let v: f64 = rng.random_range(0.3..1.5);
                if rng.random_bool(0.5) { v } else { -v }
            }
        });
        if !shape.observable || pbh_observable(&a, &c, &eigenvalues, &(0..m).collect::<Vec<_>>(), false) {
            break c;
        }
    };
    let b = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
    let q = random_spd(rng, n, 0.1);
    let r = DMatrix::from_diagonal(&DVector::from_fn(m, |_, _| rng.random_range(0.05..0.5)));
    let sigma = random_spd(rng, n, 0.5);
    RandomPlant { system: LtiSystem::new(a, b, c, q, r, sigma).expect("valid random plant"), eigenvalues, n_u }
}

/// Draw plants until one passes every design-phase check; returns the plant, its
/// pipeline and the number of rejected draws.
pub fn random_pipeline(rng: &mut TestRng, shape: &PlantShape) -> (RandomPlant, Pipeline, usize) {
    let tols = ToleranceConfig::default();
    let mut rejected = 0;
    loop {
        let plant = random_plant(rng, shape);
        if plant.n_u == 0 {
            rejected += 1;
            continue;
        }
        match build_pipeline(&plant.system, &tols) {
            Ok(pl) => return (plant, pl, rejected),
            Err(_) => rejected += 1,
        }
    }
}

fn rank_complex(m: &CMatrix, rel: f64) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > rel * top).count()
}

/// PBH test of `(A, C_K)` over the given eigenvalues (only |λ| ≥ 1 when `unstable_only`).
pub fn pbh_observable(a: &DMatrix<f64>, c: &DMatrix<f64>, eigenvalues: &[Complex64], keep: &[usize], unstable_only: bool) -> bool {
    let n = a.nrows();
    for lam in eigenvalues {
        if unstable_only && lam.norm() < 1.0 {
            continue;
        }
        let mut m = CMatrix::zeros(n + keep.len(), n);
        for r in 0..n {
            for col in 0..n {
                m[(r, col)] = Complex64::new(a[(r, col)], 0.0) - if r == col { *lam } else { Complex64::new(0.0, 0.0) };
            }
        }
        for (r, &i) in keep.iter().enumerate() {
            for col in 0..n {
                m[(n + r, col)] = Complex64::new(c[(i, col)], 0.0);
            }
        }
        if rank_complex(&m, 1e-9) < n {
            return false;
        }
    }
    true
}

fn subsets(m: usize, size: usize) -> Vec<Vec<usize>> {
    (0u32..(1 << m))
        .filter(|mask| mask.count_ones() as usize == size)
        .map(|mask| (0..m).filter(|i| mask & (1 << i) != 0).collect())
        .collect()
}

/// Largest s < m such that removing any s sensors keeps the PBH test passing (-1 when the
/// full sensor set already fails). At least one sensor always remains.
pub fn brute_force_index(a: &DMatrix<f64>, c: &DMatrix<f64>, eigenvalues: &[Complex64], unstable_only: bool) -> i64 {
    let m = c.nrows();
    let mut best = -1i64;
    for s in 0..m {
        let ok = subsets(m, s).iter().all(|removed| {
            let keep: Vec<usize> = (0..m).filter(|i| !removed.contains(i)).collect();
            pbh_observable(a, c, eigenvalues, &keep, unstable_only)
        });
        if ok {
            best = s as i64;
        } else {
            break;
        }
    }
    best
}

/// Orthogonal projector onto the row space of `m`, from an SVD.
pub fn row_projector(m: &CMatrix, rel: f64) -> CMatrix {
    let k = m.ncols();
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors");
    let top = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let mut p = CMatrix::zeros(k, k);
    for (r, s) in svd.singular_values.iter().enumerate() {
        if *s > rel * top {
            let row = v_t.row(r);
            p += row.adjoint() * row;
        }
    }
    p
}

pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.norm()))
}

/// Secure objective `½ sᴴ 𝒲 s + γ‖ν‖₁` with `s = [Y - Hx - ν; NHx]`.
pub fn objective(h: &CMatrix, nh: &CMatrix, w: &CMatrix, y: &CVector, x: &DVector<f64>, nu: &CVector, gamma: f64) -> f64 {
    let xc = x.map(|v| Complex64::new(v, 0.0));
    let mut s = CVector::zeros(y.len() + nh.nrows());
    s.rows_mut(0, y.len()).copy_from(&(y - h * &xc - nu));
    s.rows_mut(y.len(), nh.nrows()).copy_from(&(nh * &xc));
    0.5 * (s.adjoint() * w * &s)[(0, 0)].re + gamma * nu.iter().map(|v| v.norm()).sum::<f64>()
}

/// Accelerated proximal gradient (FISTA with adaptive restart) on the secure problem,
/// written directly in complex arithmetic.
pub fn proximal_gradient(h: &CMatrix, nh: &CMatrix, w: &CMatrix, y: &CVector, gamma: f64, iters: usize) -> (DVector<f64>, CVector, f64) {
    let (mn, n) = (h.nrows(), h.ncols());
    let ms = nh.nrows();
    // s = c - A z with z = [x; ν]; gradient of the smooth part is -Re/complex Aᴴ W (c - A z)
    let mut a = CMatrix::zeros(mn + ms, n + mn);
    a.view_mut((0, 0), (mn, n)).copy_from(h);
    a.view_mut((0, n), (mn, mn)).copy_from(&CMatrix::identity(mn, mn));
    a.view_mut((mn, 0), (ms, n)).copy_from(&(-nh));
    let mut c = CVector::zeros(mn + ms);
    c.rows_mut(0, mn).copy_from(y);
    let hess = a.adjoint() * w * &a;
    let lip = hess.clone().symmetric_eigenvalues().iter().cloned().fold(0.0, f64::max).max(1e-300);
    let step = 1.0 / lip;
    let grad = |z: &CVector| -> CVector {
        let mut g = -(a.adjoint() * (w * (&c - &a * z)));
        for i in 0..n {
            g[i] = Complex64::new(g[i].re, 0.0);
        }
        g
    };
    let prox = |v: &CVector| -> CVector {
        let mut out = v.clone();
        for i in 0..n {
            out[i] = Complex64::new(v[i].re, 0.0);
        }
        for i in n..n + mn {
            let r = v[i].norm();
            out[i] = if r <= gamma * step { Complex64::new(0.0, 0.0) } else { v[i] * ((r - gamma * step) / r) };
        }
        out
    };
    let f = |z: &CVector| -> f64 {
        let x = DVector::from_fn(n, |i, _| z[i].re);
        let nu = z.rows(n, mn).into_owned();
        objective(h, nh, w, y, &x, &nu, gamma)
    };
    let mut z = CVector::zeros(n + mn);
    let mut yk = z.clone();
    let mut t = 1.0f64;
    let mut f_prev = f(&z);
    for _ in 0..iters {
        let z_next = prox(&(&yk - grad(&yk) * Complex64::new(step, 0.0)));
        let f_next = f(&z_next);
        if f_next > f_prev {
            // restart momentum
            t = 1.0;
            yk = z.clone();
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        yk = &z_next + (&z_next - &z) * Complex64::new((t - 1.0) / t_next, 0.0);
        z = z_next;
        t = t_next;
        f_prev = f_next;
    }
    let x = DVector::from_fn(n, |i, _| z[i].re);
    let nu = z.rows(n, mn).into_owned();
    let fz = f(&z);
    (x, nu, fz)
}

/// Characteristic polynomial coefficients in ascending powers, `[a_0, …, a_{n-1}, 1]`, from
/// the eigenvalues.
pub fn poly_from_roots(roots: &[Complex64]) -> Vec<f64> {
    let mut coef = vec![Complex64::new(1.0, 0.0)];
    for r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); coef.len() + 1];
        for (k, c) in coef.iter().enumerate() {
            next[k] += c;
            next[k + 1] -= c * r;
        }
        coef = next;
    }
    coef.iter().rev().map(|c| c.re).collect()
}

/// `G_i = D1 D2 D3 O_i A` with the polynomial built from the roots of A.
pub fn g_from_structure(sys: &LtiSystem, pi: &[Complex64], a_roots: &[Complex64], sensor: usize) -> CMatrix {
    let n = sys.n();
    let coef = poly_from_roots(a_roots);
    let peval = |z: Complex64| coef.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, c| acc * z + c);
    let mut d1 = CMatrix::zeros(n, n);
    let mut d2 = CMatrix::zeros(n, n);
    for (j, &p) in pi.iter().enumerate() {
        d1[(j, j)] = -Complex64::new(1.0, 0.0) / peval(p);
        for r in 0..n {
            d2[(j, r)] = p.powu((n - 1 - r) as u32);
        }
    }
    let mut d3 = CMatrix::zeros(n, n);
    for r in 0..n {
        for c in 0..=r {
            d3[(r, c)] = Complex64::new(coef[n - r + c], 0.0);
        }
    }
    // O_i A built row by row
    let mut oa = CMatrix::zeros(n, n);
    let mut row = sys.c.rows(sensor, 1) * &sys.a;
    for r in 0..n {
        for c in 0..n {
            oa[(r, c)] = Complex64::new(row[(0, c)], 0.0);
        }
        row = &row * &sys.a;
    }
    d1 * d2 * d3 * oa
}
