//! Plant model, simulation and sparse attack generation.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, CVector};
use crate::tolerance::ToleranceConfig;

/// PRNG stream used for process/measurement noise (and random initial states).
pub const NOISE_STREAM: u64 = 0;
/// PRNG stream used for attack signals.
pub const ATTACK_STREAM: u64 = 1;

/// ChaCha20 generator seeded from a 64-bit seed on a fixed stream.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Linear time-invariant plant `x(k+1) = A x + B u + w`, `y = C x + v + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
}

fn check_symmetric(name: &str, m: &DMatrix<f64>) -> Result<()> {
    let scale = linalg::max_abs_real(m).max(1.0);
    if linalg::max_abs_real(&(m - m.transpose())) > 1e-10 * scale {
        return Err(Error::InvalidInput(format!("{name} is not symmetric")));
    }
    Ok(())
}

fn min_sym_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

impl LtiSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        sigma: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::DimensionMismatch(format!("A must be square and nonempty, got {:?}", a.shape())));
        }
        if b.nrows() != n {
            return Err(Error::DimensionMismatch(format!("B has {} rows, expected {n}", b.nrows())));
        }
        let m = c.nrows();
        if m == 0 || c.ncols() != n {
            return Err(Error::DimensionMismatch(format!("C must be m x {n} with m >= 1, got {:?}", c.shape())));
        }
        if q.shape() != (n, n) || sigma.shape() != (n, n) {
            return Err(Error::DimensionMismatch("Q and Sigma must be n x n".into()));
        }
        if r.shape() != (m, m) {
            return Err(Error::DimensionMismatch(format!("R must be {m} x {m}, got {:?}", r.shape())));
        }
        for (name, mat) in [("Q", &q), ("R", &r), ("Sigma", &sigma)] {
            check_symmetric(name, mat)?;
        }
        let tol = 1e-12;
        for (name, mat) in [("Q", &q), ("Sigma", &sigma)] {
            let lo = min_sym_eig(mat);
            if lo < -tol * linalg::max_abs_real(mat).max(1.0) {
                return Err(Error::NotPositiveDefinite(format!("{name} has eigenvalue {lo:e}")));
            }
        }
        let lo = min_sym_eig(&r);
        if lo <= tol * linalg::max_abs_real(&r) || lo <= 0.0 {
            return Err(Error::NotPositiveDefinite(format!("R has eigenvalue {lo:e}")));
        }
        Ok(Self { a, b, c, q, r, sigma })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.c.nrows()
    }

    pub fn d(&self) -> usize {
        self.b.ncols()
    }

    /// Row `i` of C (zero-based sensor index).
    pub fn sensor_row(&self, i: usize) -> DMatrix<f64> {
        self.c.rows(i, 1).into_owned()
    }

    /// Similarity transform `x' = T x` with `V = T⁻¹`.
    pub fn transformed(&self, t: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<Self> {
        Self::new(
            t * &self.a * v,
            t * &self.b,
            &self.c * v,
            t * &self.q * t.transpose(),
            self.r.clone(),
            t * &self.sigma * t.transpose(),
        )
    }

    /// Observability matrix of the pair (A, rows of C selected by `sensors`).
    pub fn observability_matrix(&self, sensors: &[usize]) -> DMatrix<f64> {
        let n = self.n();
        let mut out = DMatrix::zeros(sensors.len() * n, n);
        let mut row = 0;
        for &i in sensors {
            let mut block = self.sensor_row(i);
            for _ in 0..n {
                out.rows_mut(row, 1).copy_from(&block);
                block = &block * &self.a;
                row += 1;
            }
        }
        out
    }
}

/// Unstable-first state partition: states `0..n_u` are unstable, `n_u..n` stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatePartition {
    pub n_u: usize,
    pub n_s: usize,
}

impl StatePartition {
    pub fn n(&self) -> usize {
        self.n_u + self.n_s
    }

    pub fn unstable_set(&self) -> Vec<usize> {
        (0..self.n_u).collect()
    }

    pub fn stable_set(&self) -> Vec<usize> {
        (self.n_u..self.n()).collect()
    }

    pub fn is_unstable(&self, j: usize) -> bool {
        j < self.n_u
    }

    pub fn a1(&self, sys: &LtiSystem) -> DMatrix<f64> {
        sys.a.view((0, 0), (self.n_u, self.n_u)).into_owned()
    }

    pub fn a2(&self, sys: &LtiSystem) -> DMatrix<f64> {
        sys.a.view((self.n_u, self.n_u), (self.n_s, self.n_s)).into_owned()
    }
}

fn is_unstable(lam: Complex64, tols: &ToleranceConfig) -> bool {
    lam.norm() >= 1.0 - tols.stability_tol
}

/// Group eigenvalues that agree to a relative tolerance; returns cluster means.
fn cluster_eigenvalues(eigs: &[Complex64], rel: f64) -> Vec<(Complex64, usize)> {
    let mut clusters: Vec<(Complex64, usize)> = Vec::new();
    for &e in eigs {
        match clusters
            .iter_mut()
            .find(|(c, _)| (*c - e).norm() <= rel * c.norm().max(1.0))
        {
            Some((c, k)) => {
                *c = (*c * (*k as f64) + e) / (*k as f64 + 1.0);
                *k += 1;
            }
            None => clusters.push((e, 1)),
        }
    }
    clusters
}

/// Check that the plant is in unstable-first block form with a non-derogatory
/// unstable part, that A is invertible and that (A, C) is observable.
pub fn validate_system(sys: &LtiSystem, tols: &ToleranceConfig) -> Result<StatePartition> {
    let n = sys.n();
    let eigs = linalg::eigenvalues(&sys.a);
    let n_u = eigs.iter().filter(|e| is_unstable(**e, tols)).count();
    let n_s = n - n_u;

    let scale = linalg::max_abs_real(&sys.a).max(1.0);
    let off_upper = sys.a.view((0, n_u), (n_u, n_s));
    let off_lower = sys.a.view((n_u, 0), (n_s, n_u));
    let off = off_upper.iter().chain(off_lower.iter()).fold(0.0f64, |acc, v| acc.max(v.abs()));
    if off > tols.block_tol * scale {
        return Err(Error::NotBlockOrdered(format!(
            "off-diagonal block entry {off:e} with n_u = {n_u}"
        )));
    }
    let a1 = sys.a.view((0, 0), (n_u, n_u)).into_owned();
    let a2 = sys.a.view((n_u, n_u), (n_s, n_s)).into_owned();
    if n_u > 0 && linalg::eigenvalues(&a1).iter().any(|e| !is_unstable(*e, tols)) {
        return Err(Error::NotBlockOrdered("a stable eigenvalue lies in the leading block".into()));
    }
    if n_s > 0 && linalg::eigenvalues(&a2).iter().any(|e| is_unstable(*e, tols)) {
        return Err(Error::NotBlockOrdered("an unstable eigenvalue lies in the trailing block".into()));
    }

    let a_c = linalg::to_complex(&sys.a);
    let unstable: Vec<Complex64> = eigs.iter().copied().filter(|e| is_unstable(*e, tols)).collect();
    for (lam, _) in cluster_eigenvalues(&unstable, 1e-6) {
        let shifted = &a_c - CMatrix::identity(n, n) * lam;
        let r = linalg::rank(&shifted, tols.rank_tol);
        let geo = n - r;
        if geo > 1 {
            return Err(Error::DerogatoryUnstable { eigenvalue: lam.norm(), multiplicity: geo });
        }
    }

    let sv = linalg::singular_values_real(&sys.a);
    let smin = *sv.last().unwrap_or(&0.0);
    if smin <= tols.rank_tol * sv[0] {
        return Err(Error::SingularA(smin));
    }

    // PBH test at every eigenvalue
    let c_c = linalg::to_complex(&sys.c);
    for (lam, _) in cluster_eigenvalues(&eigs, 1e-6) {
        let shifted = &a_c - CMatrix::identity(n, n) * lam;
        let stacked = linalg::vstack(&[shifted, c_c.clone()]);
        let r = linalg::rank(&stacked, tols.rank_tol);
        if r < n {
            return Err(Error::NotObservable { rank: r, n });
        }
    }
    Ok(StatePartition { n_u, n_s })
}

/// Modal coordinates for a diagonalizable A with real spectrum.
#[derive(Debug, Clone)]
pub struct ModalForm {
    /// Eigenvalues, ordered by descending modulus.
    pub eigenvalues: Vec<f64>,
    /// Columns are unit-norm eigenvectors (largest-modulus entry positive).
    pub v: DMatrix<f64>,
    /// `T = V⁻¹`, so the modal state is `T x`.
    pub t: DMatrix<f64>,
}

impl ModalForm {
    /// Reorder the modal coordinates by the given permutation of current indices.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let n = self.eigenvalues.len();
        let mut v = DMatrix::zeros(n, n);
        let mut eigenvalues = Vec::with_capacity(n);
        for (new, &old) in order.iter().enumerate() {
            v.set_column(new, &self.v.column(old));
            eigenvalues.push(self.eigenvalues[old]);
        }
        let t = v.clone().try_inverse().expect("permutation of an invertible matrix");
        Self { eigenvalues, v, t }
    }

    /// Transform the system into modal coordinates; A becomes exactly diagonal.
    pub fn apply(&self, sys: &LtiSystem) -> Result<LtiSystem> {
        let mut out = sys.transformed(&self.t, &self.v)?;
        out.a = DMatrix::from_diagonal(&DVector::from_vec(self.eigenvalues.clone()));
        Ok(out)
    }
}

/// Diagonalize `a` (real spectrum required), ordering eigenvalues by descending modulus.
pub fn modal_transform(a: &DMatrix<f64>, tols: &ToleranceConfig) -> Result<ModalForm> {
    let n = a.nrows();
    let eigs = linalg::eigenvalues(a);
    let scale = linalg::max_abs_real(a).max(1.0);
    if eigs.iter().any(|e| e.im.abs() > 1e-10 * scale) {
        return Err(Error::ComplexSpectrum);
    }
    let mut vals: Vec<f64> = eigs.iter().map(|e| e.re).collect();
    vals.sort_by(|x, y| {
        y.abs()
            .partial_cmp(&x.abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal))
    });
    let mut v = DMatrix::zeros(n, n);
    for (j, &lam) in vals.iter().enumerate() {
        let shifted = a - DMatrix::identity(n, n) * lam;
        let ns = linalg::null_space(&linalg::to_complex(&shifted), 1);
        let mut col: DVector<f64> = linalg::real_part_vec(&ns.column(0).into_owned());
        col /= col.norm();
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col = -col;
        }
        v.set_column(j, &col);
    }
    let cond = linalg::condition_number(&linalg::to_complex(&v));
    if cond > tols.max_cond_v {
        return Err(Error::IllConditionedV(cond));
    }
    let t = v.clone().try_inverse().ok_or(Error::IllConditionedV(f64::INFINITY))?;
    Ok(ModalForm { eigenvalues: vals, v, t })
}

/// How the attack signal on the compromised sensors is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackGenerator {
    None,
    /// i.i.d. `U(-magnitude, magnitude)` per compromised sensor per step.
    Uniform { magnitude: f64 },
    /// The same bias every step; one entry per compromised sensor (in set order).
    ConstantBias { bias: Vec<f64> },
    /// Explicit sequence: `sequence[k]` is the value at step k+1, one entry per compromised sensor.
    Custom { sequence: Vec<Vec<f64>> },
}

/// A (p, m)-sparse attack with a fixed compromised set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScenario {
    /// Zero-based sensor indices.
    pub compromised: Vec<usize>,
    pub generator: AttackGenerator,
    #[serde(default)]
    pub seed: u64,
}

impl AttackScenario {
    pub fn none() -> Self {
        Self { compromised: Vec::new(), generator: AttackGenerator::None, seed: 0 }
    }

    pub fn uniform(compromised: Vec<usize>, magnitude: f64, seed: u64) -> Self {
        Self { compromised, generator: AttackGenerator::Uniform { magnitude }, seed }
    }

    pub fn p(&self) -> usize {
        self.compromised.len()
    }
}

/// Attack sequence `a(1..=n_steps)`; entry `k` of the result is `a(k+1)`.
pub fn gen_sparse_attack(scenario: &AttackScenario, m: usize, n_steps: usize) -> Result<Vec<DVector<f64>>> {
    if n_steps == 0 {
        return Err(Error::EmptyHorizon);
    }
    let mut set = scenario.compromised.clone();
    set.sort_unstable();
    set.dedup();
    if set.len() != scenario.compromised.len() || set.iter().any(|&i| i >= m) {
        return Err(Error::InvalidInput(format!(
            "compromised set {:?} must be distinct indices below {m}",
            scenario.compromised
        )));
    }
    let p = scenario.compromised.len();
    let mut out = vec![DVector::zeros(m); n_steps];
    match &scenario.generator {
        AttackGenerator::None => {}
        AttackGenerator::Uniform { magnitude } => {
            if !(magnitude.is_finite() && *magnitude >= 0.0) {
                return Err(Error::InvalidInput(format!("attack magnitude {magnitude}")));
            }
            let mut rng = seeded_rng(scenario.seed, ATTACK_STREAM);
            for a in out.iter_mut() {
                for &i in &scenario.compromised {
                    // drawn on U(-1, 1) and scaled so realizations pair across magnitudes
                    let u: f64 = rng.random_range(-1.0..1.0);
                    a[i] = magnitude * u;
                }
            }
        }
        AttackGenerator::ConstantBias { bias } => {
            if bias.len() != p {
                return Err(Error::DimensionMismatch(format!("bias has {} entries, expected {p}", bias.len())));
            }
            for a in out.iter_mut() {
                for (&i, &b) in scenario.compromised.iter().zip(bias) {
                    a[i] = b;
                }
            }
        }
        AttackGenerator::Custom { sequence } => {
            if sequence.len() < n_steps {
                return Err(Error::DimensionMismatch(format!(
                    "custom attack has {} steps, expected {n_steps}",
                    sequence.len()
                )));
            }
            for (a, row) in out.iter_mut().zip(sequence) {
                if row.len() != p {
                    return Err(Error::DimensionMismatch(format!("custom attack row has {} entries, expected {p}", row.len())));
                }
                for (&i, &v) in scenario.compromised.iter().zip(row) {
                    a[i] = v;
                }
            }
        }
    }
    Ok(out)
}

/// Control law used during simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum Controller {
    Zero,
    /// `u(k) = -K x(k)`.
    Feedback(DMatrix<f64>),
    /// `u(k)` given per step; missing trailing entries are zero.
    OpenLoop(Vec<DVector<f64>>),
}

impl Controller {
    fn input(&self, k: usize, x: &DVector<f64>, d: usize) -> DVector<f64> {
        match self {
            Controller::Zero => DVector::zeros(d),
            Controller::Feedback(gain) => -(gain * x),
            Controller::OpenLoop(seq) => seq.get(k).cloned().unwrap_or_else(|| DVector::zeros(d)),
        }
    }

    fn check(&self, n: usize, d: usize) -> Result<()> {
        match self {
            Controller::Zero => Ok(()),
            Controller::Feedback(gain) if gain.shape() == (d, n) => Ok(()),
            Controller::Feedback(gain) => Err(Error::DimensionMismatch(format!(
                "feedback gain is {:?}, expected ({d}, {n})",
                gain.shape()
            ))),
            Controller::OpenLoop(seq) => match seq.iter().find(|u| u.len() != d) {
                Some(u) => Err(Error::DimensionMismatch(format!("input of length {}, expected {d}", u.len()))),
                None => Ok(()),
            },
        }
    }
}

/// Initial state of a simulated trajectory.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Known(DVector<f64>),
    /// `x(0) = mean + Σ^{1/2} e`, drawn from the noise stream before any step.
    Random(DVector<f64>),
}

/// A simulated closed-loop run.
///
/// `x` and `u` hold `k = 0..=N`; `w[k]` drives the step `k -> k+1`; `v`, `a`, `y`, `z`
/// at index `k` belong to time `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    pub a: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.y.len()
    }

    /// Largest residual of the state and output equations when replayed from the stored
    /// noise and attack sequences.
    pub fn replay_residual(&self, sys: &LtiSystem) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..self.n_steps() {
            let xn = &sys.a * &self.x[k] + &sys.b * &self.u[k] + &self.w[k];
            worst = worst.max(linalg::vec_inf_norm_real(&(&self.x[k + 1] - xn)));
            let zk = &sys.c * &self.x[k + 1] + &self.v[k];
            worst = worst.max(linalg::vec_inf_norm_real(&(&self.z[k] - &zk)));
            worst = worst.max(linalg::vec_inf_norm_real(&(&self.y[k] - &self.z[k] - &self.a[k])));
        }
        worst
    }

    /// CSV with columns `k, x_*, u_*, y_*, a_*`; `y` and `a` are empty at k = 0.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        let (n, d) = (self.x[0].len(), self.u[0].len());
        let m = self.y.first().map_or(0, |y| y.len());
        let mut header = vec!["k".to_string()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.extend((1..=d).map(|i| format!("u_{i}")));
        header.extend((1..=m).map(|i| format!("y_{i}")));
        header.extend((1..=m).map(|i| format!("a_{i}")));
        wtr.write_record(&header)?;
        for k in 0..self.x.len() {
            let mut rec = vec![k.to_string()];
            rec.extend(self.x[k].iter().map(|v| v.to_string()));
            rec.extend(self.u[k].iter().map(|v| v.to_string()));
            if k == 0 {
                rec.extend(std::iter::repeat_n(String::new(), 2 * m));
            } else {
                rec.extend(self.y[k - 1].iter().map(|v| v.to_string()));
                rec.extend(self.a[k - 1].iter().map(|v| v.to_string()));
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha20Rng, factor: &DMatrix<f64>) -> DVector<f64> {
    let e = DVector::from_iterator(factor.ncols(), (0..factor.ncols()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    factor * e
}

/// Simulate with a generated attack. See [`simulate_with_attack`].
pub fn simulate(
    sys: &LtiSystem,
    controller: &Controller,
    x0: &InitialState,
    attack: &AttackScenario,
    n_steps: usize,
    seed: u64,
    noise: bool,
) -> Result<Trajectory> {
    let a = gen_sparse_attack(attack, sys.m(), n_steps)?;
    simulate_with_attack(sys, controller, x0, &a, seed, noise)
}

/// Simulate `attack.len()` steps. Noise is drawn from the seed's noise stream,
/// `w(k)` then `v(k+1)` each step; with `noise = false` both are zero.
pub fn simulate_with_attack(
    sys: &LtiSystem,
    controller: &Controller,
    x0: &InitialState,
    attack: &[DVector<f64>],
    seed: u64,
    noise: bool,
) -> Result<Trajectory> {
    let (n, m, d) = (sys.n(), sys.m(), sys.d());
    let n_steps = attack.len();
    if n_steps == 0 {
        return Err(Error::EmptyHorizon);
    }
    if attack.iter().any(|a| a.len() != m) {
        return Err(Error::DimensionMismatch(format!("attack vectors must have length {m}")));
    }
    controller.check(n, d)?;
    let lq = linalg::psd_factor(&sys.q)?;
    let lr = linalg::psd_factor(&sys.r)?;
    let mut rng = seeded_rng(seed, NOISE_STREAM);
    let x_init = match x0 {
        InitialState::Known(x) => x.clone(),
        InitialState::Random(mean) => {
            let ls = linalg::psd_factor(&sys.sigma)?;
            let dx = gaussian(&mut rng, &ls);
            if noise { mean + dx } else { mean.clone() }
        }
    };
    if x_init.len() != n {
        return Err(Error::DimensionMismatch(format!("x(0) has length {}, expected {n}", x_init.len())));
    }
    let mut traj = Trajectory {
        x: Vec::with_capacity(n_steps + 1),
        u: Vec::with_capacity(n_steps + 1),
        w: Vec::with_capacity(n_steps),
        v: Vec::with_capacity(n_steps),
        a: attack.to_vec(),
        y: Vec::with_capacity(n_steps),
        z: Vec::with_capacity(n_steps),
    };
    let mut x = x_init;
    for (k, ak) in attack.iter().enumerate() {
        let u = controller.input(k, &x, d);
        let (w, v) = if noise {
            let w = gaussian(&mut rng, &lq);
            let v = gaussian(&mut rng, &lr);
            (w, v)
        } else {
            (DVector::zeros(n), DVector::zeros(m))
        };
        let xn = &sys.a * &x + &sys.b * &u + &w;
        let z = &sys.c * &xn + &v;
        traj.y.push(&z + ak);
        traj.z.push(z);
        traj.x.push(x);
        traj.u.push(u);
        traj.w.push(w);
        traj.v.push(v);
        x = xn;
    }
    traj.u.push(controller.input(n_steps, &x, d));
    traj.x.push(x);
    Ok(traj)
}

/// Evidence that the system is not 2p-sparse detectable.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    /// Zero-based sensors whose output may carry the mode (|set| = 2p).
    pub target_set: Vec<usize>,
    pub eigenvalue: Complex64,
    pub eigenvector: CVector,
}

/// Search the unstable modes of A for an eigenvector seen by at most `2p` sensors.
pub fn find_certificate(sys: &LtiSystem, p: usize, tols: &ToleranceConfig) -> Result<Certificate> {
    let n = sys.n();
    let m = sys.m();
    if 2 * p > m {
        return Err(Error::CertificateInvalid(format!("2p = {} exceeds the number of sensors {m}", 2 * p)));
    }
    let a_c = linalg::to_complex(&sys.a);
    let c_c = linalg::to_complex(&sys.c);
    let c_scale = linalg::max_abs(&c_c).max(f64::MIN_POSITIVE);
    let mut eigs = linalg::eigenvalues(&sys.a);
    eigs.sort_by(|x, y| y.norm().partial_cmp(&x.norm()).unwrap_or(std::cmp::Ordering::Equal));
    for lam in eigs.into_iter().filter(|e| is_unstable(*e, tols)) {
        let shifted = &a_c - CMatrix::identity(n, n) * lam;
        let mut xi: CVector = linalg::null_space(&shifted, 1).column(0).into_owned();
        linalg::normalize_phase(&mut xi);
        let seen = &c_c * &xi;
        let support: Vec<usize> = (0..m).filter(|&i| seen[i].norm() > tols.col_tol * c_scale).collect();
        if support.len() <= 2 * p {
            let mut target = support.clone();
            for i in 0..m {
                if target.len() == 2 * p {
                    break;
                }
                if !target.contains(&i) {
                    target.push(i);
                }
            }
            target.sort_unstable();
            return Ok(Certificate { target_set: target, eigenvalue: lam, eigenvector: xi });
        }
    }
    Err(Error::CertificateInvalid(format!(
        "every unstable mode is observed by more than 2p = {} sensors",
        2 * p
    )))
}

/// Two runs with identical outputs and diverging states.
#[derive(Debug, Clone, PartialEq)]
pub struct UndetectablePair {
    pub system1: Trajectory,
    pub system2: Trajectory,
    /// Sensors attacked in system 1 and system 2 (zero-based).
    pub set1: Vec<usize>,
    pub set2: Vec<usize>,
}

impl UndetectablePair {
    pub fn max_output_gap(&self) -> f64 {
        self.system1
            .y
            .iter()
            .zip(&self.system2.y)
            .map(|(a, b)| linalg::vec_inf_norm_real(&(a - b)))
            .fold(0.0, f64::max)
    }

    /// `‖x1(k) - x2(k)‖₂` for k = 0..=N.
    pub fn state_gaps(&self) -> Vec<f64> {
        self.system1.x.iter().zip(&self.system2.x).map(|(a, b)| (a - b).norm()).collect()
    }
}

/// Build the pair of indistinguishable trajectories from an unstable eigenpair whose
/// eigenvector is invisible outside `target_set`.
///
/// System 1 starts at 0 with no noise and attacks the first half of the target set with
/// `C_i x2(k)`; system 2 starts at ξ (or ξ + ξ̄) with process noise `φ(k+1) ξ` and attacks the
/// second half with `-C_i x2(k)`. Inputs and measurement noise are zero. With `noise =
/// false`, φ ≡ 0.
#[allow(clippy::too_many_arguments)]
pub fn build_undetectable_attack(
    sys: &LtiSystem,
    target_set: &[usize],
    xi: &CVector,
    lambda: Complex64,
    n_steps: usize,
    seed: u64,
    noise: bool,
    tols: &ToleranceConfig,
) -> Result<UndetectablePair> {
    let (n, m, d) = (sys.n(), sys.m(), sys.d());
    if n_steps == 0 {
        return Err(Error::EmptyHorizon);
    }
    if xi.len() != n {
        return Err(Error::DimensionMismatch(format!("eigenvector has length {}, expected {n}", xi.len())));
    }
    if lambda.norm() < 1.0 - tols.stability_tol {
        return Err(Error::NotUnstable(lambda.norm()));
    }
    if target_set.iter().any(|&i| i >= m) {
        return Err(Error::InvalidInput(format!("target set {target_set:?} out of range")));
    }
    let a_c = linalg::to_complex(&sys.a);
    let scale = xi.norm().max(f64::MIN_POSITIVE);
    let eig_res = (&a_c * xi - xi * lambda).norm() / scale;
    if eig_res > 1e-8 * linalg::max_abs(&a_c).max(1.0) {
        return Err(Error::CertificateInvalid(format!("(λ, ξ) is not an eigenpair (residual {eig_res:e})")));
    }
    let c_c = linalg::to_complex(&sys.c);
    let c_scale = linalg::max_abs(&c_c).max(f64::MIN_POSITIVE);
    for i in (0..m).filter(|i| !target_set.contains(i)) {
        let seen = (c_c.row(i) * xi)[(0, 0)].norm() / scale;
        if seen > tols.col_tol * c_scale {
            return Err(Error::CertificateInvalid(format!("sensor {i} outside the target set observes ξ ({seen:e})")));
        }
    }
    let half = target_set.len() / 2;
    let set1 = target_set[..half].to_vec();
    let set2 = target_set[half..].to_vec();

    let is_real = xi.iter().all(|v| v.im == 0.0) && lambda.im == 0.0;
    let dir: DVector<f64> = if is_real {
        linalg::real_part_vec(xi)
    } else {
        linalg::real_part_vec(xi) * 2.0
    };

    let mut rng = seeded_rng(seed, NOISE_STREAM);
    let zero_u = DVector::zeros(d);
    let mut x2 = dir.clone();
    let mut x2_seq = vec![x2.clone()];
    let mut w2 = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let phi: f64 = if noise { rng.sample(StandardNormal) } else { 0.0 };
        let w = &dir * phi;
        x2 = &sys.a * &x2 + &w;
        x2_seq.push(x2.clone());
        w2.push(w);
    }

    let mut s1 = Trajectory {
        x: vec![DVector::zeros(n); n_steps + 1],
        u: vec![zero_u.clone(); n_steps + 1],
        w: vec![DVector::zeros(n); n_steps],
        v: vec![DVector::zeros(m); n_steps],
        a: Vec::with_capacity(n_steps),
        y: Vec::with_capacity(n_steps),
        z: Vec::with_capacity(n_steps),
    };
    let mut s2 = Trajectory {
        x: x2_seq,
        u: vec![zero_u; n_steps + 1],
        w: w2,
        v: vec![DVector::zeros(m); n_steps],
        a: Vec::with_capacity(n_steps),
        y: Vec::with_capacity(n_steps),
        z: Vec::with_capacity(n_steps),
    };
    for k in 1..=n_steps {
        let cx2 = &sys.c * &s2.x[k];
        let mut a1 = DVector::zeros(m);
        let mut a2 = DVector::zeros(m);
        for &i in &set1 {
            a1[i] = cx2[i];
        }
        for &i in &set2 {
            a2[i] = -cx2[i];
        }
        let z1 = DVector::zeros(m);
        s1.y.push(&z1 + &a1);
        s1.z.push(z1);
        s1.a.push(a1);
        s2.y.push(&cx2 + &a2);
        s2.z.push(cx2);
        s2.a.push(a2);
    }
    Ok(UndetectablePair { system1: s1, system2: s2, set1, set2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn sys_from(a: DMatrix<f64>, c: DMatrix<f64>) -> LtiSystem {
        let n = a.nrows();
        let m = c.nrows();
        LtiSystem::new(
            a,
            DMatrix::zeros(n, 1),
            c,
            DMatrix::identity(n, n),
            DMatrix::identity(m, m),
            DMatrix::identity(n, n),
        )
        .unwrap()
    }

    #[test]
    fn stable_system_has_no_unstable_states() {
        let s = sys_from(dmatrix![0.5, 0.0; 0.0, 0.2], DMatrix::identity(2, 2));
        let p = validate_system(&s, &ToleranceConfig::default()).unwrap();
        assert_eq!((p.n_u, p.n_s), (0, 2));
    }

    #[test]
    fn jordan_block_is_accepted() {
        let s = sys_from(dmatrix![1.1, 1.0; 0.0, 1.1], dmatrix![1.0, 0.0]);
        let p = validate_system(&s, &ToleranceConfig::default()).unwrap();
        assert_eq!(p.n_u, 2);
    }

    #[test]
    fn derogatory_unstable_rejected() {
        let s = sys_from(dmatrix![1.1, 0.0; 0.0, 1.1], DMatrix::identity(2, 2));
        let e = validate_system(&s, &ToleranceConfig::default()).unwrap_err();
        assert!(matches!(e, Error::DerogatoryUnstable { multiplicity: 2, .. }));
    }

    #[test]
    fn wrong_order_rejected() {
        let s = sys_from(dmatrix![0.5, 0.0; 0.0, 2.0], DMatrix::identity(2, 2));
        let e = validate_system(&s, &ToleranceConfig::default()).unwrap_err();
        assert!(matches!(e, Error::NotBlockOrdered(_)));
    }

    #[test]
    fn coupled_blocks_rejected() {
        let s = sys_from(dmatrix![2.0, 0.3; 0.0, 0.5], DMatrix::identity(2, 2));
        assert!(matches!(validate_system(&s, &ToleranceConfig::default()), Err(Error::NotBlockOrdered(_))));
    }

    #[test]
    fn singular_and_unobservable() {
        let s = sys_from(dmatrix![2.0, 0.0; 0.0, 0.0], DMatrix::identity(2, 2));
        assert!(matches!(validate_system(&s, &ToleranceConfig::default()), Err(Error::SingularA(_))));
        let s = sys_from(dmatrix![2.0, 0.0; 0.0, 0.5], dmatrix![1.0, 0.0]);
        assert!(matches!(validate_system(&s, &ToleranceConfig::default()), Err(Error::NotObservable { .. })));
    }

    #[test]
    fn bad_dimensions_and_covariances() {
        let a = DMatrix::identity(2, 2) * 0.5;
        let r = LtiSystem::new(
            a.clone(),
            DMatrix::zeros(3, 1),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        );
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
        let r = LtiSystem::new(
            a,
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
        );
        assert!(matches!(r, Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn attack_support_and_generators() {
        let sc = AttackScenario::uniform(vec![2], 1.0, 7);
        let a = gen_sparse_attack(&sc, 4, 50).unwrap();
        for ak in &a {
            assert_eq!(ak[0], 0.0);
            assert_eq!(ak[1], 0.0);
            assert_eq!(ak[3], 0.0);
            assert!(ak[2].abs() < 1.0);
        }
        assert!(a.iter().any(|ak| ak[2] != 0.0));
        let none = gen_sparse_attack(&AttackScenario::none(), 4, 5).unwrap();
        assert!(none.iter().all(|ak| ak.iter().all(|v| *v == 0.0)));
        let bias = AttackScenario {
            compromised: vec![0, 1],
            generator: AttackGenerator::ConstantBias { bias: vec![5.0, -5.0] },
            seed: 0,
        };
        let b = gen_sparse_attack(&bias, 4, 3).unwrap();
        assert!(b.iter().all(|ak| ak.as_slice() == [5.0, -5.0, 0.0, 0.0]));
        assert_eq!(gen_sparse_attack(&sc, 4, 0), Err(Error::EmptyHorizon));
    }

    #[test]
    fn attack_draws_pair_across_magnitudes() {
        let a1 = gen_sparse_attack(&AttackScenario::uniform(vec![1], 1.0, 3), 2, 10).unwrap();
        let a2 = gen_sparse_attack(&AttackScenario::uniform(vec![1], 2.0, 3), 2, 10).unwrap();
        for (x, y) in a1.iter().zip(&a2) {
            assert_eq!(2.0 * x[1], y[1]);
        }
    }

    #[test]
    fn scalar_growth_without_noise() {
        let s = sys_from(dmatrix![2.0], dmatrix![1.0]);
        let t = simulate(
            &s,
            &Controller::Zero,
            &InitialState::Known(DVector::from_element(1, 1.0)),
            &AttackScenario::none(),
            10,
            0,
            false,
        )
        .unwrap();
        for (k, x) in t.x.iter().enumerate() {
            assert_eq!(x[0], 2f64.powi(k as i32));
        }
    }

    #[test]
    fn simulation_is_deterministic_and_replays() {
        let s = sys_from(dmatrix![1.01, 0.0; 0.0, 0.5], DMatrix::identity(2, 2));
        let run = || {
            simulate(
                &s,
                &Controller::Feedback(dmatrix![0.1, 0.0]),
                &InitialState::Random(DVector::zeros(2)),
                &AttackScenario::uniform(vec![0], 1.0, 4),
                40,
                11,
                true,
            )
            .unwrap()
        };
        let t1 = run();
        assert_eq!(t1, run());
        assert!(t1.replay_residual(&s) <= 1e-12);
    }

    #[test]
    fn modal_transform_orders_and_diagonalizes() {
        let a = dmatrix![0.5, 1.0; 0.0, 2.0];
        let mf = modal_transform(&a, &ToleranceConfig::default()).unwrap();
        assert_eq!(mf.eigenvalues, vec![2.0, 0.5]);
        let d = &mf.t * &a * &mf.v;
        assert!((d[(0, 1)]).abs() < 1e-12 && (d[(0, 0)] - 2.0).abs() < 1e-12);
        let rot = dmatrix![0.0, -1.0; 1.0, 0.0];
        assert!(matches!(modal_transform(&rot, &ToleranceConfig::default()), Err(Error::ComplexSpectrum)));
    }

    #[test]
    fn undetectable_scalar_pair() {
        let s = sys_from(dmatrix![2.0], dmatrix![1.0; 1.0]);
        let tols = ToleranceConfig::default();
        let cert = find_certificate(&s, 1, &tols).unwrap();
        assert_eq!(cert.target_set, vec![0, 1]);
        let pair =
            build_undetectable_attack(&s, &cert.target_set, &cert.eigenvector, cert.eigenvalue, 20, 1, true, &tols)
                .unwrap();
        assert_eq!(pair.max_output_gap(), 0.0);
        assert!(pair.system2.replay_residual(&s) < 1e-9 * 2f64.powi(20));
        let quiet = build_undetectable_attack(&s, &[0, 1], &cert.eigenvector, cert.eigenvalue, 20, 1, false, &tols)
            .unwrap();
        assert!((quiet.state_gaps()[20] - 2f64.powi(20)).abs() < 1e-6);
    }

    #[test]
    fn undetectable_rejects_bad_certificate() {
        let s = sys_from(dmatrix![2.0], dmatrix![1.0; 1.0]);
        let tols = ToleranceConfig::default();
        let xi = linalg::to_complex_vec(&DVector::from_element(1, 1.0));
        let e = build_undetectable_attack(&s, &[0], &xi, Complex64::new(2.0, 0.0), 5, 0, false, &tols);
        assert!(matches!(e, Err(Error::CertificateInvalid(_))));
        let e = build_undetectable_attack(&s, &[0, 1], &xi, Complex64::new(0.5, 0.0), 5, 0, false, &tols);
        assert!(matches!(e, Err(Error::NotUnstable(_))));
    }
}
