//! Presets, experiment configuration and the experiment drivers behind the CLI.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canonical::{assemble_y, build_canonical, coverage, sparse_indices, CanonicalData, CoverageData, SparseIndices};
use crate::decomposition::{bank_step, build_bank, decompose, LocalBank, LocalEstimates, SpectralData};
use crate::error::{Error, Result};
use crate::estimator::{evaluate_bound_with, RecoveryMap, SecureEstimator, SolverConfig};
use crate::kalman::{filter_step, solve_steady_kalman, FilterState, KalmanSteady};
use crate::linalg;
use crate::system::{
    build_undetectable_attack, find_certificate, modal_transform, simulate, validate_system, AttackGenerator,
    AttackScenario, Controller, InitialState, LtiSystem, StatePartition, Trajectory,
};
use crate::tolerance::ToleranceConfig;

/// Name of the pseudo-random generator used for every stochastic draw.
pub const PRNG: &str = "ChaCha20 (rand_chacha), seed_from_u64; stream 0 = noise, stream 1 = attacks";

pub const PENDULUM_TS: f64 = 0.02;
pub const PENDULUM_K_LQR: [f64; 4] = [-8.0, -15.0, -115.0, -32.0];
pub const PENDULUM_X0: [f64; 4] = [0.0, 1.0, 0.0, 1.0];

/// Discretized cart-pendulum (cart position/velocity, angle/angular velocity), Ts = 0.02.
const PENDULUM_A: [[f64; 4]; 4] = [
    [1.0, 0.019990009635619244, -0.0001945754181294255, 1.8555168398157646e-05],
    [0.0, 0.999001427276639, -0.01939018472757472, 0.0017840148601945248],
    [0.0, 9.927317251501293e-06, 1.002140979332476, 0.019795830100491],
    [0.0, 0.0009892951391619752, 0.21338931971238662, 0.9803665589536611],
];
const PENDULUM_B: [f64; 4] = [0.00019980728761523976, 0.019971454467221084, -0.00019854634503002584, -0.019785902783239502];

fn rows_to_matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("matrix {name} has ragged rows")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// A plant together with the experiment constants that belong to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: String,
    pub system: LtiSystem,
    /// `u = -K x` in the preset's coordinates.
    pub feedback: Option<DMatrix<f64>>,
    pub x0: DVector<f64>,
    /// Estimation errors are measured on `output_map · x` (identity when absent).
    pub output_map: Option<DMatrix<f64>>,
    /// Default compromised sensors for attack experiments.
    pub attacked: Vec<usize>,
    /// p used by the undetectable-attack demonstration.
    pub demo_p: usize,
}

/// The pendulum in physical coordinates. A is not in block form, so only simulation and
/// Kalman filtering apply directly.
pub fn pendulum_raw() -> Preset {
    let ts2 = PENDULUM_TS * PENDULUM_TS;
    let a = DMatrix::from_fn(4, 4, |i, j| PENDULUM_A[i][j]);
    let b = DMatrix::from_column_slice(4, 1, &PENDULUM_B);
    let c = DMatrix::from_row_slice(4, 4, &[
        1.0, 0.0, 0.0, 0.0, //
        1.0, 0.0, 0.0, 0.0, //
        1.0, 0.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 0.0,
    ]);
    let q = DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 0.1, 0.01, 0.01])) * ts2;
    let system = LtiSystem::new(a, b, c, q.clone(), q.clone(), q).expect("pendulum matrices are valid");
    Preset {
        name: "pendulum-raw".into(),
        system,
        feedback: Some(DMatrix::from_row_slice(1, 4, &PENDULUM_K_LQR)),
        x0: DVector::from_row_slice(&PENDULUM_X0),
        output_map: None,
        attacked: vec![2],
        demo_p: 1,
    }
}

/// The pendulum in modal coordinates with states ordered (1, 1.057, 0.999, 0.925).
/// Noise, the controller and the initial state are those of the physical model, carried
/// through the transform; errors are reported in physical coordinates.
pub fn pendulum() -> Preset {
    let raw = pendulum_raw();
    let tols = ToleranceConfig::default();
    let modal = modal_transform(&raw.system.a, &tols).expect("pendulum A is diagonalizable");
    // descending modulus puts 1.057 first; the unit-eigenvalue mode (cart position) goes first
    let modal = modal.permuted(&[1, 0, 2, 3]);
    let system = modal.apply(&raw.system).expect("transformed pendulum is valid");
    Preset {
        name: "pendulum".into(),
        system,
        feedback: raw.feedback.as_ref().map(|k| k * &modal.v),
        x0: &modal.t * &raw.x0,
        output_map: Some(modal.v.clone()),
        attacked: vec![2],
        demo_p: 1,
    }
}

fn scalar_preset(name: &str, a: f64) -> Preset {
    let system = LtiSystem::new(
        DMatrix::from_element(1, 1, a),
        DMatrix::zeros(1, 1),
        DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
        DMatrix::identity(1, 1),
        DMatrix::identity(2, 2),
        DMatrix::identity(1, 1),
    )
    .expect("scalar preset is valid");
    Preset {
        name: name.into(),
        system,
        feedback: None,
        x0: DVector::zeros(1),
        output_map: None,
        attacked: vec![0],
        demo_p: 1,
    }
}

/// `x(k+1) = 2 x(k) + w`, two identical sensors.
pub fn scalar_undetectable() -> Preset {
    scalar_preset("scalar-undetectable", 2.0)
}

/// `x(k+1) = x(k) + w`, two identical sensors.
pub fn scalar_marginal() -> Preset {
    scalar_preset("scalar-marginal", 1.0)
}

pub fn preset(name: &str) -> Result<Preset> {
    match name {
        "pendulum" => Ok(pendulum()),
        "pendulum-raw" => Ok(pendulum_raw()),
        "scalar-undetectable" => Ok(scalar_undetectable()),
        "scalar-marginal" => Ok(scalar_marginal()),
        other => Err(Error::Config(format!(
            "unknown preset '{other}' (expected pendulum, pendulum-raw, scalar-undetectable, scalar-marginal)"
        ))),
    }
}

/// Plant matrices, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct MatrixSpec {
    pub A: Vec<Vec<f64>>,
    pub B: Vec<Vec<f64>>,
    pub C: Vec<Vec<f64>>,
    pub Q: Vec<Vec<f64>>,
    pub R: Vec<Vec<f64>>,
    pub Sigma: Vec<Vec<f64>>,
}

impl MatrixSpec {
    pub fn from_system(sys: &LtiSystem) -> Self {
        Self {
            A: matrix_to_rows(&sys.a),
            B: matrix_to_rows(&sys.b),
            C: matrix_to_rows(&sys.c),
            Q: matrix_to_rows(&sys.q),
            R: matrix_to_rows(&sys.r),
            Sigma: matrix_to_rows(&sys.sigma),
        }
    }

    pub fn to_system(&self) -> Result<LtiSystem> {
        let mut b = rows_to_matrix(&self.B, "B")?;
        let a = rows_to_matrix(&self.A, "A")?;
        if b.nrows() == 0 {
            b = DMatrix::zeros(a.nrows(), 0);
        }
        LtiSystem::new(
            a,
            b,
            rows_to_matrix(&self.C, "C")?,
            rows_to_matrix(&self.Q, "Q")?,
            rows_to_matrix(&self.R, "R")?,
            rows_to_matrix(&self.Sigma, "Sigma")?,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemSource {
    Preset(String),
    Matrices(MatrixSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// x(0) is known to every estimator.
    #[default]
    Known,
    /// x(0) ~ N(x0, Σ); estimators start from x0.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ZetaInit {
    /// `ζ_i(0) = G_i x̂(0)`.
    #[default]
    State,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UndetectableConfig {
    pub p: Option<usize>,
    pub steps: usize,
    pub noise: bool,
}

impl Default for UndetectableConfig {
    fn default() -> Self {
        Self { p: None, steps: 30, noise: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub system: SystemSource,
    /// Feedback gain rows (`u = -K x`); defaults to the preset's controller.
    pub controller: Option<Vec<Vec<f64>>>,
    pub x0: Option<Vec<f64>>,
    pub init: InitMode,
    pub zeta_init: ZetaInit,
    /// Errors are measured on `output_map · x`; defaults to the preset's map.
    pub output_map: Option<Vec<Vec<f64>>>,
    pub attack: Option<AttackScenario>,
    pub gamma: f64,
    pub steps: usize,
    pub seeds: usize,
    pub seed: u64,
    pub solver: SolverConfig,
    pub tolerances: ToleranceConfig,
    pub undetectable: UndetectableConfig,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            system: SystemSource::Preset("pendulum".into()),
            controller: None,
            x0: None,
            init: InitMode::Known,
            zeta_init: ZetaInit::State,
            output_map: None,
            attack: None,
            gamma: 10.0,
            steps: 200,
            seeds: 10,
            seed: 0,
            solver: SolverConfig::default(),
            tolerances: ToleranceConfig::default(),
            undetectable: UndetectableConfig::default(),
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn check(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::InvalidGamma(self.gamma));
        }
        Ok(())
    }

    /// Resolve the plant and the experiment constants.
    pub fn resolve(&self) -> Result<Preset> {
        let mut p = match &self.system {
            SystemSource::Preset(name) => preset(name)?,
            SystemSource::Matrices(spec) => {
                let system = spec.to_system()?;
                let n = system.n();
                Preset {
                    name: "custom".into(),
                    system,
                    feedback: None,
                    x0: DVector::zeros(n),
                    output_map: None,
                    attacked: Vec::new(),
                    demo_p: 1,
                }
            }
        };
        let n = p.system.n();
        if let Some(k) = &self.controller {
            p.feedback = Some(rows_to_matrix(k, "controller")?);
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != n {
                return Err(Error::DimensionMismatch(format!("x0 has length {}, expected {n}", x0.len())));
            }
            p.x0 = DVector::from_row_slice(x0);
        }
        if let Some(map) = &self.output_map {
            let m = rows_to_matrix(map, "output_map")?;
            if m.ncols() != n {
                return Err(Error::DimensionMismatch("output_map must have n columns".into()));
            }
            p.output_map = Some(m);
        }
        if let Some(pp) = self.undetectable.p {
            p.demo_p = pp;
        }
        Ok(p)
    }

    /// Attack scenario from the config, or the preset's default sensors with a
    /// uniform(-1, 1) attack.
    pub fn attack_or_default(&self, preset: &Preset) -> AttackScenario {
        self.attack
            .clone()
            .unwrap_or_else(|| AttackScenario::uniform(preset.attacked.clone(), 1.0, 0))
    }
}

/// Every design-phase object for one plant.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub system: LtiSystem,
    pub tols: ToleranceConfig,
    pub partition: StatePartition,
    pub kalman: KalmanSteady,
    pub spectral: SpectralData,
    pub bank: LocalBank,
    pub coverage: CoverageData,
    pub indices: SparseIndices,
    pub canonical: CanonicalData,
}

pub fn build_pipeline(system: &LtiSystem, tols: &ToleranceConfig) -> Result<Pipeline> {
    let partition = validate_system(system, tols)?;
    let kalman = solve_steady_kalman(system, tols)?;
    let spectral = decompose(&kalman, tols)?;
    let bank = build_bank(system, &kalman, &spectral, tols)?;
    let cov = coverage(system, tols);
    let indices = sparse_indices(&cov, &partition);
    let canonical = build_canonical(&partition, &bank, &cov, tols)?;
    Ok(Pipeline {
        system: system.clone(),
        tols: *tols,
        partition,
        kalman,
        spectral,
        bank,
        coverage: cov,
        indices,
        canonical,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexNumber {
    pub re: f64,
    pub im: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub system: String,
    pub n: usize,
    pub m: usize,
    pub eigenvalues_a: Vec<ComplexNumber>,
    pub eigenvalues_closed_loop: Vec<ComplexNumber>,
    pub n_u: usize,
    pub n_s: usize,
    /// One-based sensor sets per one-based state.
    pub coverage_sets: Vec<Vec<usize>>,
    pub sparse_observability_index: i64,
    pub sparse_detectability_index: i64,
    pub tolerable_p: i64,
    pub h_unstable_patterns: Vec<Vec<Vec<u8>>>,
    pub cond_v: f64,
    pub cond_p: Vec<f64>,
    pub cond_m_tilde: f64,
    pub cond_w_script: f64,
    pub norm_f_inf: f64,
    pub riccati_iterations: usize,
    pub lyapunov_residual: f64,
    pub shift_identity_residual: f64,
}

fn complex_list(v: &[num_complex::Complex64]) -> Vec<ComplexNumber> {
    v.iter().map(|z| ComplexNumber { re: z.re, im: z.im }).collect()
}

pub fn analyze(preset: &Preset, tols: &ToleranceConfig) -> Result<AnalysisReport> {
    let pl = build_pipeline(&preset.system, tols)?;
    let canon = &pl.canonical;
    Ok(AnalysisReport {
        system: preset.name.clone(),
        n: pl.system.n(),
        m: pl.system.m(),
        eigenvalues_a: complex_list(&linalg::eigenvalues(&pl.system.a)),
        eigenvalues_closed_loop: complex_list(&pl.spectral.pi),
        n_u: pl.partition.n_u,
        n_s: pl.partition.n_s,
        coverage_sets: pl.coverage.e.iter().map(|e| e.iter().map(|i| i + 1).collect()).collect(),
        sparse_observability_index: pl.indices.obs_index,
        sparse_detectability_index: pl.indices.det_index,
        tolerable_p: pl.indices.tolerable_p,
        h_unstable_patterns: (0..canon.m).map(|i| canon.h_pattern(i)).collect(),
        cond_v: linalg::condition_number(&pl.spectral.v),
        cond_p: canon.p.iter().map(linalg::condition_number).collect(),
        cond_m_tilde: linalg::condition_number(&canon.m_tilde),
        cond_w_script: linalg::condition_number(&canon.w_script),
        norm_f_inf: canon.f_inf_norm,
        riccati_iterations: pl.kalman.iterations,
        lyapunov_residual: pl.bank.lyapunov_residual(),
        shift_identity_residual: pl.bank.shift_identity_residual(&pl.system),
    })
}

/// Per-step record of a run, in reported coordinates (`output_map · x`).
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub x: DVector<f64>,
    pub x_tilde: DVector<f64>,
    pub x_hat: DVector<f64>,
    pub x_hat_oracle: DVector<f64>,
    pub recovery_lhs: f64,
    pub recovery_holds: bool,
    pub gamma_o: f64,
    pub bound_ok: bool,
    pub stable_ok: bool,
    pub converged: bool,
    pub iterations: usize,
    /// `‖x̃ - x̂‖∞` in the estimator's own coordinates.
    pub secure_vs_kalman: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialSummary {
    pub seed: u64,
    pub mse_secure: f64,
    pub mse_kalman_attacked: f64,
    pub mse_kalman_oracle: f64,
    pub recovery_fraction: f64,
    pub bound_violations: usize,
    pub stable_violations: usize,
    pub nonconverged_steps: usize,
    /// Steps where the recovery condition held but `‖x̃ - x̂‖∞ > 1e-6`.
    pub recovery_counterexamples: usize,
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub summary: TrialSummary,
    pub steps: Vec<StepRecord>,
    pub trajectory: Trajectory,
}

/// Options for a single trial beyond the experiment config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOptions {
    pub gamma: f64,
    pub steps: usize,
    pub seed: u64,
    pub noise: bool,
    /// Evaluate the error bound (needs the oracle bank).
    pub bound: bool,
}

fn mse_term(map: Option<&DMatrix<f64>>, est: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let e = est - x;
    match map {
        Some(m) => (m * e).norm_squared(),
        None => e.norm_squared(),
    }
}

fn report(map: Option<&DMatrix<f64>>, v: &DVector<f64>) -> DVector<f64> {
    match map {
        Some(m) => m * v,
        None => v.clone(),
    }
}

/// Simulate one trajectory and run the secure estimator, the Kalman filter on the attacked
/// outputs and the oracle Kalman filter on the clean outputs.
pub fn run_trial(
    pl: &Pipeline,
    preset: &Preset,
    cfg: &ExperimentConfig,
    attack: &AttackScenario,
    opts: &TrialOptions,
) -> Result<TrialResult> {
    let sys = &pl.system;
    let controller = match &preset.feedback {
        Some(k) => Controller::Feedback(k.clone()),
        None => Controller::Zero,
    };
    let x0 = match cfg.init {
        InitMode::Known => InitialState::Known(preset.x0.clone()),
        InitMode::Random => InitialState::Random(preset.x0.clone()),
    };
    // attack draws are paired with the trial seed
    let mut scenario = attack.clone();
    scenario.seed = attack.seed.wrapping_add(opts.seed);
    let traj = simulate(sys, &controller, &x0, &scenario, opts.steps, opts.seed, opts.noise)?;

    let map = preset.output_map.as_ref();
    let x_hat0 = preset.x0.clone();
    let mut kf = FilterState::new(x_hat0.clone());
    let mut kf_o = FilterState::new(x_hat0.clone());
    let (mut bank_est, mut bank_o) = match cfg.zeta_init {
        ZetaInit::State => (LocalEstimates::from_state(&pl.bank, &x_hat0), LocalEstimates::from_state(&pl.bank, &x_hat0)),
        ZetaInit::Zero => (LocalEstimates::zeros(&pl.bank), LocalEstimates::zeros(&pl.bank)),
    };
    let mut solver = SecureEstimator::new(&pl.canonical)?;
    let rec_map = RecoveryMap::new(&pl.canonical, &pl.bank);
    let solver_cfg = SolverConfig { gamma: opts.gamma, ..cfg.solver };

    let mut steps = Vec::with_capacity(opts.steps);
    let mut se = [0.0f64; 3];
    let mut summary = TrialSummary {
        seed: opts.seed,
        mse_secure: 0.0,
        mse_kalman_attacked: 0.0,
        mse_kalman_oracle: 0.0,
        recovery_fraction: 0.0,
        bound_violations: 0,
        stable_violations: 0,
        nonconverged_steps: 0,
        recovery_counterexamples: 0,
    };
    let mut holds_count = 0usize;
    for k in 0..opts.steps {
        let u = &traj.u[k];
        let x = &traj.x[k + 1];
        kf = filter_step(&pl.kalman, sys, &kf, u, &traj.y[k])?;
        kf_o = filter_step(&pl.kalman, sys, &kf_o, u, &traj.z[k])?;
        bank_est = bank_step(&pl.bank, &bank_est, u, &traj.y[k])?;
        bank_o = bank_step(&pl.bank, &bank_o, u, &traj.z[k])?;
        let y_stack = assemble_y(&pl.canonical, &bank_est)?;
        let sol = solver.solve(&pl.canonical, &y_stack, &solver_cfg)?;
        let eps = pl.bank.epsilon(&bank_est, x);
        let lhs = rec_map.lhs(&eps, &kf.x_hat);
        let holds = lhs <= opts.gamma;
        let diff = (&sol.x_tilde - &kf.x_hat).amax();
        if holds {
            holds_count += 1;
            if diff > 1e-6 {
                summary.recovery_counterexamples += 1;
            }
        }
        let (gamma_o, bound_ok, stable_ok) = if opts.bound {
            let eps_o = pl.bank.epsilon(&bank_o, x);
            let b = evaluate_bound_with(&pl.canonical, &rec_map, &sol, &bank_o, &eps_o, &kf_o.x_hat, opts.gamma);
            let stable_ok = b.stable_part <= b.stable_limit * (1.0 + 1e-6) + 1e-12;
            (b.gamma_o, b.violations.is_empty(), stable_ok)
        } else {
            (f64::NAN, true, true)
        };
        if !bound_ok {
            summary.bound_violations += 1;
        }
        if !stable_ok {
            summary.stable_violations += 1;
        }
        if !sol.converged {
            summary.nonconverged_steps += 1;
        }
        se[0] += mse_term(map, &sol.x_tilde, x);
        se[1] += mse_term(map, &kf.x_hat, x);
        se[2] += mse_term(map, &kf_o.x_hat, x);
        steps.push(StepRecord {
            k: k + 1,
            x: report(map, x),
            x_tilde: report(map, &sol.x_tilde),
            x_hat: report(map, &kf.x_hat),
            x_hat_oracle: report(map, &kf_o.x_hat),
            recovery_lhs: lhs,
            recovery_holds: holds,
            gamma_o,
            bound_ok,
            stable_ok,
            converged: sol.converged,
            iterations: sol.iterations,
            secure_vs_kalman: diff,
        });
    }
    let nf = opts.steps as f64;
    summary.mse_secure = se[0] / nf;
    summary.mse_kalman_attacked = se[1] / nf;
    summary.mse_kalman_oracle = se[2] / nf;
    summary.recovery_fraction = holds_count as f64 / nf;
    Ok(TrialResult { summary, steps, trajectory: traj })
}

pub fn write_steps_csv(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    let n = steps.first().map_or(0, |s| s.x.len());
    let mut header = vec!["k".to_string()];
    for prefix in ["x", "x_tilde", "x_hat", "x_hat_oracle"] {
        header.extend((1..=n).map(|i| format!("{prefix}_{i}")));
    }
    header.extend(
        ["recovery_lhs", "recovery_holds", "gamma_o", "bound_ok", "stable_ok", "converged", "iterations"]
            .iter()
            .map(|s| s.to_string()),
    );
    wtr.write_record(&header)?;
    for s in steps {
        let mut rec = vec![s.k.to_string()];
        for v in [&s.x, &s.x_tilde, &s.x_hat, &s.x_hat_oracle] {
            rec.extend(v.iter().map(|x| format!("{x:e}")));
        }
        rec.push(format!("{:e}", s.recovery_lhs));
        rec.push(u8::from(s.recovery_holds).to_string());
        rec.push(format!("{:e}", s.gamma_o));
        rec.push(u8::from(s.bound_ok).to_string());
        rec.push(u8::from(s.stable_ok).to_string());
        rec.push(u8::from(s.converged).to_string());
        rec.push(s.iterations.to_string());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Mean and sample standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MseReport {
    pub mse_secure: f64,
    pub mse_kalman_attacked: f64,
    pub mse_kalman_oracle: f64,
    pub std_secure: f64,
    pub std_kalman_attacked: f64,
    pub std_kalman_oracle: f64,
    pub per_seed: Vec<TrialSummary>,
}

impl MseReport {
    fn from_trials(per_seed: Vec<TrialSummary>) -> Self {
        let col = |f: fn(&TrialSummary) -> f64| per_seed.iter().map(f).collect::<Vec<_>>();
        let (ms, ss) = mean_std(&col(|t| t.mse_secure));
        let (ma, sa) = mean_std(&col(|t| t.mse_kalman_attacked));
        let (mo, so) = mean_std(&col(|t| t.mse_kalman_oracle));
        Self {
            mse_secure: ms,
            mse_kalman_attacked: ma,
            mse_kalman_oracle: mo,
            std_secure: ss,
            std_kalman_attacked: sa,
            std_kalman_oracle: so,
            per_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub system: String,
    pub gamma: f64,
    pub steps: usize,
    pub prng: String,
    pub attack: AttackScenario,
    pub report: MseReport,
}

fn seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.seeds as u64).map(|s| cfg.seed.wrapping_add(s)).collect()
}

/// Run every seed of the configured experiment; writes per-step CSVs and a summary when
/// `cfg.out` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.check()?;
    let preset = cfg.resolve()?;
    let pl = build_pipeline(&preset.system, &cfg.tolerances)?;
    let attack = cfg.attack.clone().unwrap_or_else(AttackScenario::none);
    let results: Vec<TrialResult> = seeds(cfg)
        .into_par_iter()
        .map(|seed| {
            let opts = TrialOptions { gamma: cfg.gamma, steps: cfg.steps, seed, noise: true, bound: true };
            run_trial(&pl, &preset, cfg, &attack, &opts)
        })
        .collect::<Result<_>>()?;
    let summary = ExperimentSummary {
        system: preset.name.clone(),
        gamma: cfg.gamma,
        steps: cfg.steps,
        prng: PRNG.into(),
        attack,
        report: MseReport::from_trials(results.iter().map(|r| r.summary.clone()).collect()),
    };
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        for r in &results {
            write_steps_csv(&dir.join(format!("steps_seed{}.csv", r.summary.seed)), &r.steps)?;
            r.trajectory.write_csv(&dir.join(format!("trajectory_seed{}.csv", r.summary.seed)))?;
        }
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaPoint {
    pub gamma: f64,
    pub no_attack: MseReport,
    pub under_attack: MseReport,
}

/// MSE with and without attack for each γ; the same seeds are used at every γ.
pub fn sweep_gamma(cfg: &ExperimentConfig, gammas: &[f64]) -> Result<Vec<GammaPoint>> {
    cfg.check()?;
    if gammas.is_empty() {
        return Err(Error::Config("gamma list is empty".into()));
    }
    if let Some(g) = gammas.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
        return Err(Error::InvalidGamma(*g));
    }
    let preset = cfg.resolve()?;
    let pl = build_pipeline(&preset.system, &cfg.tolerances)?;
    let attack = cfg.attack_or_default(&preset);
    let none = AttackScenario::none();
    let jobs: Vec<(usize, bool, u64)> = (0..gammas.len())
        .flat_map(|g| [false, true].into_iter().flat_map(move |att| seeds(cfg).into_iter().map(move |s| (g, att, s))))
        .collect();
    let results: Vec<((usize, bool), TrialSummary)> = jobs
        .into_par_iter()
        .map(|(g, att, seed)| {
            let opts = TrialOptions { gamma: gammas[g], steps: cfg.steps, seed, noise: true, bound: false };
            let sc = if att { &attack } else { &none };
            run_trial(&pl, &preset, cfg, sc, &opts).map(|r| ((g, att), r.summary))
        })
        .collect::<Result<_>>()?;
    let mut points: Vec<GammaPoint> = (0..gammas.len())
        .map(|g| {
            let pick = |att: bool| {
                MseReport::from_trials(
                    results.iter().filter(|((gi, a), _)| *gi == g && *a == att).map(|(_, s)| s.clone()).collect(),
                )
            };
            GammaPoint { gamma: gammas[g], no_attack: pick(false), under_attack: pick(true) }
        })
        .collect();
    points.sort_by(|a, b| a.gamma.partial_cmp(&b.gamma).unwrap_or(std::cmp::Ordering::Equal));
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        let mut wtr = csv::Writer::from_path(dir.join("sweep_gamma.csv"))?;
        wtr.write_record(["gamma", "mse_no_attack", "mse_under_attack", "std_no_attack", "std_under_attack", "mse_kalman_oracle"])?;
        for p in &points {
            wtr.write_record(&[
                p.gamma.to_string(),
                format!("{:e}", p.no_attack.mse_secure),
                format!("{:e}", p.under_attack.mse_secure),
                format!("{:e}", p.no_attack.std_secure),
                format!("{:e}", p.under_attack.std_secure),
                format!("{:e}", p.no_attack.mse_kalman_oracle),
            ])?;
        }
        wtr.flush()?;
        fs::write(dir.join("sweep_gamma.json"), serde_json::to_string_pretty(&points)?)?;
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MagnitudePoint {
    pub magnitude: f64,
    pub report: MseReport,
}

/// MSE of the three estimators for each uniform attack magnitude at fixed γ.
pub fn sweep_attack_magnitude(cfg: &ExperimentConfig, magnitudes: &[f64]) -> Result<Vec<MagnitudePoint>> {
    cfg.check()?;
    if magnitudes.is_empty() {
        return Err(Error::Config("magnitude list is empty".into()));
    }
    let preset = cfg.resolve()?;
    let pl = build_pipeline(&preset.system, &cfg.tolerances)?;
    let base = cfg.attack_or_default(&preset);
    let jobs: Vec<(usize, u64)> =
        (0..magnitudes.len()).flat_map(|i| seeds(cfg).into_iter().map(move |s| (i, s))).collect();
    let results: Vec<(usize, TrialSummary)> = jobs
        .into_par_iter()
        .map(|(i, seed)| {
            let sc = AttackScenario {
                compromised: base.compromised.clone(),
                generator: AttackGenerator::Uniform { magnitude: magnitudes[i] },
                seed: base.seed,
            };
            let opts = TrialOptions { gamma: cfg.gamma, steps: cfg.steps, seed, noise: true, bound: false };
            run_trial(&pl, &preset, cfg, &sc, &opts).map(|r| (i, r.summary))
        })
        .collect::<Result<_>>()?;
    let mut points: Vec<MagnitudePoint> = (0..magnitudes.len())
        .map(|i| MagnitudePoint {
            magnitude: magnitudes[i],
            report: MseReport::from_trials(results.iter().filter(|(j, _)| *j == i).map(|(_, s)| s.clone()).collect()),
        })
        .collect();
    points.sort_by(|a, b| a.magnitude.partial_cmp(&b.magnitude).unwrap_or(std::cmp::Ordering::Equal));
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        let mut wtr = csv::Writer::from_path(dir.join("sweep_attack.csv"))?;
        wtr.write_record(["magnitude", "mse_secure", "mse_kalman_attacked", "mse_kalman_oracle", "std_secure", "std_kalman_attacked"])?;
        for p in &points {
            wtr.write_record(&[
                p.magnitude.to_string(),
                format!("{:e}", p.report.mse_secure),
                format!("{:e}", p.report.mse_kalman_attacked),
                format!("{:e}", p.report.mse_kalman_oracle),
                format!("{:e}", p.report.std_secure),
                format!("{:e}", p.report.std_kalman_attacked),
            ])?;
        }
        wtr.flush()?;
        fs::write(dir.join("sweep_attack.json"), serde_json::to_string_pretty(&points)?)?;
    }
    Ok(points)
}

/// Fraction of (trial, step) pairs of attack-free runs where the recovery condition holds.
pub fn estimate_recovery_probability(
    pl: &Pipeline,
    preset: &Preset,
    gamma: f64,
    n_trials: usize,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    if n_trials == 0 || steps == 0 {
        return Err(Error::EmptyHorizon);
    }
    let map = RecoveryMap::new(&pl.canonical, &pl.bank);
    let controller = preset.feedback.clone().map_or(Controller::Zero, Controller::Feedback);
    let mut holds = 0usize;
    for t in 0..n_trials as u64 {
        let traj = simulate(
            &pl.system,
            &controller,
            &InitialState::Known(preset.x0.clone()),
            &AttackScenario::none(),
            steps,
            seed.wrapping_add(t),
            true,
        )?;
        let mut kf = FilterState::new(preset.x0.clone());
        let mut est = LocalEstimates::from_state(&pl.bank, &preset.x0);
        for k in 0..steps {
            kf = filter_step(&pl.kalman, &pl.system, &kf, &traj.u[k], &traj.y[k])?;
            est = bank_step(&pl.bank, &est, &traj.u[k], &traj.y[k])?;
            let eps = pl.bank.epsilon(&est, &traj.x[k + 1]);
            if map.lhs(&eps, &kf.x_hat) <= gamma {
                holds += 1;
            }
        }
    }
    Ok(holds as f64 / (n_trials * steps) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UndetectableReport {
    pub system: String,
    pub p: usize,
    pub eigenvalue: ComplexNumber,
    /// One-based sensors.
    pub target_set: Vec<usize>,
    pub steps: usize,
    pub max_output_gap: f64,
    pub max_output_gap_noise_free: f64,
    pub state_gap: Vec<f64>,
    pub state_gap_noise_free: Vec<f64>,
    /// Least-squares slope of `ln ‖x1 - x2‖` over k (noise-free run).
    pub log_gap_slope: f64,
    pub log_abs_eigenvalue: f64,
}

fn log_slope(gaps: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> =
        gaps.iter().enumerate().filter(|(_, g)| **g > 0.0).map(|(k, g)| (k as f64, g.ln())).collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Build the indistinguishable pair for a plant that is not 2p-sparse detectable.
pub fn undetectable_demo(cfg: &ExperimentConfig) -> Result<UndetectableReport> {
    let preset = cfg.resolve()?;
    let tols = &cfg.tolerances;
    let p = preset.demo_p;
    let steps = cfg.undetectable.steps;
    let cert = find_certificate(&preset.system, p, tols)?;
    let noisy = build_undetectable_attack(
        &preset.system,
        &cert.target_set,
        &cert.eigenvector,
        cert.eigenvalue,
        steps,
        cfg.seed,
        cfg.undetectable.noise,
        tols,
    )?;
    let quiet = build_undetectable_attack(
        &preset.system,
        &cert.target_set,
        &cert.eigenvector,
        cert.eigenvalue,
        steps,
        cfg.seed,
        false,
        tols,
    )?;
    let gaps_quiet = quiet.state_gaps();
    let report = UndetectableReport {
        system: preset.name.clone(),
        p,
        eigenvalue: ComplexNumber { re: cert.eigenvalue.re, im: cert.eigenvalue.im },
        target_set: cert.target_set.iter().map(|i| i + 1).collect(),
        steps,
        max_output_gap: noisy.max_output_gap(),
        max_output_gap_noise_free: quiet.max_output_gap(),
        state_gap: noisy.state_gaps(),
        log_gap_slope: log_slope(&gaps_quiet),
        state_gap_noise_free: gaps_quiet,
        log_abs_eigenvalue: cert.eigenvalue.norm().ln(),
    };
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        noisy.system1.write_csv(&dir.join("undetectable_system1.csv"))?;
        noisy.system2.write_csv(&dir.join("undetectable_system2.csv"))?;
        fs::write(dir.join("undetectable.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}
