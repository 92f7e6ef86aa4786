//! Secure state estimation for linear Gaussian systems under sparse sensor attacks.
//!
//! The pipeline runs in design-phase order:
//!
//! 1. [`system`]: plant model, validation of the unstable-first block form, simulation and
//!    attack generation.
//! 2. [`kalman`]: steady-state gain and the fixed-gain filter.
//! 3. [`decomposition`]: the filter split into one local estimator per sensor.
//! 4. [`canonical`]: coverage sets, sparse observability indices, canonical transforms and
//!    the matrices of the fused problem.
//! 5. [`estimator`]: least squares, the secure L1-regularized estimator, the baseline, and
//!    the recovery/bound diagnostics.
//! 6. [`harness`]: presets and experiment drivers used by the CLI.

pub mod canonical;
pub mod decomposition;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod kalman;
pub mod linalg;
pub mod solver;
pub mod system;
pub mod tolerance;

pub use canonical::{build_canonical, coverage, sparse_indices, CanonicalData, CoverageData, SparseIndices};
pub use decomposition::{bank_step, build_bank, check_g_structure, decompose, LocalBank, LocalEstimates, SpectralData};
pub use error::{Error, Result};
pub use estimator::{
    check_recovery_condition, evaluate_bound, solve_least_squares, solve_baseline, solve_secure,
    BoundReport, SecureSolve, SolverConfig,
};
pub use kalman::{filter_step, solve_steady_kalman, FilterState, KalmanSteady};
pub use system::{
    build_undetectable_attack, gen_sparse_attack, simulate, validate_system, AttackGenerator, AttackScenario,
    Controller, InitialState, LtiSystem, StatePartition, Trajectory,
};
pub use tolerance::ToleranceConfig;
