use serde::{Deserialize, Serialize};

/// Numerical thresholds shared by the design-phase checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToleranceConfig {
    /// An eigenvalue is unstable when `|λ| >= 1 - stability_tol`.
    pub stability_tol: f64,
    /// Relative singular-value threshold for rank decisions.
    pub rank_tol: f64,
    /// Relative column-norm threshold for coverage-set membership.
    pub col_tol: f64,
    /// Off-diagonal block entries of A must be below this (absolute) to count as zero.
    pub block_tol: f64,
    /// Relative gap for the distinct-eigenvalue checks on A - KCA.
    pub eig_gap_rel: f64,
    /// Riccati fixed-point tolerance (relative, infinity norm).
    pub riccati_tol: f64,
    pub riccati_max_iter: usize,
    /// Upper bound on cond(V) of the closed-loop eigenvectors.
    pub max_cond_v: f64,
    /// Upper bound on cond(P_i).
    pub max_cond_p: f64,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        Self {
            stability_tol: 1e-9,
            rank_tol: 1e-8,
            col_tol: 1e-8,
            block_tol: 1e-12,
            eig_gap_rel: 1e-8,
            riccati_tol: 1e-12,
            riccati_max_iter: 1_000_000,
            max_cond_v: 1e12,
            max_cond_p: 1e10,
        }
    }
}
