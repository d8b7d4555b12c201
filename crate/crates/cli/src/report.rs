//! Structured stability report emitted by `adqp analyze` (pretty JSON).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub tool_version: String,
    /// Seed recorded in the problem file (generation provenance).
    pub seed: u64,
    /// Content hash of the problem file bytes.
    pub problem_hash: String,
    pub n_blocks: usize,
    pub constraint_dim: usize,
    pub q: usize,
    pub alpha: f64,
    /// Maximum-age switching distribution aggregated over nodes; entry a is
    /// the probability that the oldest contribution in a step is a iterations
    /// old.
    pub aggregated_pi: Vec<f64>,
    /// ρ of the second-moment map over the reduced mode set.
    pub ms_spectral_radius: f64,
    /// Mean-square convergence verdict (guard-banded strict inequality).
    pub is_ms_convergent: bool,
    /// ρ(Λ), the contraction factor of the mean dynamics.
    pub lambda_spectral_radius: f64,
    /// Dual fixed point y* (newest history block); `null` when the mean map
    /// has no unique fixed point.
    pub fixed_point: Option<Vec<f64>>,
    pub notes: Vec<String>,
    /// Cross-check against full joint-age enumeration; present only when
    /// requested via `--full-enumeration`.
    pub full_enumeration: Option<FullEnumerationCheck>,
}

/// Second-moment verdict recomputed from every joint age assignment (qᴺ
/// outcomes) instead of the reduced q-mode set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FullEnumerationCheck {
    pub n_outcomes: usize,
    pub aggregated_pi: Vec<f64>,
    pub ms_spectral_radius: f64,
    pub is_ms_convergent: bool,
}
