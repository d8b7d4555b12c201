//! Jump-linear-system view of the delayed dual iteration.
//!
//! Stacking the last q dual iterates into `Y = [yᵏ; yᵏ⁻¹; …; yᵏ⁻q⁺¹]` turns
//! the update with staleness ξ into a first-order companion recursion
//! `Y⁺ = W_ξ Y + C`: every mode has identity blocks on the subdiagonal, and
//! its first block row applies `I` to the newest iterate and `−R` to the one
//! ξ steps back.
//!
//! A coordinator that replaces heterogeneous per-node ages by their maximum
//! (the oldest value it holds) collapses the qᴺ joint age patterns to q
//! modes. The switching law of the collapsed chain is the distribution of
//! that maximum, computed in closed form by [`aggregate_probability`]; the
//! brute-force joint enumeration backing that formula is kept in
//! [`enumeration`] as an oracle for small N and q.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::qp::SeparableQP;

/// Slack allowed when checking that probability vectors sum to one.
pub const PROBABILITY_TOLERANCE: f64 = 1e-12;

/// Per-node distributions of the age of the value each node contributes.
///
/// Entry j of node i's vector is the probability that node i's contribution
/// is j steps old (j = 0 … q−1). The distributions are stationary and
/// independent across nodes and steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayModel {
    q: usize,
    per_node: Vec<Vec<f64>>,
}

impl DelayModel {
    /// Validates and exactly normalizes each node's distribution (inputs may
    /// carry rounding residue up to [`PROBABILITY_TOLERANCE`]).
    pub fn new(q: usize, per_node: Vec<Vec<f64>>) -> Result<Self> {
        if q == 0 {
            return Err(Error::InvalidInput("maximum delay q must be at least 1".into()));
        }
        if per_node.is_empty() {
            return Err(Error::InvalidInput("at least one node distribution is required".into()));
        }
        let per_node = per_node
            .into_iter()
            .enumerate()
            .map(|(i, mut probs)| {
                if probs.len() != q {
                    return Err(Error::Dimension(format!(
                        "node {i}: distribution has length {}, expected q = {q}",
                        probs.len()
                    )));
                }
                if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "node {i}: probabilities must be finite and nonnegative"
                    )));
                }
                let sum: f64 = probs.iter().sum();
                if (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
                    return Err(Error::InvalidInput(format!(
                        "node {i}: probabilities sum to {sum}, expected 1"
                    )));
                }
                probs.iter_mut().for_each(|p| *p /= sum);
                Ok(probs)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { q, per_node })
    }

    /// Every node always contributes a fresh value (age 0).
    pub fn no_delay(n_nodes: usize, q: usize) -> Result<Self> {
        let mut probs = vec![0.0; q];
        probs[0] = 1.0;
        Self::new(q, vec![probs; n_nodes])
    }

    /// Every age equally likely at every node.
    pub fn uniform(n_nodes: usize, q: usize) -> Result<Self> {
        Self::new(q, vec![vec![1.0 / q as f64; q]; n_nodes])
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n_nodes(&self) -> usize {
        self.per_node.len()
    }

    pub fn per_node(&self) -> &[Vec<f64>] {
        &self.per_node
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.per_node[i]
    }
}

/// Distribution of the maximum age across nodes: entry r−1 is the
/// probability that the oldest contribution is r−1 steps old.
///
/// Computed by telescoping the joint CDF: the probability that every node's
/// age is ≤ a is the product of per-node CDFs, so
/// `π_r = Πᵢ cdfᵢ(r) − Πᵢ cdfᵢ(r−1)`.
pub fn aggregate_probability(dm: &DelayModel) -> Result<Vec<f64>> {
    let q = dm.q();
    let mut pi = Vec::with_capacity(q);
    let mut prev_cum = 0.0;
    let mut cdfs = vec![0.0; dm.n_nodes()];
    for r in 0..q {
        for (i, cdf) in cdfs.iter_mut().enumerate() {
            *cdf += dm.node(i)[r];
        }
        let cum: f64 = cdfs.iter().product();
        pi.push(cum - prev_cum);
        prev_cum = cum;
    }
    // Telescoping differences of floating-point products can leave residue of
    // a few ulps; anything larger signals invalid input.
    for p in pi.iter_mut() {
        if *p < 0.0 {
            if *p < -PROBABILITY_TOLERANCE {
                return Err(Error::InvalidInput(format!(
                    "aggregated probability is negative beyond rounding ({p:.3e})"
                )));
            }
            *p = 0.0;
        }
    }
    let total: f64 = pi.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "aggregated probabilities sum to {total}, expected 1"
        )));
    }
    pi.iter_mut().for_each(|p| *p /= total);
    Ok(pi)
}

/// The collapsed q-mode switched system `Y⁺ = W_σ Y + C` with its switching
/// distribution.
#[derive(Debug, Clone)]
pub struct SwitchedSystem {
    modes: Vec<DMatrix<f64>>,
    pi: Vec<f64>,
    c: DVector<f64>,
    r: DMatrix<f64>,
    q: usize,
    m: usize,
}

impl SwitchedSystem {
    /// Mode matrices, indexed by age: `modes()[a]` applies `−R` to the
    /// iterate a steps back.
    pub fn modes(&self) -> &[DMatrix<f64>] {
        &self.modes
    }

    /// Switching distribution over ages 0 … q−1.
    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    /// Affine offset `C = [B; 0; …; 0]`.
    pub fn offset(&self) -> &DVector<f64> {
        &self.c
    }

    /// The dual-map gain `R = α·AQ⁻¹Aᵀ` each mode applies at its staleness
    /// tap.
    pub fn r_matrix(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Dual dimension m (each of the q stacked blocks has this length).
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.q * self.m
    }

    /// The zero-staleness mode, identical to the synchronous iteration matrix.
    pub fn sync_matrix(&self) -> &DMatrix<f64> {
        &self.modes[0]
    }

    /// The maximum-staleness mode, identical to the deterministic-asynchronous
    /// iteration matrix.
    pub fn det_async_matrix(&self) -> &DMatrix<f64> {
        &self.modes[self.q - 1]
    }

    /// Same modes under a different switching distribution.
    pub fn with_switching(&self, pi: Vec<f64>) -> Result<Self> {
        let pi = validate_switching(self.q, pi)?;
        Ok(Self { pi, ..self.clone() })
    }

    /// One transition `Y⁺ = W_mode·Y + C`.
    pub fn step(&self, state: &AugmentedState, mode: usize) -> Result<AugmentedState> {
        if mode >= self.q {
            return Err(Error::InvalidInput(format!(
                "mode index {mode} out of range (q = {})",
                self.q
            )));
        }
        if state.stack().len() != self.dim() {
            return Err(Error::Dimension(format!(
                "state has length {}, expected {}",
                state.stack().len(),
                self.dim()
            )));
        }
        Ok(AugmentedState { stack: &self.modes[mode] * state.stack() + &self.c })
    }
}

fn validate_switching(q: usize, mut pi: Vec<f64>) -> Result<Vec<f64>> {
    if pi.len() != q {
        return Err(Error::Dimension(format!(
            "switching distribution has length {}, expected q = {q}",
            pi.len()
        )));
    }
    if pi.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidInput("switching probabilities must be finite and nonnegative".into()));
    }
    let sum: f64 = pi.iter().sum();
    if (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
        return Err(Error::InvalidInput(format!(
            "switching probabilities sum to {sum}, expected 1"
        )));
    }
    pi.iter_mut().for_each(|p| *p /= sum);
    Ok(pi)
}

/// The stack `[yᵏ; yᵏ⁻¹; …; yᵏ⁻q⁺¹]` of the last q dual iterates.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    stack: DVector<f64>,
}

impl AugmentedState {
    pub fn new(stack: DVector<f64>, q: usize, m: usize) -> Result<Self> {
        if stack.len() != q * m {
            return Err(Error::Dimension(format!(
                "stack has length {}, expected q·m = {}",
                stack.len(),
                q * m
            )));
        }
        Ok(Self { stack })
    }

    /// Back-fills the entire history with the initial dual value, so the
    /// first step is well defined under every mode.
    pub fn from_initial(y0: &DVector<f64>, q: usize) -> Self {
        let m = y0.len();
        let mut stack = DVector::zeros(q * m);
        for blk in 0..q {
            stack.rows_mut(blk * m, m).copy_from(y0);
        }
        Self { stack }
    }

    pub fn stack(&self) -> &DVector<f64> {
        &self.stack
    }

    /// The newest dual iterate (first block).
    pub fn current(&self, m: usize) -> DVector<f64> {
        self.stack.rows(0, m).into_owned()
    }
}

/// Companion matrix for a given staleness age: first block row has `I` at
/// block column 0 and `−R` added at block column `age`; identity blocks sit
/// on the subdiagonal.
fn companion_mode(r: &DMatrix<f64>, q: usize, age: usize) -> DMatrix<f64> {
    let m = r.nrows();
    let mut w = DMatrix::<f64>::zeros(q * m, q * m);
    for j in 0..m {
        w[(j, j)] = 1.0;
    }
    {
        let mut target = w.view_mut((0, age * m), (m, m));
        target -= r;
    }
    for blk in 1..q {
        for j in 0..m {
            w[(blk * m + j, (blk - 1) * m + j)] = 1.0;
        }
    }
    w
}

fn stacked_offset(b: &DVector<f64>, q: usize) -> DVector<f64> {
    let m = b.len();
    let mut c = DVector::zeros(q * m);
    c.rows_mut(0, m).copy_from(b);
    c
}

/// Builds the collapsed q-mode system for a problem under a delay model: one
/// mode per possible maximum age, switching per [`aggregate_probability`].
/// The qᴺ joint age patterns never materialize.
pub fn reduce_modes(qp: &SeparableQP, dm: &DelayModel) -> Result<SwitchedSystem> {
    if dm.n_nodes() != qp.n_blocks() {
        return Err(Error::Dimension(format!(
            "delay model covers {} nodes but the problem has {} blocks",
            dm.n_nodes(),
            qp.n_blocks()
        )));
    }
    let coeffs = qp.dual_map_coefficients()?;
    let q = dm.q();
    let modes = (0..q).map(|age| companion_mode(&coeffs.r, q, age)).collect();
    Ok(SwitchedSystem {
        modes,
        pi: aggregate_probability(dm)?,
        c: stacked_offset(&coeffs.offset, q),
        r: coeffs.r,
        q,
        m: qp.constraint_dim(),
    })
}

/// Companion form of the synchronous iteration (age 0 every step).
pub fn build_sync_system(qp: &SeparableQP, q: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if q == 0 {
        return Err(Error::InvalidInput("q must be at least 1".into()));
    }
    let coeffs = qp.dual_map_coefficients()?;
    Ok((companion_mode(&coeffs.r, q, 0), stacked_offset(&coeffs.offset, q)))
}

/// Companion form of the deterministic-asynchronous iteration, which always
/// applies the maximally stale iterate (age q−1).
pub fn build_det_async_system(qp: &SeparableQP, q: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if q == 0 {
        return Err(Error::InvalidInput("q must be at least 1".into()));
    }
    let coeffs = qp.dual_map_coefficients()?;
    Ok((companion_mode(&coeffs.r, q, q - 1), stacked_offset(&coeffs.offset, q)))
}

/// Draws a mode index with probability `pi[index]`, by inverting the
/// cumulative distribution at one uniform variate. Deterministic for a fixed
/// generator state.
pub fn sample_mode<R: Rng + ?Sized>(pi: &[f64], rng: &mut R) -> usize {
    debug_assert!(!pi.is_empty());
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (idx, p) in pi.iter().enumerate() {
        cum += p;
        if u < cum {
            return idx;
        }
    }
    pi.len() - 1 // u landed in the rounding residue above the last boundary
}

/// Brute-force oracle over all qᴺ joint age patterns. Production paths use
/// the collapsed q-mode system; this module exists so tests and diagnostics
/// can check the collapse against the raw product chain on small cases.
pub mod enumeration {
    use super::*;

    /// Guard on qᴺ; covers every supported diagnostic size with room to spare.
    pub const MAX_OUTCOMES: usize = 1 << 20;

    /// One joint assignment of ages to nodes, with its product probability.
    #[derive(Debug, Clone)]
    pub struct JointOutcome {
        pub ages: Vec<usize>,
        pub probability: f64,
        pub max_age: usize,
    }

    /// All qᴺ joint outcomes of independent per-node age draws.
    pub fn enumerate_joint_ages(dm: &DelayModel) -> Result<Vec<JointOutcome>> {
        let (n, q) = (dm.n_nodes(), dm.q());
        let total = q
            .checked_pow(n as u32)
            .filter(|&t| t <= MAX_OUTCOMES)
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "joint enumeration of q^N = {q}^{n} outcomes exceeds the {MAX_OUTCOMES} cap"
                ))
            })?;
        let mut outcomes = Vec::with_capacity(total);
        let mut ages = vec![0usize; n];
        loop {
            let probability = ages
                .iter()
                .enumerate()
                .map(|(i, &a)| dm.node(i)[a])
                .product();
            let max_age = ages.iter().copied().max().unwrap_or(0);
            outcomes.push(JointOutcome { ages: ages.clone(), probability, max_age });
            // odometer increment over base-q digits
            let mut pos = 0;
            loop {
                if pos == n {
                    return Ok(outcomes);
                }
                ages[pos] += 1;
                if ages[pos] < q {
                    break;
                }
                ages[pos] = 0;
                pos += 1;
            }
        }
    }

    /// Distribution of the maximum age, by direct summation over the joint
    /// outcomes — the independent check on [`aggregate_probability`].
    pub fn aggregated_frequencies(dm: &DelayModel) -> Result<Vec<f64>> {
        let mut freq = vec![0.0; dm.q()];
        for outcome in enumerate_joint_ages(dm)? {
            freq[outcome.max_age] += outcome.probability;
        }
        Ok(freq)
    }

    /// Raw (uncollapsed) mode matrix for one joint age pattern: block i's
    /// share `−Φᵢ` lands at the tap matching its own age.
    pub fn heterogeneous_mode(
        phis: &[DMatrix<f64>],
        q: usize,
        ages: &[usize],
    ) -> Result<DMatrix<f64>> {
        if ages.len() != phis.len() {
            return Err(Error::Dimension(format!(
                "{} ages supplied for {} blocks",
                ages.len(),
                phis.len()
            )));
        }
        if let Some(&bad) = ages.iter().find(|&&a| a >= q) {
            return Err(Error::InvalidInput(format!("age {bad} out of range (q = {q})")));
        }
        let m = phis[0].nrows();
        let mut w = DMatrix::<f64>::zeros(q * m, q * m);
        for j in 0..m {
            w[(j, j)] = 1.0;
        }
        for (phi, &age) in phis.iter().zip(ages) {
            let mut target = w.view_mut((0, age * m), (m, m));
            target -= phi;
        }
        for blk in 1..q {
            for j in 0..m {
                w[(blk * m + j, (blk - 1) * m + j)] = 1.0;
            }
        }
        Ok(w)
    }
}
