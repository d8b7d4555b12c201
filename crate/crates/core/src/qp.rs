//! Separable quadratic programs coupled by a shared linear constraint, and
//! the block primal / dual-ascent update maps they induce.
//!
//! The problem is `minimize ½·Σᵢ xᵢᵀQᵢxᵢ + cᵢᵀxᵢ subject to Σᵢ Aᵢxᵢ ≤ b`,
//! handled through its dual: each block minimizes its Lagrangian term at the
//! current multiplier `y`, and the multiplier ascends along the constraint
//! residual. The nonnegativity projection on `y` is deliberately absent from
//! these maps (the dynamics analyzed elsewhere in this crate are the
//! unprojected linear ones); a clamp is available in the executor only.
//!
//! All update maps are affine in `y`:
//!   - block primal:  xᵢ = −Qᵢ⁻¹(Aᵢᵀy + cᵢ)
//!   - dual ascent:   y⁺ = y + α(Σᵢ Aᵢxᵢ − b) = (I − R)y + B
//! with `R = α·AQ⁻¹Aᵀ` and `B = −α(AQ⁻¹c + b)`. The affine coefficients and
//! the closed-form optimum `y* = −(AQ⁻¹Aᵀ)⁻¹(AQ⁻¹c + b)` are exposed so the
//! switched-system and analysis layers can reason about the iteration as a
//! linear map.

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg;

/// Maximum asymmetry `‖Q − Qᵀ‖∞` tolerated in a quadratic coefficient matrix.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// One block of a separable quadratic program.
#[derive(Debug, Clone)]
pub struct Block {
    /// Quadratic coefficient matrix (symmetric positive definite, nᵢ×nᵢ).
    pub q: DMatrix<f64>,
    /// Linear coefficient vector (length nᵢ).
    pub c: DVector<f64>,
    /// This block's columns of the coupling constraint (m×nᵢ).
    pub a: DMatrix<f64>,
}

impl Block {
    pub fn dim(&self) -> usize {
        self.q.nrows()
    }
}

/// A validated separable QP instance; immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct SeparableQP {
    blocks: Vec<Block>,
    b: DVector<f64>,
    alpha: f64,
}

/// Block primal iterates `xᵢ` together with their iteration index.
#[derive(Debug, Clone)]
pub struct PrimalState {
    pub blocks: Vec<DVector<f64>>,
    pub k: usize,
}

/// Dual iterate `y` together with its iteration index.
#[derive(Debug, Clone)]
pub struct DualState {
    pub y: DVector<f64>,
    pub k: usize,
}

impl DualState {
    pub fn new(y: DVector<f64>) -> Self {
        Self { y, k: 0 }
    }
}

/// Coefficients of the affine dual-update map `y ↦ (I − R)y + B`.
///
/// `phis[i] = α·AᵢQᵢ⁻¹Aᵢᵀ` is block i's share of `R = Σᵢ phis[i]`; `offset`
/// is `B`. The staleness model places each `phis[i]` (or the whole `R`) at a
/// delayed tap of the dual history, so they are returned individually.
#[derive(Debug, Clone)]
pub struct DualMapCoefficients {
    pub phis: Vec<DMatrix<f64>>,
    pub r: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl SeparableQP {
    /// Validates shapes, symmetry, positive definiteness, and the step size.
    pub fn new(blocks: Vec<Block>, b: DVector<f64>, alpha: f64) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidInput("at least one block is required".into()));
        }
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "step size must be positive and finite, got {alpha}"
            )));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("coupling vector has a non-finite entry".into()));
        }
        let m = b.len();
        for (i, bl) in blocks.iter().enumerate() {
            let n_i = bl.q.nrows();
            if bl.q.ncols() != n_i {
                return Err(Error::Dimension(format!(
                    "block {i}: quadratic matrix must be square, got {}x{}",
                    bl.q.nrows(),
                    bl.q.ncols()
                )));
            }
            if bl.c.len() != n_i {
                return Err(Error::Dimension(format!(
                    "block {i}: linear term has length {} but the block dimension is {n_i}",
                    bl.c.len()
                )));
            }
            if bl.a.nrows() != m || bl.a.ncols() != n_i {
                return Err(Error::Dimension(format!(
                    "block {i}: constraint columns are {}x{}, expected {m}x{n_i}",
                    bl.a.nrows(),
                    bl.a.ncols()
                )));
            }
            let finite = bl.q.iter().chain(bl.c.iter()).chain(bl.a.iter()).all(|v| v.is_finite());
            if !finite {
                return Err(Error::InvalidInput(format!("block {i}: non-finite entry")));
            }
            let asym = linalg::inf_norm(&(&bl.q - bl.q.transpose()));
            if asym >= SYMMETRY_TOLERANCE {
                return Err(Error::InvalidInput(format!(
                    "block {i}: quadratic matrix is not symmetric (asymmetry {asym:.3e})"
                )));
            }
            if nalgebra::linalg::Cholesky::new(bl.q.clone()).is_none() {
                return Err(Error::InvalidInput(format!(
                    "block {i}: quadratic matrix is not positive definite"
                )));
            }
        }
        Ok(Self { blocks, b, alpha })
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Row count m of the coupling constraint.
    pub fn constraint_dim(&self) -> usize {
        self.b.len()
    }

    /// Σᵢ nᵢ, the stacked primal dimension.
    pub fn total_primal_dim(&self) -> usize {
        self.blocks.iter().map(Block::dim).sum()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &Block {
        &self.blocks[i]
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Identical problem with a different step size (revalidated).
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Self::new(self.blocks.clone(), self.b.clone(), alpha)
    }

    /// Block minimizer of the Lagrangian at dual iterate `y`:
    /// `xᵢ = −Qᵢ⁻¹(Aᵢᵀy + cᵢ)`.
    pub fn primal_update(&self, block: usize, y: &DualState) -> Result<DVector<f64>> {
        if block >= self.n_blocks() {
            return Err(Error::InvalidInput(format!(
                "block index {block} out of range (N = {})",
                self.n_blocks()
            )));
        }
        self.check_dual_dim(&y.y)?;
        let bl = &self.blocks[block];
        let q_inv = linalg::inverse(&bl.q)?;
        Ok(-(&q_inv * (bl.a.transpose() * &y.y + &bl.c)))
    }

    /// `primal_update` applied to every block; the result carries index k+1.
    pub fn primal_update_all(&self, y: &DualState) -> Result<PrimalState> {
        let blocks = (0..self.n_blocks())
            .map(|i| self.primal_update(i, y))
            .collect::<Result<Vec<_>>>()?;
        Ok(PrimalState { blocks, k: y.k + 1 })
    }

    /// Dual ascent along the constraint residual:
    /// `y⁺ = y + α(Σᵢ Aᵢxᵢ − b)`.
    pub fn dual_update_sync(&self, y: &DualState, x_new: &PrimalState) -> Result<DualState> {
        self.check_dual_dim(&y.y)?;
        let residual = self.constraint_residual(x_new)?;
        Ok(DualState { y: &y.y + self.alpha * residual, k: y.k + 1 })
    }

    /// `Σᵢ Aᵢxᵢ − b` for a full primal state.
    pub fn constraint_residual(&self, x: &PrimalState) -> Result<DVector<f64>> {
        if x.blocks.len() != self.n_blocks() {
            return Err(Error::Dimension(format!(
                "primal state has {} blocks, problem has {}",
                x.blocks.len(),
                self.n_blocks()
            )));
        }
        let mut acc = -self.b.clone();
        for (bl, x_i) in self.blocks.iter().zip(&x.blocks) {
            if x_i.len() != bl.dim() {
                return Err(Error::Dimension(format!(
                    "primal block has length {}, expected {}",
                    x_i.len(),
                    bl.dim()
                )));
            }
            acc += &bl.a * x_i;
        }
        Ok(acc)
    }

    /// Analytic optimum of the coupled problem:
    /// `y* = −(AQ⁻¹Aᵀ)⁻¹(AQ⁻¹c + b)`, `xᵢ* = −Qᵢ⁻¹(Aᵢᵀy* + cᵢ)`.
    ///
    /// Fails with a singularity error when `AQ⁻¹Aᵀ` is below the condition
    /// threshold (e.g. rank-deficient coupling rows).
    pub fn closed_form_optimum(&self) -> Result<(DVector<f64>, PrimalState)> {
        let m = self.constraint_dim();
        let mut s = DMatrix::<f64>::zeros(m, m);
        let mut aqc = DVector::<f64>::zeros(m);
        let mut q_invs = Vec::with_capacity(self.n_blocks());
        for bl in &self.blocks {
            let q_inv = linalg::inverse(&bl.q)?;
            s += &bl.a * &q_inv * bl.a.transpose();
            aqc += &bl.a * (&q_inv * &bl.c);
            q_invs.push(q_inv);
        }
        let s_inv = linalg::inverse(&s)?;
        let y_star = -(&s_inv * (aqc + &self.b));
        let blocks = self
            .blocks
            .iter()
            .zip(&q_invs)
            .map(|(bl, q_inv)| -(q_inv * (bl.a.transpose() * &y_star + &bl.c)))
            .collect();
        Ok((y_star, PrimalState { blocks, k: 0 }))
    }

    /// Affine coefficients of one synchronous dual round; see
    /// [`DualMapCoefficients`].
    pub fn dual_map_coefficients(&self) -> Result<DualMapCoefficients> {
        let m = self.constraint_dim();
        let n = self.n_blocks() as f64;
        let mut r = DMatrix::<f64>::zeros(m, m);
        let mut offset = DVector::<f64>::zeros(m);
        let mut phis = Vec::with_capacity(self.n_blocks());
        for bl in &self.blocks {
            let q_inv = linalg::inverse(&bl.q)?;
            let phi = self.alpha * (&bl.a * &q_inv * bl.a.transpose());
            r += &phi;
            // Each block contributes −α·AᵢQᵢ⁻¹cᵢ and an equal 1/N share of −α·b.
            offset -= self.alpha * (&bl.a * (&q_inv * &bl.c));
            offset -= (self.alpha / n) * &self.b;
            phis.push(phi);
        }
        Ok(DualMapCoefficients { phis, r, offset })
    }

    fn check_dual_dim(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.constraint_dim() {
            return Err(Error::Dimension(format!(
                "dual vector has length {}, expected {}",
                y.len(),
                self.constraint_dim()
            )));
        }
        Ok(())
    }
}

/// Per-block solver with the quadratic inverses cached, so each primal update
/// costs one small matrix–vector product. This is the worker-side hot path:
/// blocks keep their full `Qᵢ⁻¹` work on purpose rather than pre-collapsing
/// the whole map into `R`, so timing comparisons reflect the real per-node
/// compute cost.
#[derive(Debug)]
pub struct PrimalSolver<'a> {
    qp: &'a SeparableQP,
    q_inv: Vec<DMatrix<f64>>,
}

impl<'a> PrimalSolver<'a> {
    pub fn new(qp: &'a SeparableQP) -> Result<Self> {
        let q_inv = qp
            .blocks
            .iter()
            .map(|bl| linalg::inverse(&bl.q))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { qp, q_inv })
    }

    pub fn problem(&self) -> &SeparableQP {
        self.qp
    }

    /// `xᵢ = −Qᵢ⁻¹(Aᵢᵀy + cᵢ)`.
    pub fn block_primal(&self, block: usize, y: &DVector<f64>) -> DVector<f64> {
        let bl = &self.qp.blocks[block];
        -(&self.q_inv[block] * (bl.a.transpose() * y + &bl.c))
    }

    /// This block's constraint-space contribution `Aᵢxᵢ(y)`.
    pub fn contribution(&self, block: usize, y: &DVector<f64>) -> DVector<f64> {
        &self.qp.blocks[block].a * self.block_primal(block, y)
    }

    /// One synchronous dual round `y ↦ y + α(Σᵢ Aᵢxᵢ(y) − b)`, accumulating
    /// contributions in block order. The fixed order makes this the
    /// bit-level reference for the threaded executor.
    pub fn sync_dual_step(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut acc = -self.qp.b.clone();
        for i in 0..self.qp.n_blocks() {
            acc += self.contribution(i, y);
        }
        y + self.qp.alpha * acc
    }
}

/// Step-size selection rule for [`generate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaRule {
    /// Use this step size, halving it (if needed) until the synchronous map
    /// is contractive.
    Fixed(f64),
    /// Search for a step size putting the synchronous contraction factor
    /// ρ(I−R) at [`AUTO_RHO_TARGET`].
    Auto,
}

/// Target contraction factor for [`AlphaRule::Auto`].
pub const AUTO_RHO_TARGET: f64 = 0.70;
/// Accepted band around [`AUTO_RHO_TARGET`].
pub const AUTO_RHO_BAND: (f64, f64) = (0.65, 0.75);

/// Parameters for random instance generation.
#[derive(Debug, Clone)]
pub struct GenParams {
    /// Primal dimension nᵢ of each block (length N).
    pub block_dims: Vec<usize>,
    /// Coupling row count m.
    pub constraint_dim: usize,
    pub alpha: AlphaRule,
    pub seed: u64,
}

const MAX_GEN_DRAWS: usize = 64;
const MAX_ALPHA_HALVINGS: usize = 200;

/// Draws a reproducible random instance: `Qᵢ = LᵢᵀLᵢ + 0.1·I` with `Lᵢ`, `cᵢ`,
/// `Aᵢ`, `b` all uniform in [−1, 1], read from a seeded generator in block
/// order (`Lᵢ` row-major, then `cᵢ`, then `Aᵢ` row-major, then `b`).
///
/// The step size is made feasible before returning: a fixed α is halved until
/// ρ(I−R) < 1, and `Auto` redraws the instance (bounded retries) until a step
/// size with ρ(I−R) in [`AUTO_RHO_BAND`] exists, found by bisection on the
/// decreasing branch of α ↦ ρ(I−αAQ⁻¹Aᵀ).
pub fn generate(params: &GenParams) -> Result<SeparableQP> {
    if params.block_dims.is_empty() {
        return Err(Error::InvalidInput("at least one block dimension is required".into()));
    }
    if params.block_dims.iter().any(|&n| n == 0) {
        return Err(Error::InvalidInput("block dimensions must be at least 1".into()));
    }
    if params.constraint_dim == 0 {
        return Err(Error::InvalidInput("constraint dimension must be at least 1".into()));
    }
    let total: usize = params.block_dims.iter().sum();
    if params.constraint_dim > total {
        return Err(Error::InvalidInput(format!(
            "{} coupling rows exceed the total primal dimension {total}; \
             AQ⁻¹Aᵀ would be singular and no step size is contractive",
            params.constraint_dim
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    for _ in 0..MAX_GEN_DRAWS {
        let (blocks, b) = draw_instance(params, &mut rng);
        let s = gram_matrix(&blocks)?;
        let alpha = match params.alpha {
            AlphaRule::Fixed(a0) => {
                if !a0.is_finite() || a0 <= 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "fixed step size must be positive and finite, got {a0}"
                    )));
                }
                Some(rescale_until_contractive(&s, a0)?)
            }
            AlphaRule::Auto => tune_step_size(&s)?,
        };
        if let Some(alpha) = alpha {
            return SeparableQP::new(blocks, b, alpha);
        }
        // Auto tuning can fail when the draw's AQ⁻¹Aᵀ is too ill-conditioned
        // to reach the target contraction; redraw.
    }
    Err(Error::NoConvergence { what: "step-size tuning redraw loop", iterations: MAX_GEN_DRAWS })
}

fn draw_instance(params: &GenParams, rng: &mut ChaCha8Rng) -> (Vec<Block>, DVector<f64>) {
    let unit = Uniform::new_inclusive(-1.0, 1.0);
    let m = params.constraint_dim;
    let blocks = params
        .block_dims
        .iter()
        .map(|&n_i| {
            let l = DMatrix::from_fn(n_i, n_i, |_, _| unit.sample(rng));
            let q = l.transpose() * &l + DMatrix::identity(n_i, n_i) * 0.1;
            let c = DVector::from_fn(n_i, |_, _| unit.sample(rng));
            let a = DMatrix::from_fn(m, n_i, |_, _| unit.sample(rng));
            Block { q, c, a }
        })
        .collect();
    let b = DVector::from_fn(m, |_, _| unit.sample(rng));
    (blocks, b)
}

/// `AQ⁻¹Aᵀ`, the symmetric positive semidefinite matrix whose spectrum
/// controls the admissible step sizes.
fn gram_matrix(blocks: &[Block]) -> Result<DMatrix<f64>> {
    let m = blocks[0].a.nrows();
    let mut s = DMatrix::<f64>::zeros(m, m);
    for bl in blocks {
        let q_inv = linalg::inverse(&bl.q)?;
        s += &bl.a * &q_inv * bl.a.transpose();
    }
    Ok(s)
}

fn contraction_factor(s: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    let m = s.nrows();
    linalg::spectral_radius(&(DMatrix::identity(m, m) - alpha * s), 1e-12)
}

fn rescale_until_contractive(s: &DMatrix<f64>, alpha0: f64) -> Result<f64> {
    let mut alpha = alpha0;
    for _ in 0..MAX_ALPHA_HALVINGS {
        if contraction_factor(s, alpha)? < 1.0 {
            return Ok(alpha);
        }
        alpha *= 0.5;
    }
    // Only a singular AQ⁻¹Aᵀ pins ρ at 1 for every α; rescaling cannot help.
    Err(Error::NoConvergence {
        what: "step-size feasibility rescaling",
        iterations: MAX_ALPHA_HALVINGS,
    })
}

/// Searches for α with ρ(I−αS) ≈ [`AUTO_RHO_TARGET`]. Returns `Ok(None)` when
/// this draw cannot reach the accepted band (caller redraws).
fn tune_step_size(s: &DMatrix<f64>) -> Result<Option<f64>> {
    let sym = (s + s.transpose()) * 0.5;
    let eigs = nalgebra::SymmetricEigen::new(sym).eigenvalues;
    let l_max = eigs.iter().fold(0.0f64, |a, &v| a.max(v));
    let l_min = eigs.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    if !(l_min > l_max * 1e-9) || l_max <= 0.0 {
        return Ok(None); // effectively rank-deficient draw
    }
    // ρ(I−αS) = max(1−αλ_min, αλ_max−1) is decreasing up to its minimizer.
    let alpha_valley = 2.0 / (l_min + l_max);
    let rho_valley = contraction_factor(s, alpha_valley)?;
    if rho_valley > AUTO_RHO_TARGET {
        // Best reachable factor is above target; accept only if in band.
        return Ok(if rho_valley <= AUTO_RHO_BAND.1 - 5e-3 { Some(alpha_valley) } else { None });
    }
    let (mut lo, mut hi) = (0.0f64, alpha_valley); // ρ(lo)=1 > target ≥ ρ(hi)
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if contraction_factor(s, mid)? > AUTO_RHO_TARGET {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let alpha = 0.5 * (lo + hi);
    let rho = contraction_factor(s, alpha)?;
    Ok((AUTO_RHO_BAND.0..=AUTO_RHO_BAND.1).contains(&rho).then_some(alpha))
}
