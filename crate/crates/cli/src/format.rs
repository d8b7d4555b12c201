//! Versioned JSON schemas for problem instances and staleness models.
//!
//! Writers emit canonical compact JSON terminated by a single newline, so a
//! write → read → write round trip is byte-identical and file hashes are
//! stable across machines.

use std::fs;
use std::path::Path;

use adqp_core::qp::{Block, SeparableQP};
use adqp_core::switched::DelayModel;
use adqp_core::{DMatrix, DVector};
use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

/// One quadratic block: objective matrix, linear term, and its columns of the
/// coupling constraint. Matrices are stored as row-major nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockFile {
    /// Symmetric positive definite nᵢ×nᵢ matrix.
    pub q_mat: Vec<Vec<f64>>,
    /// Linear coefficient vector, length nᵢ.
    pub c: Vec<f64>,
    /// m×nᵢ coupling columns.
    pub a_mat: Vec<Vec<f64>>,
}

/// On-disk problem instance. Self-describing: the declared counts must match
/// the payload, which [`ProblemFile::to_problem`] re-validates on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemFile {
    pub format_version: u32,
    pub n_blocks: usize,
    pub constraint_dim: usize,
    /// Staleness window the instance is intended to run under.
    pub q: usize,
    /// Dual step size (already tuned if the instance was generated with
    /// automatic step selection).
    pub alpha: f64,
    /// Seed the instance was generated from; echoed into output headers.
    pub seed: u64,
    pub blocks: Vec<BlockFile>,
    /// Coupling right-hand side, length `constraint_dim`.
    pub b: Vec<f64>,
    /// Optional embedded per-node staleness distribution.
    pub delay: Option<DelayFile>,
}

/// On-disk per-node staleness distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DelayFile {
    pub format_version: u32,
    /// Staleness window: ages range over 0 … q−1.
    pub q: usize,
    /// `per_node[i][a]` is the probability that node i's contribution is
    /// `a` iterations old. Each row must sum to 1.
    pub per_node: Vec<Vec<f64>>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn rows_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        bail!("{what}: matrix needs at least one row");
    }
    let cols = rows[0].len();
    if cols == 0 {
        bail!("{what}: matrix needs at least one column");
    }
    if rows.iter().any(|r| r.len() != cols) {
        bail!("{what}: rows have inconsistent lengths");
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        cols,
        rows.iter().flat_map(|r| r.iter().copied()),
    ))
}

impl ProblemFile {
    pub fn from_problem(
        qp: &SeparableQP,
        q: usize,
        seed: u64,
        delay: Option<DelayFile>,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            n_blocks: qp.n_blocks(),
            constraint_dim: qp.constraint_dim(),
            q,
            alpha: qp.alpha(),
            seed,
            blocks: qp
                .blocks()
                .iter()
                .map(|b| BlockFile {
                    q_mat: matrix_rows(&b.q),
                    c: b.c.iter().copied().collect(),
                    a_mat: matrix_rows(&b.a),
                })
                .collect(),
            b: qp.b().iter().copied().collect(),
            delay,
        }
    }

    /// Rebuilds the validated in-memory problem.
    pub fn to_problem(&self) -> Result<SeparableQP> {
        if self.format_version != FORMAT_VERSION {
            bail!(
                "unsupported format_version {} (this tool reads version {FORMAT_VERSION})",
                self.format_version
            );
        }
        if self.blocks.len() != self.n_blocks {
            bail!(
                "file declares {} blocks but contains {}",
                self.n_blocks,
                self.blocks.len()
            );
        }
        if self.b.len() != self.constraint_dim {
            bail!(
                "file declares constraint_dim {} but b has length {}",
                self.constraint_dim,
                self.b.len()
            );
        }
        if self.q == 0 {
            bail!("staleness window q must be at least 1");
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, bf) in self.blocks.iter().enumerate() {
            let q_mat = rows_matrix(&bf.q_mat, &format!("block {i} q_mat"))?;
            let a_mat = rows_matrix(&bf.a_mat, &format!("block {i} a_mat"))?;
            if a_mat.nrows() != self.constraint_dim {
                bail!(
                    "block {i}: a_mat has {} rows, expected constraint_dim {}",
                    a_mat.nrows(),
                    self.constraint_dim
                );
            }
            blocks.push(Block { q: q_mat, c: DVector::from_vec(bf.c.clone()), a: a_mat });
        }
        SeparableQP::new(blocks, DVector::from_vec(self.b.clone()), self.alpha)
            .map_err(|e| anyhow!("invalid problem data: {e}"))
    }

    /// The embedded staleness model, validated, when present.
    pub fn delay_model(&self) -> Result<Option<DelayModel>> {
        self.delay.as_ref().map(DelayFile::to_model).transpose()
    }
}

impl DelayFile {
    pub fn from_model(dm: &DelayModel) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            q: dm.q(),
            per_node: dm.per_node().to_vec(),
        }
    }

    pub fn to_model(&self) -> Result<DelayModel> {
        if self.format_version != FORMAT_VERSION {
            bail!(
                "unsupported format_version {} (this tool reads version {FORMAT_VERSION})",
                self.format_version
            );
        }
        DelayModel::new(self.q, self.per_node.clone())
            .map_err(|e| anyhow!("invalid staleness model: {e}"))
    }
}

/// Canonical serialization: compact JSON plus a trailing newline.
pub fn canonical_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// A parsed problem file together with the content hash of its exact bytes.
pub struct LoadedProblem {
    pub file: ProblemFile,
    pub hash: String,
}

pub fn read_problem(path: &Path) -> Result<LoadedProblem> {
    let bytes =
        fs::read(path).with_context(|| format!("reading problem file {}", path.display()))?;
    let file: ProblemFile = serde_json::from_slice(&bytes)
        .with_context(|| format!("parsing problem file {}", path.display()))?;
    Ok(LoadedProblem { file, hash: crate::meta::content_hash(&bytes) })
}

pub fn write_problem(path: &Path, file: &ProblemFile) -> Result<()> {
    fs::write(path, canonical_bytes(file)?)
        .with_context(|| format!("writing problem file {}", path.display()))
}

pub fn read_delay(path: &Path) -> Result<DelayFile> {
    let bytes =
        fs::read(path).with_context(|| format!("reading staleness file {}", path.display()))?;
    serde_json::from_slice(&bytes)
        .with_context(|| format!("parsing staleness file {}", path.display()))
}

pub fn write_delay(path: &Path, file: &DelayFile) -> Result<()> {
    fs::write(path, canonical_bytes(file)?)
        .with_context(|| format!("writing staleness file {}", path.display()))
}
