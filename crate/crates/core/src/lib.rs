//! Solver and analyzer for separable quadratic programs under dual
//! decomposition with synchronous, deterministic-asynchronous, and
//! stochastic-asynchronous dual updates.
//!
//! The dual iteration with bounded staleness is modeled as a jump linear
//! system on the stacked history of dual iterates. Mean-square convergence
//! of the stochastic scheme is certified by a Kronecker spectral test on the
//! reduced (max-age) mode set, and analytic rate-of-convergence envelopes
//! are produced for all three schemes. A Monte Carlo simulator and a
//! shared-memory parallel executor validate the predictions empirically.

pub mod analysis;
pub mod error;
pub mod executor;
pub mod linalg;
pub mod qp;
pub mod simulator;
pub mod switched;

pub use error::{Error, Result};
pub use nalgebra::{DMatrix, DVector};

/// Dual-update scheme selector shared by the analysis and execution layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// Barrier per iteration; the coordinator always consumes fresh values.
    Synchronous,
    /// Barrier-free; the coordinator consumes values that are exactly
    /// `q - 1` iterations old once the pipeline is warm.
    DetAsync,
    /// Barrier-free; the coordinator consumes the freshest published value,
    /// with age bounded by `q - 1`.
    StoAsync,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Synchronous, Scheme::DetAsync, Scheme::StoAsync];

    /// Stable lower-case name used in CSV output and CLI flags.
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Synchronous => "sync",
            Scheme::DetAsync => "det-async",
            Scheme::StoAsync => "sto-async",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync" | "synchronous" => Ok(Scheme::Synchronous),
            "det-async" | "det_async" | "deterministic" => Ok(Scheme::DetAsync),
            "sto-async" | "sto_async" | "stochastic" => Ok(Scheme::StoAsync),
            other => Err(Error::InvalidInput(format!(
                "unknown scheme `{other}` (expected sync, det-async, or sto-async)"
            ))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
