//! Monte Carlo ensembles of the stochastic dual iteration, at two levels of
//! fidelity: sampling the collapsed q-mode chain directly, or sampling
//! per-node ages and applying the coordinator's oldest-value aggregation,
//! which exercises the full reduction pipeline end to end.
//!
//! Runs are embarrassingly parallel. Each run owns a counter-based generator
//! seeded from the master seed with the run index as its stream, so results
//! are identical whether runs execute serially or in parallel, and across
//! repeat invocations.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::qp::{PrimalSolver, SeparableQP};
use crate::switched::{sample_mode, AugmentedState, DelayModel, SwitchedSystem};

/// Ensemble parameters. `record_every` decimates the stored trajectory:
/// iterates are kept at k = record_every, 2·record_every, …, k_max.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub runs: usize,
    pub k_max: usize,
    pub seed: u64,
    /// Initial dual value; the history buffer is back-filled with it.
    pub y0: DVector<f64>,
    pub record_every: usize,
    /// Record the whole stacked state instead of just the newest dual block.
    pub record_full: bool,
}

impl SimConfig {
    pub fn new(runs: usize, k_max: usize, seed: u64, y0: DVector<f64>) -> Self {
        Self { runs, k_max, seed, y0, record_every: 1, record_full: false }
    }

    fn validate(&self, m: usize) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::InvalidInput("at least one run is required".into()));
        }
        if self.k_max == 0 {
            return Err(Error::InvalidInput("k_max must be at least 1".into()));
        }
        if self.record_every == 0 || self.record_every > self.k_max {
            return Err(Error::InvalidInput(format!(
                "record_every must be in 1..={}, got {}",
                self.k_max, self.record_every
            )));
        }
        if self.y0.len() != m {
            return Err(Error::Dimension(format!(
                "initial dual value has length {}, expected {m}",
                self.y0.len()
            )));
        }
        Ok(())
    }

    fn run_rng(&self, run: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(run as u64);
        rng
    }
}

/// Recorded ensemble: per-run trajectories plus per-step mean and standard
/// deviation over runs, and the realized mode (maximum-age) histogram.
#[derive(Debug, Clone)]
pub struct TrajectoryEnsemble {
    /// Iteration indices of the records; length k_max / record_every.
    pub recorded_steps: Vec<usize>,
    /// `trajectories[run][record]`: newest dual block, or the full stack
    /// when `record_full` is set.
    pub trajectories: Vec<Vec<DVector<f64>>>,
    /// Elementwise mean over runs, per recorded step.
    pub mean: Vec<DVector<f64>>,
    /// Elementwise sample standard deviation over runs (zero for one run).
    pub std: Vec<DVector<f64>>,
    /// Counts of the staleness age applied at each step, over all runs.
    pub mode_histogram: Vec<u64>,
}

impl TrajectoryEnsemble {
    fn assemble(
        recorded_steps: Vec<usize>,
        per_run: Vec<(Vec<DVector<f64>>, Vec<u64>)>,
    ) -> Self {
        let runs = per_run.len();
        let n_records = recorded_steps.len();
        let q = per_run[0].1.len();
        let mut mode_histogram = vec![0u64; q];
        for (_, hist) in &per_run {
            for (acc, h) in mode_histogram.iter_mut().zip(hist) {
                *acc += h;
            }
        }
        let trajectories: Vec<Vec<DVector<f64>>> =
            per_run.into_iter().map(|(t, _)| t).collect();

        let dim = if n_records > 0 { trajectories[0][0].len() } else { 0 };
        let mut mean = Vec::with_capacity(n_records);
        let mut std = Vec::with_capacity(n_records);
        for j in 0..n_records {
            let mut mu = DVector::<f64>::zeros(dim);
            for run in &trajectories {
                mu += &run[j];
            }
            mu /= runs as f64;
            let mut var = DVector::<f64>::zeros(dim);
            if runs > 1 {
                for run in &trajectories {
                    let d = &run[j] - &mu;
                    var += d.component_mul(&d);
                }
                var /= (runs - 1) as f64;
            }
            mean.push(mu);
            std.push(var.map(f64::sqrt));
        }
        Self { recorded_steps, trajectories, mean, std, mode_histogram }
    }
}

fn recorded_steps(cfg: &SimConfig) -> Vec<usize> {
    (1..=cfg.k_max / cfg.record_every).map(|t| t * cfg.record_every).collect()
}

/// Simulates the collapsed chain: each step draws a mode from the aggregated
/// switching distribution and applies `Y⁺ = W_σ Y + C`.
pub fn simulate_model(sys: &SwitchedSystem, cfg: &SimConfig) -> Result<TrajectoryEnsemble> {
    cfg.validate(sys.m())?;
    let per_run: Vec<(Vec<DVector<f64>>, Vec<u64>)> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = cfg.run_rng(run);
            let mut state = AugmentedState::from_initial(&cfg.y0, sys.q());
            let mut records = Vec::with_capacity(cfg.k_max / cfg.record_every);
            let mut hist = vec![0u64; sys.q()];
            for k in 1..=cfg.k_max {
                let mode = sample_mode(sys.pi(), &mut rng);
                hist[mode] += 1;
                state = sys.step(&state, mode).expect("validated dimensions");
                if k % cfg.record_every == 0 {
                    records.push(if cfg.record_full {
                        state.stack().clone()
                    } else {
                        state.current(sys.m())
                    });
                }
            }
            (records, hist)
        })
        .collect();
    Ok(TrajectoryEnsemble::assemble(recorded_steps(cfg), per_run))
}

/// Simulates at the per-node level: every step draws an independent age for
/// each node, the coordinator keeps only the oldest one ξ, all blocks are
/// evaluated at the ξ-steps-old dual iterate, and the dual ascends on their
/// contributions. The recorded mode histogram counts ξ, so it can be checked
/// against the closed-form aggregated distribution.
pub fn simulate_per_node(
    qp: &SeparableQP,
    dm: &DelayModel,
    cfg: &SimConfig,
) -> Result<TrajectoryEnsemble> {
    if dm.n_nodes() != qp.n_blocks() {
        return Err(Error::Dimension(format!(
            "delay model covers {} nodes but the problem has {} blocks",
            dm.n_nodes(),
            qp.n_blocks()
        )));
    }
    cfg.validate(qp.constraint_dim())?;
    let solver = PrimalSolver::new(qp)?;
    let (q, n, alpha) = (dm.q(), qp.n_blocks(), qp.alpha());

    let per_run: Vec<(Vec<DVector<f64>>, Vec<u64>)> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = cfg.run_rng(run);
            // history[a] holds the dual iterate a steps back, back-filled at start
            let mut history: std::collections::VecDeque<DVector<f64>> =
                (0..q).map(|_| cfg.y0.clone()).collect();
            let mut records = Vec::with_capacity(cfg.k_max / cfg.record_every);
            let mut hist = vec![0u64; q];
            for k in 1..=cfg.k_max {
                let xi = (0..n)
                    .map(|i| sample_mode(dm.node(i), &mut rng))
                    .max()
                    .expect("at least one node");
                hist[xi] += 1;
                let stale = &history[xi];
                let mut acc = -qp.b().clone();
                for i in 0..n {
                    acc += solver.contribution(i, stale);
                }
                let y_next = &history[0] + alpha * acc;
                history.pop_back();
                history.push_front(y_next);
                if k % cfg.record_every == 0 {
                    records.push(if cfg.record_full {
                        let mut stack = DVector::<f64>::zeros(q * qp.constraint_dim());
                        for (a, y) in history.iter().enumerate() {
                            stack.rows_mut(a * qp.constraint_dim(), qp.constraint_dim())
                                .copy_from(y);
                        }
                        stack
                    } else {
                        history[0].clone()
                    });
                }
            }
            (records, hist)
        })
        .collect();
    Ok(TrajectoryEnsemble::assemble(recorded_steps(cfg), per_run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis;
    use crate::qp::{Block, SeparableQP};
    use crate::switched::{aggregate_probability, reduce_modes};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn two_block_instance(alpha: f64) -> SeparableQP {
        let block = || Block {
            q: DMatrix::from_row_slice(1, 1, &[2.0]),
            c: DVector::from_vec(vec![-2.0]),
            a: DMatrix::from_row_slice(1, 1, &[1.0]),
        };
        SeparableQP::new(vec![block(), block()], DVector::from_vec(vec![1.0]), alpha).unwrap()
    }

    fn fair_delay() -> DelayModel {
        DelayModel::new(2, vec![vec![0.5, 0.5]; 2]).unwrap()
    }

    fn y0() -> DVector<f64> {
        DVector::from_vec(vec![2.0])
    }

    #[test]
    fn config_validation() {
        let qp = two_block_instance(0.5);
        let dm = fair_delay();
        let bad_runs = SimConfig { runs: 0, ..SimConfig::new(1, 10, 0, y0()) };
        assert!(simulate_per_node(&qp, &dm, &bad_runs).is_err());
        let bad_record = SimConfig { record_every: 11, ..SimConfig::new(1, 10, 0, y0()) };
        assert!(simulate_per_node(&qp, &dm, &bad_record).is_err());
        let bad_y0 = SimConfig::new(1, 10, 0, DVector::zeros(3));
        assert!(simulate_per_node(&qp, &dm, &bad_y0).is_err());
    }

    #[test]
    fn no_delay_reproduces_synchronous_iteration() {
        let qp = two_block_instance(0.5);
        let solver = crate::qp::PrimalSolver::new(&qp).unwrap();
        let mut y = y0();
        let mut serial = Vec::new();
        for _ in 0..30 {
            y = solver.sync_dual_step(&y);
            serial.push(y.clone());
        }

        let dm = DelayModel::no_delay(2, 3).unwrap();
        let per_node = simulate_per_node(&qp, &dm, &SimConfig::new(4, 30, 9, y0())).unwrap();
        for run in &per_node.trajectories {
            for (rec, expect) in run.iter().zip(&serial) {
                assert_eq!(rec, expect); // identical arithmetic path
            }
        }

        let sys = reduce_modes(&qp, &dm).unwrap();
        let model = simulate_model(&sys, &SimConfig::new(4, 30, 9, y0())).unwrap();
        for run in &model.trajectories {
            for (rec, expect) in run.iter().zip(&serial) {
                assert!((rec - expect).amax() < 1e-13);
            }
        }
        assert_eq!(model.mode_histogram, vec![4 * 30, 0, 0]);
    }

    #[test]
    fn recording_schedule_and_shapes() {
        let qp = two_block_instance(0.5);
        let sys = reduce_modes(&qp, &fair_delay()).unwrap();
        let cfg = SimConfig { record_every: 10, ..SimConfig::new(5, 100, 3, y0()) };
        let ens = simulate_model(&sys, &cfg).unwrap();
        assert_eq!(ens.recorded_steps, (1..=10).map(|t| t * 10).collect::<Vec<_>>());
        assert_eq!(ens.mean.len(), 10);
        assert_eq!(ens.std.len(), 10);
        assert_eq!(ens.trajectories.len(), 5);
        assert_eq!(ens.trajectories[0].len(), 10);
        assert_eq!(ens.mode_histogram.iter().sum::<u64>(), 5 * 100);

        let full = SimConfig { record_full: true, ..cfg };
        let ens = simulate_model(&sys, &full).unwrap();
        assert_eq!(ens.mean[0].len(), 2); // whole stack, q·m = 2
    }

    #[test]
    fn single_run_has_zero_std() {
        let qp = two_block_instance(0.5);
        let sys = reduce_modes(&qp, &fair_delay()).unwrap();
        let ens = simulate_model(&sys, &SimConfig::new(1, 50, 17, y0())).unwrap();
        assert!(ens.std.iter().all(|s| s.amax() == 0.0));
    }

    #[test]
    fn repeat_invocations_are_identical() {
        let qp = two_block_instance(0.5);
        let dm = fair_delay();
        let cfg = SimConfig::new(16, 80, worth_seed(), y0());
        let a = simulate_per_node(&qp, &dm, &cfg).unwrap();
        let b = simulate_per_node(&qp, &dm, &cfg).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
        assert_eq!(a.mode_histogram, b.mode_histogram);

        let sys = reduce_modes(&qp, &dm).unwrap();
        let c = simulate_model(&sys, &cfg).unwrap();
        let d = simulate_model(&sys, &cfg).unwrap();
        assert_eq!(c.trajectories, d.trajectories);
    }

    fn worth_seed() -> u64 {
        20_240_817
    }

    #[test]
    fn ensemble_mean_tracks_mean_recursion() {
        let qp = two_block_instance(0.5);
        let dm = fair_delay();
        let sys = reduce_modes(&qp, &dm).unwrap();
        let runs = 400;
        let cfg = SimConfig::new(runs, 120, 4, y0());
        let ens = simulate_model(&sys, &cfg).unwrap();
        let expected = analysis::expected_trajectory(
            &sys,
            &AugmentedState::from_initial(&y0(), sys.q()),
            cfg.k_max,
        );
        for (j, &k) in ens.recorded_steps.iter().enumerate() {
            let e_k = expected[k].rows(0, 1).into_owned();
            for d in 0..1 {
                let dev = (ens.mean[j][d] - e_k[d]).abs();
                let margin = 3.0 * ens.std[j][d] / (runs as f64).sqrt() + 1e-12;
                assert!(dev <= margin, "k = {k}: deviation {dev:.3e} > margin {margin:.3e}");
            }
        }
    }

    #[test]
    fn per_node_aggregation_matches_closed_form() {
        let dm = DelayModel::new(
            3,
            vec![vec![0.5, 0.3, 0.2], vec![0.8, 0.1, 0.1], vec![0.3, 0.3, 0.4]],
        )
        .unwrap();
        let block = || Block {
            q: DMatrix::from_row_slice(1, 1, &[2.0]),
            c: DVector::from_vec(vec![-2.0]),
            a: DMatrix::from_row_slice(1, 1, &[1.0]),
        };
        let qp = SeparableQP::new(
            vec![block(), block(), block()],
            DVector::from_vec(vec![1.0]),
            0.3,
        )
        .unwrap();
        let cfg = SimConfig::new(500, 200, 5, y0());
        let ens = simulate_per_node(&qp, &dm, &cfg).unwrap();
        let pi = aggregate_probability(&dm).unwrap();
        let samples: u64 = ens.mode_histogram.iter().sum();
        assert_eq!(samples, 500 * 200);
        for (age, (&count, &p)) in ens.mode_histogram.iter().zip(&pi).enumerate() {
            let sigma = (samples as f64 * p * (1.0 - p)).sqrt();
            let dev = (count as f64 - samples as f64 * p).abs();
            assert!(dev <= 3.0 * sigma, "age {age}: {dev:.1} > 3σ = {:.1}", 3.0 * sigma);
        }
    }

    #[test]
    fn per_node_and_model_levels_agree_statistically() {
        let qp = two_block_instance(0.5);
        let dm = fair_delay();
        let sys = reduce_modes(&qp, &dm).unwrap();
        let runs = 1000;
        let k_mid = 12; // compare mid-transient, before everything collapses to y*
        let cfg = SimConfig::new(runs, k_mid, 6, y0());
        let a = simulate_per_node(&qp, &dm, &cfg).unwrap();
        let b = simulate_model(&sys, &cfg).unwrap();
        let last = a.recorded_steps.len() - 1;
        let (ma, mb) = (a.mean[last][0], b.mean[last][0]);
        let (sa, sb) = (a.std[last][0], b.std[last][0]);
        let stderr = ((sa * sa + sb * sb) / runs as f64).sqrt();
        assert!(
            (ma - mb).abs() <= 3.0 * stderr + 1e-12,
            "means {ma:.6} vs {mb:.6}, stderr {stderr:.2e}"
        );
        // spread should agree within sampling error as well (loose factor)
        assert!(sa < 2.0 * sb + 1e-12 && sb < 2.0 * sa + 1e-12, "stds {sa:.3e} vs {sb:.3e}");
    }

    #[test]
    fn stable_system_contracts_mean_and_spread() {
        let qp = two_block_instance(0.5);
        let sys = reduce_modes(&qp, &fair_delay()).unwrap();
        let ens = simulate_model(&sys, &SimConfig::new(300, 200, 8, y0())).unwrap();
        let last = ens.recorded_steps.len() - 1;
        assert_relative_eq!(ens.mean[last][0], 1.0, epsilon = 1e-8);
        assert!(ens.std[last][0] < 1e-8);
    }

    #[test]
    fn spread_shrinks_monotonically_after_burn_in() {
        let qp = two_block_instance(0.5);
        let sys = reduce_modes(&qp, &fair_delay()).unwrap();
        let ens = simulate_model(&sys, &SimConfig::new(400, 120, 10, y0())).unwrap();
        let raw: Vec<f64> = ens.std.iter().map(|s| s[0]).collect();
        // centered moving average over 11 steps
        let window = 11usize;
        let smoothed: Vec<f64> = (0..raw.len())
            .map(|i| {
                let lo = i.saturating_sub(window / 2);
                let hi = (i + window / 2 + 1).min(raw.len());
                raw[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
            })
            .collect();
        for k in 20..smoothed.len() - 1 {
            if smoothed[k] < 1e-12 {
                break; // at the floating-point floor, ordering is meaningless
            }
            assert!(
                smoothed[k + 1] <= smoothed[k] * 1.05,
                "smoothed spread rose at k = {k}: {} -> {}",
                smoothed[k],
                smoothed[k + 1]
            );
        }
    }

    #[test]
    fn unstable_system_second_moment_grows() {
        let qp = two_block_instance(3.5);
        let dm = fair_delay();
        let sys = reduce_modes(&qp, &dm).unwrap();
        let ens = simulate_model(&sys, &SimConfig::new(50, 60, 12, y0())).unwrap();
        let last = ens.recorded_steps.len() - 1;
        let second_moment =
            ens.mean[last][0] * ens.mean[last][0] + ens.std[last][0] * ens.std[last][0];
        assert!(second_moment > 1e6, "second moment stayed at {second_moment:.3e}");
    }
}
