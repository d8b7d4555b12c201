//! Multi-threaded dual-ascent executor.
//!
//! A single coordinator thread owns the dual variable. Worker threads own
//! disjoint contiguous ranges of primal blocks and repeatedly evaluate their
//! blocks' constraint-space contributions against published dual snapshots.
//! Three update disciplines are supported:
//!
//! * synchronous — every iteration waits for all contributions evaluated at
//!   the newest dual iterate;
//! * deterministically stale — every iteration uses contributions evaluated
//!   exactly `q − 1` iterates back (less during warm-up);
//! * stochastically stale — every iteration uses, per worker, the freshest
//!   contribution available right now, as long as it is at most `q − 1`
//!   iterates old; otherwise the coordinator stalls until one arrives.
//!
//! Contributions are accumulated in block order no matter how blocks are
//! chunked over workers, so synchronous runs are bit-identical across thread
//! counts and to the serial reference loop. Ages actually used are recorded
//! per block per iteration; the resulting histogram can be fed back as an
//! empirical staleness distribution.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::qp::{PrimalSolver, SeparableQP};
use crate::switched::DelayModel;
use crate::Scheme;

/// Default residual threshold on ‖yᵏ − yᵏ⁻¹‖∞.
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_MAX_ITERS: usize = 10_000;

/// Executor parameters. `q` caps the tolerated staleness: contributions
/// older than `q − 1` iterations are never applied.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scheme: Scheme,
    /// Worker thread count; 1 selects a serial loop for every scheme.
    pub threads: usize,
    pub q: usize,
    pub tolerance: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Upper bound of a per-evaluation busy-wait drawn uniformly in
    /// microseconds; 0 disables it. Perturbs timing only, never values of
    /// synchronous or deterministically stale runs.
    pub jitter_us: u64,
    /// Project the dual iterate onto the nonnegative orthant after each step.
    pub clamp_dual: bool,
    pub record_dual_trace: bool,
    pub record_residual_trace: bool,
    /// Initial dual value; zeros when absent.
    pub y0: Option<DVector<f64>>,
}

impl RunConfig {
    pub fn new(scheme: Scheme) -> Self {
        Self {
            scheme,
            threads: 1,
            q: 1,
            tolerance: DEFAULT_TOLERANCE,
            max_iters: DEFAULT_MAX_ITERS,
            seed: 0,
            jitter_us: 0,
            clamp_dual: false,
            record_dual_trace: false,
            record_residual_trace: false,
            y0: None,
        }
    }

    fn validate(&self, m: usize) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::InvalidInput("at least one thread is required".into()));
        }
        if self.q == 0 {
            return Err(Error::InvalidInput("staleness window q must be at least 1".into()));
        }
        if !self.tolerance.is_finite() || self.tolerance <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "tolerance must be positive and finite, got {}",
                self.tolerance
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidInput("max_iters must be at least 1".into()));
        }
        if let Some(y0) = &self.y0 {
            if y0.len() != m {
                return Err(Error::Dimension(format!(
                    "initial dual value has length {}, expected {m}",
                    y0.len()
                )));
            }
            if y0.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("initial dual value must be finite".into()));
            }
        }
        Ok(())
    }

    fn initial_dual(&self, m: usize) -> DVector<f64> {
        self.y0.clone().unwrap_or_else(|| DVector::zeros(m))
    }
}

/// Outcome of one executor run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub scheme: Scheme,
    pub threads: usize,
    /// Dual updates performed.
    pub iterations: usize,
    /// Time spent in the iteration loop (setup and join excluded).
    pub wall_time: Duration,
    /// ‖yᵏ − yᵏ⁻¹‖∞ at the last iteration.
    pub final_residual: f64,
    /// True exactly when `final_residual <= tolerance`.
    pub converged: bool,
    /// `observed_age_histogram[a]` counts block updates applied `a`
    /// iterations stale; entries sum to `n_blocks · iterations`.
    pub observed_age_histogram: Vec<u64>,
    pub y_final: DVector<f64>,
    pub residual_trace: Option<Vec<f64>>,
    /// Dual iterates y⁰, y¹, …; present when requested.
    pub dual_trace: Option<Vec<DVector<f64>>>,
}

impl RunReport {
    /// Converts the measured age histogram into a staleness distribution,
    /// replicated across `n_nodes` nodes (the histogram is pooled over
    /// blocks, so per-node structure is not recoverable).
    pub fn to_delay_model(&self, n_nodes: usize) -> Result<DelayModel> {
        let total: u64 = self.observed_age_histogram.iter().sum();
        if total == 0 {
            return Err(Error::InvalidInput(
                "age histogram is empty; run at least one iteration".into(),
            ));
        }
        let probs: Vec<f64> = self
            .observed_age_histogram
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect();
        DelayModel::new(self.observed_age_histogram.len(), vec![probs; n_nodes])
    }
}

/// Runs the configured scheme on `qp` and reports the outcome.
pub fn run(qp: &SeparableQP, cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate(qp.constraint_dim())?;
    let solver = PrimalSolver::new(qp)?;
    if cfg.threads == 1 {
        Ok(run_serial(qp, &solver, cfg))
    } else {
        Ok(run_threaded(qp, &solver, cfg))
    }
}

fn run_serial(qp: &SeparableQP, solver: &PrimalSolver, cfg: &RunConfig) -> RunReport {
    let n = qp.n_blocks() as u64;
    let mut y = cfg.initial_dual(qp.constraint_dim());
    let mut hist = vec![0u64; cfg.q];
    let mut dual_trace = cfg.record_dual_trace.then(|| vec![y.clone()]);
    let mut residual_trace = cfg.record_residual_trace.then(Vec::new);

    let started = Instant::now();
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < cfg.max_iters {
        let mut y_next = solver.sync_dual_step(&y);
        if cfg.clamp_dual {
            y_next.apply(|v| *v = v.max(0.0));
        }
        residual = (&y_next - &y).amax();
        y = y_next;
        iterations += 1;
        // a lone thread can never observe a stale snapshot
        hist[0] += n;
        if let Some(t) = &mut dual_trace {
            t.push(y.clone());
        }
        if let Some(t) = &mut residual_trace {
            t.push(residual);
        }
        if residual <= cfg.tolerance {
            break;
        }
    }
    let wall_time = started.elapsed();

    RunReport {
        scheme: cfg.scheme,
        threads: 1,
        iterations,
        wall_time,
        final_residual: residual,
        converged: residual <= cfg.tolerance,
        observed_age_histogram: hist,
        y_final: y,
        residual_trace,
        dual_trace,
    }
}

/// Ring of published dual snapshots, indexed by iterate tag. Capacity q + 1
/// keeps every tag a paced worker may still need: publishing tag t requires
/// iteration t − 1 to have consumed tag t − q − 1 + q = t − 1 − (q − 1) …,
/// i.e. the slot being overwritten is no longer reachable.
struct SnapshotRing {
    slots: Mutex<Vec<Option<(usize, DVector<f64>)>>>,
    published: Condvar,
    done: AtomicBool,
}

impl SnapshotRing {
    fn new(capacity: usize, y0: DVector<f64>) -> Self {
        let mut slots = vec![None; capacity];
        slots[0] = Some((0, y0));
        Self { slots: Mutex::new(slots), published: Condvar::new(), done: AtomicBool::new(false) }
    }

    fn capacity(&self) -> usize {
        self.slots.lock().unwrap().len()
    }

    fn publish(&self, tag: usize, y: DVector<f64>) {
        let mut slots = self.slots.lock().unwrap();
        let cap = slots.len();
        slots[tag % cap] = Some((tag, y));
        drop(slots);
        self.published.notify_all();
    }

    /// Blocks until snapshot `tag` is available; `None` once shut down.
    fn read_exact(&self, tag: usize) -> Option<DVector<f64>> {
        let cap = self.capacity();
        let mut slots = self.slots.lock().unwrap();
        loop {
            if self.done.load(Ordering::Acquire) {
                return None;
            }
            if let Some((t, y)) = &slots[tag % cap] {
                if *t == tag {
                    return Some(y.clone());
                }
            }
            slots = self.published.wait(slots).unwrap();
        }
    }

    /// Blocks until a snapshot strictly newer than `after` is available and
    /// returns the newest one; `None` once shut down.
    fn read_newer(&self, after: Option<usize>) -> Option<(usize, DVector<f64>)> {
        let mut slots = self.slots.lock().unwrap();
        loop {
            if self.done.load(Ordering::Acquire) {
                return None;
            }
            let newest = slots
                .iter()
                .flatten()
                .max_by_key(|(t, _)| *t)
                .map(|(t, y)| (*t, y.clone()));
            if let Some((t, _)) = &newest {
                if after.map_or(true, |a| *t > a) {
                    return newest;
                }
            }
            slots = self.published.wait(slots).unwrap();
        }
    }

    fn shut_down(&self) {
        let _guard = self.slots.lock().unwrap();
        self.done.store(true, Ordering::Release);
        self.published.notify_all();
    }
}

/// One worker's outbox: per-block contributions keyed by snapshot tag, in a
/// ring of depth q. Slots are read in place (a deterministically stale
/// consumer revisits the same tag through its whole warm-up, and a slow
/// chunk may be reused across iterations); payloads sit behind an `Arc` so
/// reads are refcount bumps. Paced producers write tags sequentially and
/// the slot-reuse argument from [`SnapshotRing`] applies; a free-running
/// producer only ever replaces a slot with a strictly newer tag.
struct ChunkOutbox {
    slots: Mutex<Vec<Option<(usize, Arc<Vec<DVector<f64>>>)>>>,
    filled: Condvar,
}

impl ChunkOutbox {
    fn new(depth: usize) -> Self {
        Self { slots: Mutex::new(vec![None; depth]), filled: Condvar::new() }
    }

    fn write(&self, tag: usize, data: Vec<DVector<f64>>) {
        let mut slots = self.slots.lock().unwrap();
        let cap = slots.len();
        slots[tag % cap] = Some((tag, Arc::new(data)));
        drop(slots);
        self.filled.notify_all();
    }

    /// Returns the contributions for exactly `tag`, blocking until present.
    fn peek_exact(&self, tag: usize) -> Arc<Vec<DVector<f64>>> {
        let mut slots = self.slots.lock().unwrap();
        let cap = slots.len();
        loop {
            if let Some((t, data)) = &slots[tag % cap] {
                if *t == tag {
                    return Arc::clone(data);
                }
            }
            slots = self.filled.wait(slots).unwrap();
        }
    }

    /// Returns the freshest contributions with tag ≥ `bound`, blocking until
    /// some exist.
    fn read_freshest(&self, bound: usize) -> (usize, Arc<Vec<DVector<f64>>>) {
        let mut slots = self.slots.lock().unwrap();
        loop {
            let newest = slots
                .iter()
                .flatten()
                .max_by_key(|(t, _)| *t)
                .filter(|(t, _)| *t >= bound)
                .map(|(t, d)| (*t, Arc::clone(d)));
            if let Some(found) = newest {
                return found;
            }
            slots = self.filled.wait(slots).unwrap();
        }
    }
}

/// Splits `n` blocks into `pieces` contiguous ranges whose sizes differ by
/// at most one.
fn chunk_ranges(n: usize, pieces: usize) -> Vec<std::ops::Range<usize>> {
    let base = n / pieces;
    let rem = n % pieces;
    let mut start = 0;
    (0..pieces)
        .map(|w| {
            let len = base + usize::from(w < rem);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

fn busy_wait(duration: Duration) {
    let start = Instant::now();
    while start.elapsed() < duration {
        std::hint::spin_loop();
    }
}

fn run_threaded(qp: &SeparableQP, solver: &PrimalSolver, cfg: &RunConfig) -> RunReport {
    let m = qp.constraint_dim();
    let n = qp.n_blocks();
    let q = cfg.q;
    // more workers than blocks would only idle
    let workers = cfg.threads.min(n);
    let ranges = chunk_ranges(n, workers);
    let y0 = cfg.initial_dual(m);
    let ring = SnapshotRing::new(q + 1, y0.clone());
    let outboxes: Vec<ChunkOutbox> = (0..workers).map(|_| ChunkOutbox::new(q)).collect();
    let paced = !matches!(cfg.scheme, Scheme::StoAsync);

    std::thread::scope(|scope| {
        for (w, range) in ranges.iter().cloned().enumerate() {
            let (ring, outbox) = (&ring, &outboxes[w]);
            let jitter = (cfg.jitter_us > 0).then(|| {
                let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(w as u64 + 1));
                (rng, Uniform::new_inclusive(0, cfg.jitter_us))
            });
            scope.spawn(move || {
                let mut jitter = jitter;
                let mut evaluate = |y: &DVector<f64>| -> Vec<DVector<f64>> {
                    if let Some((rng, dist)) = &mut jitter {
                        busy_wait(Duration::from_micros(dist.sample(rng)));
                    }
                    range.clone().map(|i| solver.contribution(i, y)).collect()
                };
                if paced {
                    for tag in 0.. {
                        let Some(y) = ring.read_exact(tag) else { break };
                        outbox.write(tag, evaluate(&y));
                    }
                } else {
                    let mut last = None;
                    while let Some((tag, y)) = ring.read_newer(last) {
                        outbox.write(tag, evaluate(&y));
                        last = Some(tag);
                    }
                }
            });
        }

        let mut y = y0;
        let mut hist = vec![0u64; q];
        let mut dual_trace = cfg.record_dual_trace.then(|| vec![y.clone()]);
        let mut residual_trace = cfg.record_residual_trace.then(Vec::new);

        let started = Instant::now();
        let mut iterations = 0;
        let mut residual = f64::INFINITY;
        while iterations < cfg.max_iters {
            let k = iterations;
            let bound = k.saturating_sub(q - 1);
            // accumulate in block order: chunks are contiguous and visited in
            // order, so the f64 addition sequence matches the serial loop
            let mut acc = -qp.b().clone();
            for (w, range) in ranges.iter().enumerate() {
                let (tag, data) = match cfg.scheme {
                    Scheme::Synchronous => (k, outboxes[w].peek_exact(k)),
                    Scheme::DetAsync => (bound, outboxes[w].peek_exact(bound)),
                    Scheme::StoAsync => outboxes[w].read_freshest(bound),
                };
                hist[k - tag] += range.len() as u64;
                for contribution in data.iter() {
                    acc += contribution;
                }
            }
            let mut y_next = &y + qp.alpha() * acc;
            if cfg.clamp_dual {
                y_next.apply(|v| *v = v.max(0.0));
            }
            residual = (&y_next - &y).amax();
            y = y_next;
            iterations += 1;
            ring.publish(iterations, y.clone());
            if let Some(t) = &mut dual_trace {
                t.push(y.clone());
            }
            if let Some(t) = &mut residual_trace {
                t.push(residual);
            }
            if residual <= cfg.tolerance {
                break;
            }
        }
        let wall_time = started.elapsed();
        ring.shut_down();

        RunReport {
            scheme: cfg.scheme,
            threads: cfg.threads,
            iterations,
            wall_time,
            final_residual: residual,
            converged: residual <= cfg.tolerance,
            observed_age_histogram: hist,
            y_final: y,
            residual_trace,
            dual_trace,
        }
    })
}

/// One scheme × thread-count cell of a benchmark sweep.
#[derive(Debug, Clone)]
pub struct BenchCell {
    pub scheme: Scheme,
    pub threads: usize,
    pub wall_times: Vec<Duration>,
    pub median_wall_time: Duration,
    /// Serial synchronous median divided by this cell's median.
    pub speedup: f64,
    pub reports: Vec<RunReport>,
}

#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    /// Median wall time of the serial synchronous reference.
    pub serial_reference: Duration,
    pub cells: Vec<BenchCell>,
}

fn median_duration(times: &[Duration]) -> Duration {
    let mut sorted = times.to_vec();
    sorted.sort();
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2
    }
}

/// Runs every scheme × thread-count combination `repeats` times (repeat r
/// uses seed + r) and reports wall-clock medians relative to the serial
/// synchronous reference.
pub fn benchmark(
    qp: &SeparableQP,
    schemes: &[Scheme],
    thread_counts: &[usize],
    repeats: usize,
    base: &RunConfig,
) -> Result<BenchmarkResult> {
    if schemes.is_empty() || thread_counts.is_empty() {
        return Err(Error::InvalidInput("nothing to benchmark".into()));
    }
    if repeats == 0 {
        return Err(Error::InvalidInput("at least one repeat is required".into()));
    }

    let mut reference_cfg = base.clone();
    reference_cfg.scheme = Scheme::Synchronous;
    reference_cfg.threads = 1;
    let mut reference_times = Vec::with_capacity(repeats);
    for r in 0..repeats {
        reference_cfg.seed = base.seed.wrapping_add(r as u64);
        reference_times.push(run(qp, &reference_cfg)?.wall_time);
    }
    let serial_reference = median_duration(&reference_times);

    let mut cells = Vec::new();
    for &scheme in schemes {
        for &threads in thread_counts {
            let mut cfg = base.clone();
            cfg.scheme = scheme;
            cfg.threads = threads;
            let mut reports = Vec::with_capacity(repeats);
            for r in 0..repeats {
                cfg.seed = base.seed.wrapping_add(r as u64);
                reports.push(run(qp, &cfg)?);
            }
            let wall_times: Vec<Duration> = reports.iter().map(|r| r.wall_time).collect();
            let median_wall_time = median_duration(&wall_times);
            let speedup = serial_reference.as_secs_f64() / median_wall_time.as_secs_f64().max(1e-12);
            cells.push(BenchCell { scheme, threads, wall_times, median_wall_time, speedup, reports });
        }
    }
    Ok(BenchmarkResult { serial_reference, cells })
}
