//! `adqp` — batch front-end for the dual-decomposition QP solver: generate
//! problem instances, certify mean-square stability, run Monte Carlo
//! ensembles, execute single runs, and benchmark schemes across thread
//! counts. Outputs are seeded, hashed, and reproducible byte for byte
//! (benchmark and solve outputs contain measured wall times and are exempt).

use std::fs;
use std::path::{Path, PathBuf};

use adqp_cli::format::{self, DelayFile, LoadedProblem, ProblemFile};
use adqp_cli::meta;
use adqp_cli::report::{AnalysisReport, FullEnumerationCheck};
use adqp_core::analysis::{self, STABILITY_GUARD_BAND};
use adqp_core::executor::{self, RunConfig, DEFAULT_MAX_ITERS, DEFAULT_TOLERANCE};
use adqp_core::linalg;
use adqp_core::qp::{generate, AlphaRule, GenParams};
use adqp_core::simulator::{self, SimConfig};
use adqp_core::switched::{enumeration, reduce_modes, AugmentedState, DelayModel, SwitchedSystem};
use adqp_core::{DMatrix, DVector, Scheme};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

const EXIT_OK: i32 = 0;
/// A solver run finished without reaching the residual tolerance.
const EXIT_NOT_CONVERGED: i32 = 2;
/// `--require-stable` was passed and the verdict is not convergent.
const EXIT_UNSTABLE: i32 = 3;
/// Bad flags, unreadable files, or invalid problem data.
const EXIT_INPUT_ERROR: i32 = 4;

/// Tolerance for the spectral-radius computations behind reports.
const SPECTRAL_TOL: f64 = 1e-12;

/// Size gate for the joint-age enumeration cross-check.
const FULL_ENUM_MAX_NODES: usize = 3;
const FULL_ENUM_MAX_Q: usize = 3;

#[derive(Parser)]
#[command(
    name = "adqp",
    version,
    about = "Generate, analyze, simulate, solve, and benchmark separable QPs \
             under dual decomposition with bounded staleness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random problem instance and write it as JSON.
    Gen(GenArgs),
    /// Certify mean-square stability and emit rate envelopes.
    Analyze(AnalyzeArgs),
    /// Run a Monte Carlo ensemble of the staleness-switched dual iteration.
    Simulate(SimulateArgs),
    /// Run one scheme on the shared-memory executor.
    Solve(SolveArgs),
    /// Sweep schemes × thread counts and record wall-clock medians.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug)]
enum AlphaArg {
    Auto,
    Fixed(f64),
}

fn parse_alpha(s: &str) -> Result<AlphaArg, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(AlphaArg::Auto);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(AlphaArg::Fixed(v)),
        _ => Err(format!("expected `auto` or a positive number, got `{s}`")),
    }
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse().map_err(|e: adqp_core::Error| e.to_string())
}

#[derive(Args)]
struct GenArgs {
    /// Number of blocks, each of dimension --block-dim.
    #[arg(long, default_value_t = 2, conflicts_with = "block_dims")]
    blocks: usize,
    /// Primal dimension of every block.
    #[arg(long, default_value_t = 1, conflicts_with = "block_dims")]
    block_dim: usize,
    /// Explicit per-block dimensions (e.g. 2,3,2); overrides --blocks/--block-dim.
    #[arg(long, value_delimiter = ',')]
    block_dims: Option<Vec<usize>>,
    /// Number of coupling constraint rows.
    #[arg(long, default_value_t = 1)]
    m: usize,
    /// Staleness window stored with the instance.
    #[arg(long, default_value_t = 1)]
    q: usize,
    /// Dual step size, or `auto` to tune the synchronous contraction factor
    /// onto its target band.
    #[arg(long, default_value = "auto", value_parser = parse_alpha)]
    alpha: AlphaArg,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Staleness distribution (JSON) to embed in the instance.
    #[arg(long)]
    delay: Option<PathBuf>,
    /// Output path for the problem JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    problem: PathBuf,
    /// Staleness distribution (JSON); defaults to the one embedded in the
    /// problem file.
    #[arg(long)]
    delay: Option<PathBuf>,
    /// Output prefix: writes <out>.report.json and <out>.envelopes.csv.
    #[arg(long)]
    out: PathBuf,
    /// Number of wall-clock steps covered by the rate envelopes.
    #[arg(long, default_value_t = 200)]
    k_max: usize,
    /// Initial dual value (broadcast over all rows) for the envelopes.
    #[arg(long, default_value_t = 2.0)]
    y0: f64,
    /// Cross-check the reduced mode set against full joint-age enumeration
    /// (at most 3 nodes with window at most 3).
    #[arg(long)]
    full_enumeration: bool,
    /// Exit with status 3 when the iteration is not mean-square convergent.
    #[arg(long)]
    require_stable: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    problem: PathBuf,
    /// Staleness distribution (JSON); defaults to the one embedded in the
    /// problem file.
    #[arg(long)]
    delay: Option<PathBuf>,
    /// Output path for the ensemble CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long, default_value_t = 200)]
    k_max: usize,
    /// Keep every record_every-th iterate.
    #[arg(long, default_value_t = 1)]
    record_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Initial dual value, broadcast over all rows.
    #[arg(long, default_value_t = 2.0)]
    y0: f64,
    /// Simulate the per-node update pipeline instead of the reduced
    /// maximum-age jump system.
    #[arg(long)]
    per_node: bool,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    problem: PathBuf,
    #[arg(long, default_value = "sync", value_parser = parse_scheme)]
    scheme: Scheme,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Staleness window; defaults to the problem file's q.
    #[arg(long)]
    q: Option<usize>,
    /// Residual tolerance ‖yᵏ − yᵏ⁻¹‖∞ for convergence.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Initial dual value, broadcast over all rows (zeros when omitted).
    #[arg(long)]
    y0: Option<f64>,
    /// Project the dual iterate onto y ≥ 0 after each update.
    #[arg(long)]
    clamp_dual: bool,
    /// Upper bound (µs) of a random per-evaluation busy-wait in the workers.
    #[arg(long, default_value_t = 0)]
    jitter_us: u64,
    /// Write the measured staleness distribution (JSON) here.
    #[arg(long)]
    emit_delay: Option<PathBuf>,
    /// Write a one-row run summary CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    problem: PathBuf,
    /// Schemes to sweep.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "sync,det-async,sto-async",
        value_parser = parse_scheme
    )]
    schemes: Vec<Scheme>,
    /// Thread counts to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    threads: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Staleness window; defaults to the problem file's q.
    #[arg(long)]
    q: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path for the benchmark CSV.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_INPUT_ERROR,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_INPUT_ERROR
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

/// Appends a suffix to a path without touching its extension logic.
fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// The staleness model for a run: an explicit file wins over the embedded one.
fn resolve_delay(path: &Option<PathBuf>, file: &ProblemFile) -> Result<DelayModel> {
    match path {
        Some(p) => format::read_delay(p)?.to_model(),
        None => file.delay_model()?.ok_or_else(|| {
            anyhow!("no staleness model: pass --delay or embed one in the problem file")
        }),
    }
}

fn cmd_gen(args: GenArgs) -> Result<i32> {
    if args.q == 0 {
        bail!("staleness window --q must be at least 1");
    }
    let block_dims = match args.block_dims {
        Some(dims) => dims,
        None => vec![args.block_dim; args.blocks],
    };
    let alpha = match args.alpha {
        AlphaArg::Auto => AlphaRule::Auto,
        AlphaArg::Fixed(v) => AlphaRule::Fixed(v),
    };
    let qp = generate(&GenParams {
        block_dims,
        constraint_dim: args.m,
        alpha,
        seed: args.seed,
    })?;
    let delay = match &args.delay {
        Some(path) => {
            let dm = format::read_delay(path)?.to_model()?;
            if dm.n_nodes() != qp.n_blocks() {
                bail!(
                    "staleness file covers {} nodes but the instance has {} blocks",
                    dm.n_nodes(),
                    qp.n_blocks()
                );
            }
            if dm.q() != args.q {
                bail!("staleness file has window {} but --q is {}", dm.q(), args.q);
            }
            Some(DelayFile::from_model(&dm))
        }
        None => None,
    };
    let file = ProblemFile::from_problem(&qp, args.q, args.seed, delay);
    format::write_problem(&args.out, &file)?;
    println!(
        "wrote {} (blocks={}, m={}, q={}, alpha={})",
        args.out.display(),
        file.n_blocks,
        file.constraint_dim,
        file.q,
        file.alpha
    );
    Ok(EXIT_OK)
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<i32> {
    let LoadedProblem { file, hash } = format::read_problem(&args.problem)?;
    let qp = file.to_problem()?;
    let dm = resolve_delay(&args.delay, &file)?;
    let sys = reduce_modes(&qp, &dm)?;
    let stability = analysis::ms_stability(&sys, SPECTRAL_TOL)?;
    let lambda_rho = linalg::spectral_radius(&stability.lambda, SPECTRAL_TOL)?;
    let m = sys.m();

    let mut notes = vec![stability.notes.clone()];
    let fixed_point_block = stability
        .fixed_point
        .as_ref()
        .map(|y| y.rows(0, m).iter().copied().collect::<Vec<f64>>());
    if fixed_point_block.is_none() {
        notes.push(
            "mean map has no unique fixed point (I − W is singular); rate envelopes skipped"
                .to_string(),
        );
    }

    let full_enumeration = if args.full_enumeration {
        Some(full_enumeration_check(&sys, &dm)?)
    } else {
        None
    };

    let report = AnalysisReport {
        tool_version: meta::TOOL_VERSION.to_string(),
        seed: file.seed,
        problem_hash: hash.clone(),
        n_blocks: file.n_blocks,
        constraint_dim: file.constraint_dim,
        q: sys.q(),
        alpha: qp.alpha(),
        aggregated_pi: sys.pi().to_vec(),
        ms_spectral_radius: stability.ms_spectral_radius,
        is_ms_convergent: stability.is_ms_convergent,
        lambda_spectral_radius: lambda_rho,
        fixed_point: fixed_point_block,
        notes,
        full_enumeration,
    };

    let report_path = suffixed(&args.out, ".report.json");
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    fs::write(&report_path, json)
        .with_context(|| format!("writing report {}", report_path.display()))?;

    let envelope_path = suffixed(&args.out, ".envelopes.csv");
    let mut csv = meta::csv_metadata(file.seed, &hash);
    csv.push_str("scheme,k,bound,bound_normalized,is_update_point\n");
    if stability.fixed_point.is_some() {
        let y0 = AugmentedState::from_initial(&DVector::from_element(m, args.y0), sys.q());
        for scheme in Scheme::ALL {
            let env = analysis::rate_envelope(&sys, scheme, &y0, args.k_max)?;
            let denom = if env.initial_deviation > 0.0 { env.initial_deviation } else { 1.0 };
            for (k, &bound) in env.bounds.iter().enumerate() {
                let is_update = env.update_points.binary_search(&k).is_ok();
                csv.push_str(&format!(
                    "{},{k},{bound},{},{is_update}\n",
                    scheme.name(),
                    bound / denom
                ));
            }
        }
    }
    fs::write(&envelope_path, csv)
        .with_context(|| format!("writing envelopes {}", envelope_path.display()))?;

    println!("ms_spectral_radius = {:.9}", report.ms_spectral_radius);
    println!("lambda_spectral_radius = {:.9}", report.lambda_spectral_radius);
    println!(
        "verdict: {}",
        if report.is_ms_convergent { "mean-square convergent" } else { "NOT mean-square convergent" }
    );
    println!("wrote {} and {}", report_path.display(), envelope_path.display());

    if args.require_stable && !report.is_ms_convergent {
        eprintln!(
            "stability required but ms spectral radius is {:.9}",
            report.ms_spectral_radius
        );
        return Ok(EXIT_UNSTABLE);
    }
    Ok(EXIT_OK)
}

/// Recomputes the second-moment verdict from every joint age assignment
/// (qᴺ outcomes, each mapped to its maximum-age mode) as an end-to-end check
/// of the reduced q-mode construction.
fn full_enumeration_check(sys: &SwitchedSystem, dm: &DelayModel) -> Result<FullEnumerationCheck> {
    if dm.n_nodes() > FULL_ENUM_MAX_NODES || dm.q() > FULL_ENUM_MAX_Q {
        bail!(
            "full enumeration is limited to {FULL_ENUM_MAX_NODES} nodes with window at most \
             {FULL_ENUM_MAX_Q} (got {} nodes, window {})",
            dm.n_nodes(),
            dm.q()
        );
    }
    let outcomes = enumeration::enumerate_joint_ages(dm)?;
    let dim2 = sys.dim() * sys.dim();
    let mut m2 = DMatrix::<f64>::zeros(dim2, dim2);
    for outcome in &outcomes {
        if outcome.probability > 0.0 {
            let w = &sys.modes()[outcome.max_age];
            m2 += outcome.probability * linalg::kron(w, w);
        }
    }
    let rho = linalg::spectral_radius(&m2, SPECTRAL_TOL)?;
    Ok(FullEnumerationCheck {
        n_outcomes: outcomes.len(),
        aggregated_pi: enumeration::aggregated_frequencies(dm)?,
        ms_spectral_radius: rho,
        is_ms_convergent: rho < 1.0 - STABILITY_GUARD_BAND,
    })
}

fn cmd_simulate(args: SimulateArgs) -> Result<i32> {
    let LoadedProblem { file, hash } = format::read_problem(&args.problem)?;
    let qp = file.to_problem()?;
    let dm = resolve_delay(&args.delay, &file)?;
    let m = qp.constraint_dim();
    let mut cfg =
        SimConfig::new(args.runs, args.k_max, args.seed, DVector::from_element(m, args.y0));
    cfg.record_every = args.record_every;
    let ensemble = if args.per_node {
        simulator::simulate_per_node(&qp, &dm, &cfg)?
    } else {
        simulator::simulate_model(&reduce_modes(&qp, &dm)?, &cfg)?
    };

    let mut csv = meta::csv_metadata(args.seed, &hash);
    csv.push_str(&format!(
        "# level: {}\n# runs: {}\n",
        if args.per_node { "per-node" } else { "model" },
        args.runs
    ));
    let hist: Vec<String> = ensemble.mode_histogram.iter().map(u64::to_string).collect();
    csv.push_str(&format!("# mode_histogram: {}\n", hist.join(",")));
    csv.push('k');
    for j in 0..m {
        csv.push_str(&format!(",mean_{j}"));
    }
    for j in 0..m {
        csv.push_str(&format!(",std_{j}"));
    }
    csv.push('\n');
    for (idx, &k) in ensemble.recorded_steps.iter().enumerate() {
        csv.push_str(&k.to_string());
        for j in 0..m {
            csv.push_str(&format!(",{}", ensemble.mean[idx][j]));
        }
        for j in 0..m {
            csv.push_str(&format!(",{}", ensemble.std[idx][j]));
        }
        csv.push('\n');
    }
    fs::write(&args.out, csv)
        .with_context(|| format!("writing ensemble {}", args.out.display()))?;
    println!(
        "wrote {} ({} runs, {} records)",
        args.out.display(),
        args.runs,
        ensemble.recorded_steps.len()
    );
    Ok(EXIT_OK)
}

fn cmd_solve(args: SolveArgs) -> Result<i32> {
    let LoadedProblem { file, hash } = format::read_problem(&args.problem)?;
    let qp = file.to_problem()?;
    let mut cfg = RunConfig::new(args.scheme);
    cfg.threads = args.threads;
    cfg.q = args.q.unwrap_or(file.q);
    cfg.tolerance = args.tol;
    cfg.max_iters = args.max_iters;
    cfg.seed = args.seed;
    cfg.jitter_us = args.jitter_us;
    cfg.clamp_dual = args.clamp_dual;
    cfg.y0 = args.y0.map(|v| DVector::from_element(qp.constraint_dim(), v));
    let report = executor::run(&qp, &cfg)?;

    println!(
        "scheme={} threads={} iterations={} converged={} final_residual={:e} wall_seconds={:.6}",
        report.scheme.name(),
        report.threads,
        report.iterations,
        report.converged,
        report.final_residual,
        report.wall_time.as_secs_f64()
    );

    if let Some(path) = &args.emit_delay {
        let dm = report.to_delay_model(qp.n_blocks())?;
        format::write_delay(path, &DelayFile::from_model(&dm))?;
        println!("wrote {}", path.display());
    }
    if let Some(path) = &args.out {
        let mut csv = meta::csv_metadata(args.seed, &hash);
        let hist: Vec<String> =
            report.observed_age_histogram.iter().map(u64::to_string).collect();
        csv.push_str(&format!("# age_histogram: {}\n", hist.join(",")));
        csv.push_str("scheme,threads,q,iterations,converged,final_residual,wall_seconds\n");
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            report.scheme.name(),
            report.threads,
            cfg.q,
            report.iterations,
            report.converged,
            report.final_residual,
            report.wall_time.as_secs_f64()
        ));
        fs::write(path, csv).with_context(|| format!("writing summary {}", path.display()))?;
    }
    Ok(if report.converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

fn cmd_bench(args: BenchArgs) -> Result<i32> {
    let LoadedProblem { file, hash } = format::read_problem(&args.problem)?;
    let qp = file.to_problem()?;
    let mut base = RunConfig::new(Scheme::Synchronous);
    base.q = args.q.unwrap_or(file.q);
    base.tolerance = args.tol;
    base.max_iters = args.max_iters;
    base.seed = args.seed;
    let result = executor::benchmark(&qp, &args.schemes, &args.threads, args.repeats, &base)?;

    let mut csv = meta::csv_metadata(args.seed, &hash);
    csv.push_str(&format!(
        "# serial_reference_seconds: {}\n",
        result.serial_reference.as_secs_f64()
    ));
    csv.push_str("scheme,threads,repeat,wall_seconds,iterations,converged,median_wall_seconds,speedup\n");
    for cell in &result.cells {
        for (r, report) in cell.reports.iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{r},{},{},{},{},{}\n",
                cell.scheme.name(),
                cell.threads,
                report.wall_time.as_secs_f64(),
                report.iterations,
                report.converged,
                cell.median_wall_time.as_secs_f64(),
                cell.speedup
            ));
        }
    }
    fs::write(&args.out, csv)
        .with_context(|| format!("writing benchmark {}", args.out.display()))?;
    println!(
        "wrote {} ({} cells, {} repeats each)",
        args.out.display(),
        result.cells.len(),
        args.repeats
    );
    Ok(EXIT_OK)
}
