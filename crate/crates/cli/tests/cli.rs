//! End-to-end tests of the `adqp` binary: every subcommand is exercised
//! through the real executable, and outputs are parsed back through the
//! library's schema types.

use std::path::PathBuf;
use std::process::{Command, Output};

use adqp_cli::format::{self, BlockFile, DelayFile, ProblemFile};
use adqp_cli::report::AnalysisReport;
use adqp_core::{linalg, DMatrix};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adqp"))
        .args(args)
        .output()
        .expect("spawning the adqp binary")
}

fn assert_exit(out: &Output, code: i32, context: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{context}: expected exit {code}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Per-test scratch directory, removed on drop.
struct Workspace {
    dir: PathBuf,
}

impl Workspace {
    fn new(tag: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("adqp-cli-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> String {
        self.dir.join(name).to_string_lossy().into_owned()
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.dir);
    }
}

/// Two identical scalar blocks with y* = 1, x* = (1/2, 1/2).
fn reference_problem(q: usize, alpha: f64) -> ProblemFile {
    let block = || BlockFile {
        q_mat: vec![vec![2.0]],
        c: vec![-2.0],
        a_mat: vec![vec![1.0]],
    };
    ProblemFile {
        format_version: format::FORMAT_VERSION,
        n_blocks: 2,
        constraint_dim: 1,
        q,
        alpha,
        seed: 7,
        blocks: vec![block(), block()],
        b: vec![1.0],
        delay: None,
    }
}

fn fair_delay(n_nodes: usize, q: usize) -> DelayFile {
    DelayFile {
        format_version: format::FORMAT_VERSION,
        q,
        per_node: vec![vec![1.0 / q as f64; q]; n_nodes],
    }
}

fn write_json<T: serde::Serialize>(path: &str, value: &T) {
    std::fs::write(path, format::canonical_bytes(value).unwrap()).unwrap();
}

/// Data rows of a CSV output: comment lines dropped, header returned first.
fn csv_rows(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines
        .next()
        .expect("CSV has a schema header")
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    (header, rows)
}

/// Envelope bounds of one scheme, indexed by wall-clock step.
fn envelope_bounds(text: &str, scheme: &str) -> Vec<f64> {
    let (_, rows) = csv_rows(text);
    let mut bounds = Vec::new();
    for row in rows.iter().filter(|r| r[0] == scheme) {
        let k: usize = row[1].parse().unwrap();
        assert_eq!(k, bounds.len(), "envelope rows out of order for {scheme}");
        bounds.push(row[2].parse::<f64>().unwrap());
    }
    bounds
}

#[test]
fn gen_round_trips_byte_identically_and_is_deterministic() {
    let ws = Workspace::new("gen-roundtrip");
    let out_a = ws.path("a.json");
    let out_b = ws.path("b.json");
    let args = |out: &str| {
        vec![
            "gen".to_string(),
            "--blocks=2".into(),
            "--block-dim=1".into(),
            "--m=1".into(),
            "--seed=7".into(),
            format!("--out={out}"),
        ]
    };
    let first = run(&args(&out_a).iter().map(String::as_str).collect::<Vec<_>>());
    assert_exit(&first, 0, "gen");
    let second = run(&args(&out_b).iter().map(String::as_str).collect::<Vec<_>>());
    assert_exit(&second, 0, "gen repeat");

    let bytes_a = std::fs::read(&out_a).unwrap();
    let bytes_b = std::fs::read(&out_b).unwrap();
    assert_eq!(bytes_a, bytes_b, "same arguments must produce identical files");

    // write → read → write is byte-identical
    let parsed = format::read_problem(out_a.as_ref()).unwrap().file;
    assert_eq!(format::canonical_bytes(&parsed).unwrap(), bytes_a);
    parsed.to_problem().unwrap();
}

#[test]
fn auto_step_size_lands_in_the_contraction_band() {
    let ws = Workspace::new("gen-band");
    let out = ws.path("auto.json");
    let gen = run(&[
        "gen",
        "--blocks=4",
        "--block-dim=3",
        "--m=2",
        "--alpha=auto",
        "--seed=11",
        &format!("--out={out}"),
    ]);
    assert_exit(&gen, 0, "gen auto");

    let qp = format::read_problem(out.as_ref()).unwrap().file.to_problem().unwrap();
    let coeffs = qp.dual_map_coefficients().unwrap();
    let m = qp.constraint_dim();
    let sync_map = DMatrix::<f64>::identity(m, m) - &coeffs.r;
    let rho = linalg::spectral_radius(&sync_map, 1e-12).unwrap();
    assert!((0.65..=0.75).contains(&rho), "tuned contraction factor {rho} outside band");
}

#[test]
fn paper_shaped_instance_generates_and_analyzes() {
    let ws = Workspace::new("gen-large");
    let out = ws.path("large.json");
    let gen = run(&[
        "gen",
        "--blocks=20000",
        "--block-dim=10",
        "--m=1",
        "--q=8",
        "--alpha=0.27",
        "--seed=6",
        &format!("--out={out}"),
    ]);
    assert_exit(&gen, 0, "gen 20000 blocks");
    let file = format::read_problem(out.as_ref()).unwrap().file;
    assert_eq!(file.n_blocks, 20000);
    assert_eq!(file.blocks.len(), 20000);
    assert_eq!(file.q, 8);
    assert!(file.alpha > 0.0);

    // The stability analysis must go through the reduced q-mode system; a
    // joint-age construction would be 8^20000 modes and could never return.
    let delay = ws.path("uniform.json");
    write_json(&delay, &fair_delay(20000, 8));
    let prefix = ws.path("large");
    let analyze = run(&[
        "analyze",
        &format!("--problem={out}"),
        &format!("--delay={delay}"),
        &format!("--out={prefix}"),
        "--k-max=50",
    ]);
    assert_exit(&analyze, 0, "analyze 20000 blocks");
    let report: AnalysisReport = serde_json::from_slice(
        &std::fs::read(ws.path("large.report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report.q, 8);
    assert_eq!(report.aggregated_pi.len(), 8);
}

#[test]
fn analyze_reports_reference_instance_values() {
    let ws = Workspace::new("analyze-ref");
    let problem = ws.path("t1.json");
    let delay = ws.path("fair.json");
    write_json(&problem, &reference_problem(2, 0.5));
    write_json(&delay, &fair_delay(2, 2));

    let prefix = ws.path("t1");
    let args = [
        "analyze",
        &format!("--problem={problem}"),
        &format!("--delay={delay}"),
        &format!("--out={prefix}"),
        "--full-enumeration",
    ];
    let analyze = run(&args);
    assert_exit(&analyze, 0, "analyze reference instance");

    let report_bytes = std::fs::read(ws.path("t1.report.json")).unwrap();
    let report: AnalysisReport = serde_json::from_slice(&report_bytes).unwrap();

    // Two fair coins: oldest-age distribution [1/4, 3/4].
    assert_eq!(report.aggregated_pi.len(), 2);
    assert!((report.aggregated_pi[0] - 0.25).abs() <= 1e-12);
    assert!((report.aggregated_pi[1] - 0.75).abs() <= 1e-12);

    // Mean map contraction: ρ(Λ) solves z² = (1−π₁·r)z − π₂·r·1 with r = 1/2,
    // giving |z| = sqrt(3/8).
    assert!((report.lambda_spectral_radius - 0.375f64.sqrt()).abs() <= 1e-9);
    assert!(report.is_ms_convergent);
    assert!(report.ms_spectral_radius < 1.0);

    let y_star = report.fixed_point.as_ref().expect("fixed point exists");
    assert_eq!(y_star.len(), 1);
    assert!((y_star[0] - 1.0).abs() <= 1e-9);

    // End-to-end agreement between the reduced modes and the full joint-age
    // enumeration.
    let full = report.full_enumeration.as_ref().expect("requested cross-check");
    assert_eq!(full.n_outcomes, 4);
    assert!((full.ms_spectral_radius - report.ms_spectral_radius).abs() <= 1e-9);
    assert_eq!(full.is_ms_convergent, report.is_ms_convergent);
    for (a, b) in full.aggregated_pi.iter().zip(&report.aggregated_pi) {
        assert!((a - b).abs() <= 1e-12);
    }

    assert_eq!(report.problem_hash.len(), 12);
    assert_eq!(report.seed, 7);

    // Envelope CSV: provenance header plus all three schemes, starting at the
    // initial deviation |y0 − y*| = 1.
    let csv = std::fs::read_to_string(ws.path("t1.envelopes.csv")).unwrap();
    assert!(csv.starts_with("# tool_version:"));
    assert!(csv.contains("# seed: 7"));
    assert!(csv.contains(&format!("# problem_hash: {}", report.problem_hash)));
    for scheme in ["sync", "det-async", "sto-async"] {
        let bounds = envelope_bounds(&csv, scheme);
        assert_eq!(bounds.len(), 201, "{scheme} covers k = 0..=200");
        assert!((bounds[0] - 1.0).abs() <= 1e-12);
        assert!(bounds[200] < 1e-9, "{scheme} envelope contracts");
    }

    // Identical inputs produce identical outputs.
    let rerun = run(&args);
    assert_exit(&rerun, 0, "analyze rerun");
    assert_eq!(std::fs::read(ws.path("t1.report.json")).unwrap(), report_bytes);
    assert_eq!(
        std::fs::read_to_string(ws.path("t1.envelopes.csv")).unwrap(),
        csv
    );
}

#[test]
fn degenerate_window_makes_all_envelopes_coincide() {
    let ws = Workspace::new("analyze-q1");
    let problem = ws.path("t1q1.json");
    let delay = ws.path("fresh.json");
    write_json(&problem, &reference_problem(1, 0.5));
    write_json(&delay, &fair_delay(2, 1));

    let prefix = ws.path("q1");
    let analyze = run(&[
        "analyze",
        &format!("--problem={problem}"),
        &format!("--delay={delay}"),
        &format!("--out={prefix}"),
        "--k-max=40",
    ]);
    assert_exit(&analyze, 0, "analyze with window 1");

    let csv = std::fs::read_to_string(ws.path("q1.envelopes.csv")).unwrap();
    let sync = envelope_bounds(&csv, "sync");
    let det = envelope_bounds(&csv, "det-async");
    let sto = envelope_bounds(&csv, "sto-async");

    // With window 1 every scheme iterates the same matrix I − R, so the
    // asynchronous envelopes agree pointwise and the synchronous one traces
    // the same value sequence on its two-step update grid.
    for k in 0..det.len() {
        assert!((det[k] - sto[k]).abs() <= 1e-12 * det[k].max(1.0));
    }
    for t in 0..=20 {
        assert!((sync[2 * t] - det[t]).abs() <= 1e-12 * det[t].max(1.0));
        if 2 * t + 1 < sync.len() {
            assert_eq!(sync[2 * t + 1], sync[2 * t], "held flat between updates");
        }
    }

    // The update-point column marks the synchronous grid.
    let (_, rows) = csv_rows(&csv);
    for row in rows.iter().filter(|r| r[0] == "sync") {
        let k: usize = row[1].parse().unwrap();
        let is_update: bool = row[4].parse().unwrap();
        assert_eq!(is_update, k % 2 == 0);
    }
}

#[test]
fn unstable_step_size_still_emits_diverging_envelopes() {
    let ws = Workspace::new("analyze-unstable");
    let problem = ws.path("hot.json");
    let delay = ws.path("fair.json");
    // ρ(I − R) = |1 − 3.9| = 2.9 ≥ 1: no scheme contracts.
    write_json(&problem, &reference_problem(2, 3.9));
    write_json(&delay, &fair_delay(2, 2));

    let prefix = ws.path("hot");
    let plain = run(&[
        "analyze",
        &format!("--problem={problem}"),
        &format!("--delay={delay}"),
        &format!("--out={prefix}"),
        "--k-max=20",
    ]);
    assert_exit(&plain, 0, "analyze without --require-stable");

    let report: AnalysisReport =
        serde_json::from_slice(&std::fs::read(ws.path("hot.report.json")).unwrap()).unwrap();
    assert!(!report.is_ms_convergent);
    assert!(report.ms_spectral_radius >= 1.0);

    let csv = std::fs::read_to_string(ws.path("hot.envelopes.csv")).unwrap();
    let sync = envelope_bounds(&csv, "sync");
    assert_eq!(sync.len(), 21);
    assert!(sync[18] > sync[0], "envelope diverges with the iteration");

    let gated = run(&[
        "analyze",
        &format!("--problem={problem}"),
        &format!("--delay={delay}"),
        &format!("--out={prefix}"),
        "--k-max=20",
        "--require-stable",
    ]);
    assert_exit(&gated, 3, "--require-stable on an unstable instance");
}

#[test]
fn simulate_is_deterministic_and_tracks_the_fixed_point() {
    let ws = Workspace::new("simulate");
    let problem = ws.path("t1.json");
    let delay = ws.path("fair.json");
    write_json(&problem, &reference_problem(2, 0.5));
    write_json(&delay, &fair_delay(2, 2));

    let out_a = ws.path("ens_a.csv");
    let out_b = ws.path("ens_b.csv");
    let args = |out: &str| {
        [
            "simulate".to_string(),
            format!("--problem={problem}"),
            format!("--delay={delay}"),
            format!("--runs=100"),
            format!("--k-max=200"),
            format!("--seed=5"),
            format!("--out={out}"),
        ]
    };
    let first = run(&args(&out_a).iter().map(String::as_str).collect::<Vec<_>>());
    assert_exit(&first, 0, "simulate");
    let second = run(&args(&out_b).iter().map(String::as_str).collect::<Vec<_>>());
    assert_exit(&second, 0, "simulate repeat");
    assert_eq!(
        std::fs::read(&out_a).unwrap(),
        std::fs::read(&out_b).unwrap(),
        "same seed must produce identical CSV bytes"
    );

    let text = std::fs::read_to_string(&out_a).unwrap();
    let (header, rows) = csv_rows(&text);
    assert_eq!(header, ["k", "mean_0", "std_0"]);
    assert_eq!(rows.len(), 200);
    let last = rows.last().unwrap();
    let mean: f64 = last[1].parse().unwrap();
    let std: f64 = last[2].parse().unwrap();
    // Terminal ensemble mean within 3 standard errors of y* = 1.
    assert!((mean - 1.0).abs() <= 3.0 * std / 100f64.sqrt() + 1e-9);

    // A single run has an identically zero std column.
    let single = ws.path("single.csv");
    let one = run(&[
        "simulate",
        &format!("--problem={problem}"),
        &format!("--delay={delay}"),
        "--runs=1",
        "--k-max=50",
        "--seed=9",
        &format!("--out={single}"),
    ]);
    assert_exit(&one, 0, "single-run simulate");
    let (_, rows) = csv_rows(&std::fs::read_to_string(&single).unwrap());
    assert_eq!(rows.len(), 50);
    assert!(rows.iter().all(|r| r[2].parse::<f64>().unwrap() == 0.0));
}

#[test]
fn per_node_simulation_and_embedded_delay_are_accepted() {
    let ws = Workspace::new("simulate-pernode");
    let problem = ws.path("t1.json");
    let mut file = reference_problem(2, 0.5);
    file.delay = Some(fair_delay(2, 2));
    write_json(&problem, &file);

    // No --delay flag: the embedded distribution drives the run.
    let out = ws.path("pernode.csv");
    let sim = run(&[
        "simulate",
        &format!("--problem={problem}"),
        "--per-node",
        "--runs=50",
        "--k-max=120",
        "--seed=2",
        &format!("--out={out}"),
    ]);
    assert_exit(&sim, 0, "per-node simulate");
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("# level: per-node"));
    let (_, rows) = csv_rows(&text);
    let mean: f64 = rows.last().unwrap()[1].parse().unwrap();
    assert!((mean - 1.0).abs() <= 1e-3);
}

#[test]
fn solve_exit_codes_and_measured_delay_chain() {
    let ws = Workspace::new("solve");
    let problem = ws.path("t1.json");
    write_json(&problem, &reference_problem(2, 0.5));

    let summary = ws.path("run.csv");
    let measured = ws.path("measured.json");
    let ok = run(&[
        "solve",
        &format!("--problem={problem}"),
        "--scheme=sto-async",
        "--threads=2",
        "--q=2",
        "--seed=1",
        &format!("--emit-delay={measured}"),
        &format!("--out={summary}"),
    ]);
    assert_exit(&ok, 0, "converged solve");
    let text = std::fs::read_to_string(&summary).unwrap();
    let (header, rows) = csv_rows(&text);
    assert_eq!(
        header,
        ["scheme", "threads", "q", "iterations", "converged", "final_residual", "wall_seconds"]
    );
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "sto-async");
    assert_eq!(rows[0][4], "true");
    assert!(rows[0][5].parse::<f64>().unwrap() <= 1e-5);

    // The measured staleness distribution feeds straight back into analysis.
    let delay_file = format::read_delay(measured.as_ref()).unwrap();
    assert_eq!(delay_file.q, 2);
    assert_eq!(delay_file.per_node.len(), 2);
    let prefix = ws.path("measured");
    let analyze = run(&[
        "analyze",
        &format!("--problem={problem}"),
        &format!("--delay={measured}"),
        &format!("--out={prefix}"),
        "--require-stable",
    ]);
    assert_exit(&analyze, 0, "analyze with measured staleness");

    // Residual tolerance not reached within the budget: exit 2.
    let capped = run(&[
        "solve",
        &format!("--problem={problem}"),
        "--max-iters=1",
    ]);
    assert_exit(&capped, 2, "iteration-capped solve");
}

#[test]
fn input_errors_exit_four() {
    let ws = Workspace::new("errors");
    let problem = ws.path("t1.json");
    write_json(&problem, &reference_problem(2, 0.5));

    let missing = run(&["solve", "--problem=/nonexistent/p.json"]);
    assert_exit(&missing, 4, "missing problem file");

    let unknown_flag = run(&["solve", &format!("--problem={problem}"), "--frobnicate"]);
    assert_exit(&unknown_flag, 4, "unknown flag");

    let malformed = ws.path("broken.json");
    std::fs::write(&malformed, b"{ not json").unwrap();
    let bad_json = run(&["solve", &format!("--problem={malformed}")]);
    assert_exit(&bad_json, 4, "malformed problem file");

    let no_delay = run(&[
        "analyze",
        &format!("--problem={problem}"),
        &format!("--out={}", ws.path("x")),
    ]);
    assert_exit(&no_delay, 4, "missing staleness model");

    // The joint-age cross-check is size-gated.
    let wide = ws.path("wide.json");
    let mut file = reference_problem(2, 0.5);
    let extra = file.blocks[0].clone();
    file.blocks.push(extra.clone());
    file.blocks.push(extra);
    file.n_blocks = 4;
    write_json(&wide, &file);
    let delay = ws.path("fair4.json");
    write_json(&delay, &fair_delay(4, 2));
    let gated = run(&[
        "analyze",
        &format!("--problem={wide}"),
        &format!("--delay={delay}"),
        &format!("--out={}", ws.path("wide")),
        "--full-enumeration",
    ]);
    assert_exit(&gated, 4, "full enumeration beyond the size gate");

    let help = run(&["--help"]);
    assert_exit(&help, 0, "--help");
    let version = run(&["--version"]);
    assert_exit(&version, 0, "--version");
}

#[test]
fn bench_sweeps_report_rows_per_repeat() {
    let ws = Workspace::new("bench");
    let problem = ws.path("t1.json");
    write_json(&problem, &reference_problem(2, 0.5));

    let out = ws.path("bench.csv");
    let bench = run(&[
        "bench",
        &format!("--problem={problem}"),
        "--threads=1",
        "--repeats=3",
        "--q=2",
        &format!("--out={out}"),
    ]);
    assert_exit(&bench, 0, "bench sweep");

    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("# serial_reference_seconds:"));
    let (header, rows) = csv_rows(&text);
    assert_eq!(
        header,
        [
            "scheme",
            "threads",
            "repeat",
            "wall_seconds",
            "iterations",
            "converged",
            "median_wall_seconds",
            "speedup"
        ]
    );
    // Three schemes × one thread count × three repeats.
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r[1] == "1" && r[5] == "true"));
    for scheme in ["sync", "det-async", "sto-async"] {
        assert_eq!(rows.iter().filter(|r| r[0] == scheme).count(), 3);
    }
    // The serial synchronous cell is its own reference, so its speedup can
    // only drift by scheduler noise.
    let sync_speedup: f64 =
        rows.iter().find(|r| r[0] == "sync").unwrap()[7].parse().unwrap();
    assert!((0.1..=10.0).contains(&sync_speedup), "speedup {sync_speedup} implausible");

    // Forced non-convergence is recorded in the rows, not an error.
    let capped_out = ws.path("capped.csv");
    let capped = run(&[
        "bench",
        &format!("--problem={problem}"),
        "--threads=1",
        "--repeats=2",
        "--q=2",
        "--max-iters=1",
        &format!("--out={capped_out}"),
    ]);
    assert_exit(&capped, 0, "bench with an iteration cap");
    let (_, rows) = csv_rows(&std::fs::read_to_string(&capped_out).unwrap());
    assert!(rows.iter().all(|r| r[5] == "false"));
    assert!(rows.iter().all(|r| r[4] == "1"));
}
