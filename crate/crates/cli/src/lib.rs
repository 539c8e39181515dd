//! Command-line harness: `run`, `compare` and `validate` on scenario files.
//!
//! Every run writes plot-ready CSV series (8 commented header lines, then a
//! column row) and a JSON report with the diagnostics of its mode.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use closedloop::exact::{
    default_window, extract_adiabatic_series, integrate_closed_loop, window_average,
    AdiabaticSeries, Trajectory,
};
use closedloop::linalg::interp_linear;
use closedloop::mixed::{integrate_mixed, MixedPath};
use closedloop::reduced::{
    classify_longtime, integrate_reduced, max_identity_residual, path_identity_residual,
    relative_entropy, Classification, ReducedPath,
};
use closedloop::scenario::{
    parse_scenario_with_overrides, render, validate_scenario, RunMode, ScenarioConfig,
    ValidationReport,
};
use closedloop::spectral::{connection_analytic, eigenframe, payoff_matrices, adiabatic_matrix};
use closedloop::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_USAGE: i32 = 3;

const FRAME_PROBES: usize = 16;

#[derive(Debug, Parser)]
#[command(name = "closedloop", version, about = "Closed-loop adiabatic dynamics from scenario files")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct CommonArgs {
    /// Scenario file.
    scenario: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed for the randomized frame probe.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// key=value replacing a scenario entry (dotted keys reach into sections).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// key=v1,v2,... runs one scenario per value, concurrently.
    #[arg(long, value_name = "KEY=V1,V2,...")]
    sweep: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate the scenario in its declared mode.
    Run(CommonArgs),
    /// Run exact and reduced dynamics and report their deviation.
    Compare(CommonArgs),
    /// Check gaps, resonances and adiabaticity without integrating.
    Validate {
        scenario: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

/// Failure of one invocation, carrying its exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Usage(String),
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

fn runtime(e: Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn validation(e: Error) -> CliError {
    CliError::Validation(e.to_string())
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario_name: String,
    pub mode: String,
    pub wall_time_seconds: f64,
    pub diagnostics: BTreeMap<String, Value>,
    pub artifact_paths: Vec<String>,
}

/// Parses `argv` (without the program name), runs the command and returns
/// the process exit code. Messages go to stdout/stderr.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args = std::iter::once("closedloop".to_string()).chain(argv.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Validate {
            scenario,
            overrides,
        } => validate_command(&scenario, &overrides).map(|text| print!("{text}")),
        Command::Run(args) => run_command(&args, false),
        Command::Compare(args) => run_command(&args, true),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn split_pair(s: &str) -> Result<(String, String), CliError> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| CliError::Usage(format!("expected KEY=VALUE, got `{s}`")))
}

/// Reads and parses a scenario file with overrides applied.
pub fn load_scenario(path: &Path, overrides: &[String]) -> Result<(ScenarioConfig, String), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: file not found ({e})", path.display())))?;
    let pairs = overrides
        .iter()
        .map(|s| split_pair(s))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = parse_scenario_with_overrides(&text, &pairs).map_err(validation)?;
    let hash = hex(&Sha256::digest(render(&cfg).as_bytes()));
    Ok((cfg, hash))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn validate_command(path: &Path, overrides: &[String]) -> Result<String, CliError> {
    let (cfg, _) = load_scenario(path, overrides)?;
    let report = validate_scenario(&cfg).map_err(validation)?;
    Ok(format_validation(&cfg, &report))
}

pub fn format_validation(cfg: &ScenarioConfig, report: &ValidationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario: {}", cfg.name);
    let _ = writeln!(s, "mode: {}", cfg.mode.as_str());
    match (report.min_gap, report.min_gap_at) {
        (Some(g), Some(r)) => {
            let _ = writeln!(s, "min_gap: {g:.6e} at R = {r}");
        }
        _ => {
            let _ = writeln!(s, "min_gap: unknown (no energies given)");
        }
    }
    if let Some(x) = report.adiabaticity {
        let _ = writeln!(s, "adiabaticity: {x:.6e}");
    }
    let _ = writeln!(s, "max_frame_expectation: {:.6e}", report.max_frame_expectation);
    let _ = writeln!(s, "resonances: {}", report.resonances.len());
    if report.warnings.is_empty() {
        let _ = writeln!(s, "warnings: none");
    }
    for w in &report.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

fn run_command(args: &CommonArgs, compare: bool) -> Result<(), CliError> {
    let Some(sweep) = &args.sweep else {
        let report = execute(&args.scenario, &args.overrides, &args.out, args.seed, compare)?;
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        return Ok(());
    };
    let (key, values) = split_pair(sweep)?;
    let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(CliError::Usage(format!("sweep `{sweep}` lists no values")));
    }
    let results: Vec<Result<RunReport, CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = values
            .iter()
            .map(|value| {
                let mut overrides = args.overrides.clone();
                overrides.push(format!("{key}={value}"));
                let out = args.out.join(format!("{key}-{value}"));
                scope.spawn(move || execute(&args.scenario, &overrides, &out, args.seed, compare))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Runtime("sweep worker panicked".into()))))
            .collect()
    });
    let mut worst: Option<CliError> = None;
    for (value, result) in values.iter().zip(results) {
        match result {
            Ok(report) => println!("{key}={value}: {}", serde_json::to_string(&report).expect("report serializes")),
            Err(e) => {
                eprintln!("{key}={value}: error: {}", e.message());
                if worst.as_ref().is_none_or(|w| e.exit_code() > w.exit_code()) {
                    worst = Some(e);
                }
            }
        }
    }
    worst.map_or(Ok(()), Err)
}

/// Loads, validates and runs one scenario, writing CSVs and the JSON report
/// into `out`.
pub fn execute(
    scenario: &Path,
    overrides: &[String],
    out: &Path,
    seed: u64,
    force_compare: bool,
) -> Result<RunReport, CliError> {
    let start = Instant::now();
    let (cfg, hash) = load_scenario(scenario, overrides)?;
    validate_scenario(&cfg).map_err(validation)?;
    let mode = if force_compare { RunMode::Compare } else { cfg.mode };
    if mode == RunMode::Compare && cfg.linear().is_none() {
        return Err(CliError::Validation("compare needs a linear model".into()));
    }
    fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;

    let meta = CsvMeta {
        scenario: cfg.name.clone(),
        hash,
        mode: mode.as_str().to_string(),
        dim: cfg.dim,
        epsilon: cfg.epsilon,
        seed,
    };
    let mut diagnostics = BTreeMap::new();
    let mut artifacts = Vec::new();
    let base = |series: &str| out.join(format!("{}_{series}.csv", cfg.name));

    match mode {
        RunMode::Exact => {
            let (traj, series) = run_exact(&cfg)?;
            artifacts.push(write_exact_csv(&base("exact"), &meta, &traj)?);
            artifacts.push(write_adiabatic_csv(&base("adiabatic"), &meta, &series)?);
            exact_diagnostics(&traj, &series, &mut diagnostics);
        }
        RunMode::Reduced => {
            let path = run_reduced(&cfg)?;
            let analysis = analyse_reduced(&cfg, &path)?;
            artifacts.push(write_reduced_csv(&base("reduced"), &meta, &path, &analysis.entropy)?);
            diagnostics.extend(analysis.diagnostics);
        }
        RunMode::Mixed => {
            let path = run_mixed(&cfg)?;
            artifacts.push(write_mixed_csv(&base("mixed"), &meta, &path)?);
            diagnostics.insert("trace_drift_max".into(), json!(path.max_trace_drift()));
            diagnostics.insert("max_asymmetry".into(), json!(path.max_asymmetry));
            diagnostics.insert(
                "min_eigenvalue".into(),
                json!(path.min_eigenvalue.iter().cloned().fold(f64::INFINITY, f64::min)),
            );
            diagnostics.insert(
                "final_max_coherence".into(),
                json!(path.max_off_diagonal(path.taus.len() - 1)),
            );
        }
        RunMode::Compare => {
            let cmp = compare_dynamics(&cfg)?;
            artifacts.push(write_exact_csv(&base("exact"), &meta, &cmp.trajectory)?);
            artifacts.push(write_adiabatic_csv(&base("adiabatic"), &meta, &cmp.series)?);
            let analysis = analyse_reduced(&cfg, &cmp.reduced)?;
            artifacts.push(write_reduced_csv(&base("reduced"), &meta, &cmp.reduced, &analysis.entropy)?);
            artifacts.push(write_deviation_csv(&base("deviation"), &meta, &cmp)?);
            exact_diagnostics(&cmp.trajectory, &cmp.series, &mut diagnostics);
            diagnostics.extend(analysis.diagnostics);
            diagnostics.insert("sup_norm_deviation".into(), json!(cmp.sup_norm_deviation));
            diagnostics.insert("tau_f".into(), json!(cmp.tau_f));
        }
    }
    if let Some(probe) = frame_probe(&cfg, seed).map_err(runtime)? {
        diagnostics.insert("frame_probe_max_residual".into(), json!(probe));
    }

    let report_path = out.join(format!("{}_{}_report.json", cfg.name, mode.as_str()));
    artifacts.push(report_path.display().to_string());
    let report = RunReport {
        scenario_name: cfg.name.clone(),
        mode: mode.as_str().to_string(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        diagnostics,
        artifact_paths: artifacts,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&report_path, text + "\n")
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", report_path.display())))?;
    Ok(report)
}

fn exact_diagnostics(traj: &Trajectory, series: &AdiabaticSeries, out: &mut BTreeMap<String, Value>) {
    out.insert("norm_drift_max".into(), json!(traj.max_norm_drift()));
    out.insert("completeness_error".into(), json!(series.completeness_error()));
    out.insert("steps_accepted".into(), json!(traj.stats.accepted));
    out.insert("steps_rejected".into(), json!(traj.stats.rejected));
    out.insert(
        "min_frame_gap".into(),
        json!(series.frame_gaps.iter().cloned().fold(f64::INFINITY, f64::min)),
    );
}

pub fn run_exact(cfg: &ScenarioConfig) -> Result<(Trajectory, AdiabaticSeries), CliError> {
    let model = cfg.linear().ok_or_else(|| CliError::Validation("exact runs need a linear model".into()))?;
    let feedback = cfg.feedback().map_err(validation)?;
    let psi0 = cfg.initial_lab_state().map_err(validation)?;
    let horizon = cfg.fast_horizon().map_err(validation)?;
    let traj = integrate_closed_loop(model, &feedback, &psi0, cfg.r0, horizon, &cfg.exact_options())
        .map_err(runtime)?;
    let series = extract_adiabatic_series(&traj, model, cfg.gap_tol).map_err(runtime)?;
    Ok((traj, series))
}

pub fn run_reduced(cfg: &ScenarioConfig) -> Result<ReducedPath, CliError> {
    let source = cfg.payoff_source().map_err(validation)?;
    let initial = cfg.initial_simplex().map_err(validation)?;
    let horizon = cfg.slow_horizon().map_err(validation)?;
    integrate_reduced(&initial, &source, horizon, cfg.integrator.step).map_err(runtime)
}

pub fn run_mixed(cfg: &ScenarioConfig) -> Result<MixedPath, CliError> {
    let scenario = cfg.mixed_scenario().map_err(validation)?;
    let initial = cfg.initial_mixed().map_err(validation)?;
    let horizon = cfg.slow_horizon().map_err(validation)?;
    integrate_mixed(&initial, &scenario, horizon, cfg.integrator.step).map_err(runtime)
}

struct ReducedAnalysis {
    entropy: Vec<f64>,
    diagnostics: BTreeMap<String, Value>,
}

/// Classification at the initial payoffs, relative entropy to its reference
/// point and the time-average identity residual.
fn analyse_reduced(cfg: &ScenarioConfig, path: &ReducedPath) -> Result<ReducedAnalysis, CliError> {
    let source = cfg.payoff_source().map_err(validation)?;
    let a0 = source.at(cfg.r0).map_err(runtime)?.payoffs.a;
    let classification = classify_longtime(&a0, &path.states[0].p);
    let reference = match &classification {
        Classification::Conservative { fixed_point } => fixed_point.clone(),
        Classification::Extinction { limit, .. } => limit.clone(),
    };
    let entropy: Vec<f64> = path
        .states
        .iter()
        .map(|s| relative_entropy(&reference, &s.p).unwrap_or(f64::NAN))
        .collect();

    let mut d = BTreeMap::new();
    let residual = match max_identity_residual(path) {
        Some(r) => r,
        None => path_identity_residual(path, &source).map_err(runtime)?,
    };
    d.insert("tamo_residual_max".into(), json!(residual));
    match &classification {
        Classification::Conservative { fixed_point } => {
            d.insert("classification".into(), json!("conservative"));
            d.insert("fixed_point".into(), json!(fixed_point));
            let drift = entropy
                .iter()
                .map(|s| (s - entropy[0]).abs())
                .fold(0.0, f64::max);
            d.insert("entropy_drift_max".into(), json!(drift));
        }
        Classification::Extinction {
            limit,
            certificate,
            extinct,
        } => {
            d.insert("classification".into(), json!("extinction"));
            d.insert("fixed_point".into(), Value::Null);
            d.insert("limit".into(), json!(limit));
            d.insert("certificate".into(), json!(certificate));
            d.insert(
                "extinct_levels".into(),
                json!(extinct.iter().map(|l| l + 1).collect::<Vec<_>>()),
            );
        }
    }
    d.insert("min_pre_clamp".into(), json!(path.min_pre_clamp));
    Ok(ReducedAnalysis { entropy, diagnostics: d })
}

/// Exact and reduced dynamics of one scenario on a common slow-time grid.
pub struct Comparison {
    pub trajectory: Trajectory,
    pub series: AdiabaticSeries,
    pub reduced: ReducedPath,
    pub taus: Vec<f64>,
    /// Window-averaged exact populations, `[level][sample]`.
    pub exact_averaged: Vec<Vec<f64>>,
    /// Reduced populations on the exact grid, passed through the same window.
    pub reduced_averaged: Vec<Vec<f64>>,
    pub sup_norm_deviation: f64,
    pub tau_f: f64,
}

/// Runs both integrators and compares populations after identical window
/// averaging (width `integrator.tau_f`, or 20 fast periods of the smallest gap).
pub fn compare_dynamics(cfg: &ScenarioConfig) -> Result<Comparison, CliError> {
    let (trajectory, series) = run_exact(cfg)?;
    let reduced = run_reduced(cfg)?;
    let min_gap = series.frame_gaps.iter().cloned().fold(f64::INFINITY, f64::min);
    let tau_f = cfg.integrator.tau_f.unwrap_or_else(|| default_window(cfg.epsilon, min_gap));
    let taus = series.taus.clone();
    let d = series.dim();
    let mut exact_averaged = Vec::with_capacity(d);
    let mut reduced_averaged = Vec::with_capacity(d);
    let mut sup: f64 = 0.0;
    for l in 0..d {
        let exact = window_average(&taus, &series.populations[l], tau_f).map_err(runtime)?;
        let red_p = reduced.population(l);
        let on_grid: Vec<f64> = taus.iter().map(|&t| interp_linear(&reduced.taus, &red_p, t)).collect();
        let red = window_average(&taus, &on_grid, tau_f).map_err(runtime)?;
        for (x, y) in exact.iter().zip(&red) {
            sup = sup.max((x - y).abs());
        }
        exact_averaged.push(exact);
        reduced_averaged.push(red);
    }
    Ok(Comparison {
        trajectory,
        series,
        reduced,
        taus,
        exact_averaged,
        reduced_averaged,
        sup_norm_deviation: sup,
        tau_f,
    })
}

/// Anti-Hermiticity of the connection and antisymmetry of the payoffs at
/// random R in the scenario's range (linear models only).
fn frame_probe(cfg: &ScenarioConfig, seed: u64) -> Result<Option<f64>, Error> {
    let Some(model) = cfg.linear() else { return Ok(None) };
    use closedloop::spectral::HamiltonianModel;
    let (lo, hi) = cfg.r_range.unwrap_or((cfg.r0 - 1.0, cfg.r0 + 1.0));
    let observable = cfg.lab_observable()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..FRAME_PROBES {
        let r = rng.random_range(lo..=hi);
        let Ok(frame) = eigenframe(&model.hamiltonian(r), r, cfg.gap_tol) else { continue };
        let conn = connection_analytic(&frame, &model.derivative(r), cfg.gap_tol)?;
        let payoffs = payoff_matrices(&conn, &adiabatic_matrix(&observable, &frame)?)?;
        worst = worst
            .max(conn.anti_hermitian_residual())
            .max((&payoffs.a + payoffs.a.transpose()).amax())
            .max((&payoffs.b - payoffs.b.transpose()).amax());
    }
    Ok(Some(worst))
}

// ------------------------------------------------------------------- CSV

struct CsvMeta {
    scenario: String,
    hash: String,
    mode: String,
    dim: usize,
    epsilon: f64,
    seed: u64,
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_csv(
    path: &Path,
    meta: &CsvMeta,
    series: &str,
    columns: &[String],
    rows: impl Iterator<Item = Vec<f64>>,
) -> Result<String, CliError> {
    let mut s = String::new();
    let _ = writeln!(s, "# closedloop {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "# scenario: {}", meta.scenario);
    let _ = writeln!(s, "# scenario_sha256: {}", meta.hash);
    let _ = writeln!(s, "# mode: {}", meta.mode);
    let _ = writeln!(s, "# series: {series}");
    let _ = writeln!(s, "# dim: {}", meta.dim);
    let _ = writeln!(s, "# epsilon: {}", num(meta.epsilon));
    let _ = writeln!(s, "# seed: {}", meta.seed);
    let _ = writeln!(s, "{}", columns.join(","));
    for row in rows {
        let cells: Vec<String> = row.into_iter().map(num).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    fs::write(path, s).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(path.display().to_string())
}

fn indexed(prefix: &str, d: usize) -> impl Iterator<Item = String> + '_ {
    (1..=d).map(move |i| format!("{prefix}_{i}"))
}

fn write_exact_csv(path: &Path, meta: &CsvMeta, traj: &Trajectory) -> Result<String, CliError> {
    let d = meta.dim;
    let mut cols = vec!["t".to_string()];
    for i in 1..=d {
        cols.push(format!("re_psi_{i}"));
        cols.push(format!("im_psi_{i}"));
    }
    cols.push("r".into());
    cols.push("norm".into());
    let rows = (0..traj.len()).map(|k| {
        let mut row = vec![traj.times[k]];
        for z in traj.states[k].iter() {
            row.push(z.re);
            row.push(z.im);
        }
        row.push(traj.r_values[k]);
        row.push(traj.states[k].norm());
        row
    });
    write_csv(path, meta, "exact", &cols, rows)
}

fn write_adiabatic_csv(path: &Path, meta: &CsvMeta, s: &AdiabaticSeries) -> Result<String, CliError> {
    let d = meta.dim;
    let cols: Vec<String> = ["t".to_string(), "tau".to_string()]
        .into_iter()
        .chain(indexed("p", d))
        .chain(indexed("phi", d))
        .chain(indexed("gamma", d))
        .collect();
    let rows = (0..s.len()).map(|k| {
        let mut row = vec![s.times[k], s.taus[k]];
        row.extend((0..d).map(|l| s.populations[l][k]));
        row.extend((0..d).map(|l| s.phases[l][k]));
        row.extend((0..d).map(|l| s.gamma[l][k]));
        row
    });
    write_csv(path, meta, "adiabatic", &cols, rows)
}

fn write_reduced_csv(
    path: &Path,
    meta: &CsvMeta,
    p: &ReducedPath,
    entropy: &[f64],
) -> Result<String, CliError> {
    let d = meta.dim;
    let cols: Vec<String> = std::iter::once("tau".to_string())
        .chain(indexed("p", d))
        .chain(indexed("phi", d))
        .chain(["r_bar".to_string(), "entropy".to_string()])
        .collect();
    let rows = (0..p.taus.len()).map(|k| {
        let s = &p.states[k];
        let mut row = vec![p.taus[k]];
        row.extend(&s.p);
        row.extend(&s.phi);
        row.push(s.r_bar);
        row.push(entropy[k]);
        row
    });
    write_csv(path, meta, "reduced", &cols, rows)
}

fn write_mixed_csv(path: &Path, meta: &CsvMeta, p: &MixedPath) -> Result<String, CliError> {
    let d = meta.dim;
    let mut cols = vec!["tau".to_string()];
    for n in 1..=d {
        for m in 1..=d {
            cols.push(format!("re_c_{n}_{m}"));
            cols.push(format!("im_c_{n}_{m}"));
        }
    }
    cols.push("r_bar".into());
    cols.push("trace".into());
    let rows = (0..p.taus.len()).map(|k| {
        let s = &p.states[k];
        let mut row = vec![p.taus[k]];
        for n in 0..d {
            for m in 0..d {
                row.push(s.cbar[(n, m)].re);
                row.push(s.cbar[(n, m)].im);
            }
        }
        row.push(s.r_bar);
        row.push(1.0 + p.trace_drift[k]);
        row
    });
    write_csv(path, meta, "mixed", &cols, rows)
}

fn write_deviation_csv(path: &Path, meta: &CsvMeta, c: &Comparison) -> Result<String, CliError> {
    let d = meta.dim;
    let cols: Vec<String> = std::iter::once("tau".to_string())
        .chain(indexed("p_exact", d))
        .chain(indexed("p_reduced", d))
        .chain(indexed("deviation", d))
        .collect();
    let rows = (0..c.taus.len()).map(|k| {
        let mut row = vec![c.taus[k]];
        row.extend((0..d).map(|l| c.exact_averaged[l][k]));
        row.extend((0..d).map(|l| c.reduced_averaged[l][k]));
        row.extend((0..d).map(|l| c.exact_averaged[l][k] - c.reduced_averaged[l][k]));
        row
    });
    write_csv(path, meta, "deviation", &cols, rows)
}
