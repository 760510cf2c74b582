//! Config-driven driver around `rabiflow-core`.
//!
//! Three commands share one TOML document:
//! - `orbits` lists critical orbits (reduced solver plus closed-form spectra),
//! - `flow` integrates the gradient flow from a configured start,
//! - `verify` runs the verification suites and exits non-zero on failure.
//!
//! Exit codes: `0` success, `1` a verification suite failed, `2` usage or
//! configuration error.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rabiflow_core::critical::{constant_family, ellipsoid_spectrum, realize_loop, solve_reduced, CriticalOrbit};
use rabiflow_core::flow::{flow_run, FlowReport};
use rabiflow_core::loopspace::random_loop;
use rabiflow_core::verify::{
    check_fundamental_lemma, check_invariance, check_theorem_a, corrupted_orbit, estimate_constants, gradient_suite,
    random_shifts, with_threads, witness_loop, GradientSuiteConfig, InvarianceConfig, SamplePlan, TheoremAConfig,
    VerificationReport, Violation,
};
use rabiflow_core::{Error, FlowState, ProductSystem, TorusShift};
use serde::Serialize;

pub use config::{Config, ConfigError, FlowStart};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    #[value(name = "theorem-a")]
    TheoremA,
    Lemma,
    Invariance,
    Gradient,
    All,
}

impl Suite {
    fn expand(self) -> Vec<Suite> {
        match self {
            Suite::All => vec![Suite::TheoremA, Suite::Lemma, Suite::Invariance, Suite::Gradient],
            s => vec![s],
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "rabiflow",
    version,
    about = "Gradient flows and critical orbits of the delayed action"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "RABIFLOW_THREADS")]
    pub threads: Option<usize>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output format; inferred from the output extension when omitted.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List critical orbits.
    Orbits {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Integrate the gradient flow and write its trace.
    Flow {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run verification suites.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
    },
}

/// Settings shared by every command.
#[derive(Clone, Debug, Default)]
pub struct Options {
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub format: Option<Format>,
}

#[derive(Debug)]
pub struct CliError(pub String);

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError(e.0)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError(e.to_string())
    }
}

fn load(path: &Path, opts: &Options) -> Result<(Config, ProductSystem), CliError> {
    let mut config = Config::load(path)?;
    if let Some(seed) = opts.seed {
        config.flow.seed = seed;
        config.verify.seed = seed;
    }
    let sys = config.system()?;
    Ok((config, sys))
}

fn resolve_format(opts: &Options, out: &Path, allowed: &[Format], fallback: Format) -> Result<Format, CliError> {
    let format = opts
        .format
        .unwrap_or_else(|| match out.extension().and_then(|e| e.to_str()) {
            Some("csv") => Format::Csv,
            Some("json") => Format::Json,
            Some("txt") => Format::Text,
            _ => fallback,
        });
    if allowed.contains(&format) {
        Ok(format)
    } else {
        Err(CliError(
            format!("format {format:?} is not available for this command").to_lowercase(),
        ))
    }
}

fn write_output(out: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(out, bytes).map_err(|e| CliError(format!("{}: {e}", out.display())))
}

fn in_pool<T: Send>(opts: &Options, f: impl FnOnce() -> Result<T, CliError> + Send) -> Result<T, CliError> {
    with_threads(opts.threads, f)?
}

// ---------------------------------------------------------------------------
// orbits

/// One line of the orbit listing.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrbitRow {
    /// `reduced`, `ellipsoid` or `constant`.
    pub source: String,
    pub k: Vec<i64>,
    pub h: Option<Vec<f64>>,
    pub tau: Option<f64>,
    pub action: Option<f64>,
    pub family_flag: Option<String>,
    pub residual: Option<f64>,
    /// `ok`, or the solver failure for this winding vector.
    pub status: String,
}

fn status_of(e: &Error) -> &'static str {
    match e {
        Error::NoConvergence { .. } => "no_convergence",
        Error::InfeasibleBranch(_) => "infeasible_branch",
        Error::SingularSystem(_) => "singular_system",
        _ => "error",
    }
}

pub fn orbit_rows(config: &Config, sys: &ProductSystem) -> Result<Vec<OrbitRow>, CliError> {
    let mut rows = Vec::new();
    for (i, k) in config.orbits.k.iter().enumerate() {
        let row = match solve_reduced(sys, k, &config.initial_guess(i)) {
            Ok(o) => OrbitRow {
                source: "reduced".into(),
                k: o.k,
                h: Some(o.h),
                tau: Some(o.tau),
                action: Some(o.action),
                family_flag: None,
                residual: Some(o.residual),
                status: "ok".into(),
            },
            Err(e @ (Error::NoConvergence { .. } | Error::InfeasibleBranch(_) | Error::SingularSystem(_))) => {
                OrbitRow {
                    source: "reduced".into(),
                    k: k.clone(),
                    h: None,
                    tau: None,
                    action: None,
                    family_flag: None,
                    residual: None,
                    status: status_of(&e).into(),
                }
            }
            Err(e) => return Err(e.into()),
        };
        rows.push(row);
    }
    if let Some(k_max) = config.orbits.ellipsoid_k_max {
        let axes = sys
            .coupling()
            .ellipsoid_axes()
            .ok_or_else(|| CliError("orbits.ellipsoid_k_max needs an ellipsoid coupling".into()))?;
        for e in ellipsoid_spectrum(&axes, k_max)? {
            rows.push(OrbitRow {
                source: "ellipsoid".into(),
                k: e.k,
                h: Some(e.h),
                tau: Some(e.tau),
                action: Some(e.action),
                family_flag: Some(e.flag.as_str().into()),
                residual: None,
                status: "ok".into(),
            });
        }
    }
    if let Some(e) = constant_family(sys) {
        rows.push(OrbitRow {
            source: "constant".into(),
            k: e.k,
            h: Some(e.h),
            tau: Some(e.tau),
            action: Some(e.action),
            family_flag: Some(e.flag.as_str().into()),
            residual: None,
            status: "ok".into(),
        });
    }
    Ok(rows)
}

fn number(x: f64) -> String {
    format!("{x:?}")
}

fn cell(x: Option<f64>) -> String {
    x.map(number).unwrap_or_default()
}

fn orbit_csv(m: usize, rows: &[OrbitRow]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["source".to_string()];
    header.extend((1..=m).map(|i| format!("k_{i}")));
    header.extend((1..=m).map(|i| format!("h_{i}")));
    header.extend(["tau", "action", "family_flag", "residual", "status"].map(String::from));
    let csv_err = |e: csv::Error| CliError(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        let mut rec = vec![row.source.clone()];
        rec.extend(row.k.iter().map(|k| k.to_string()));
        match &row.h {
            Some(h) => rec.extend(h.iter().copied().map(number)),
            None => rec.extend(std::iter::repeat_n(String::new(), m)),
        }
        rec.push(cell(row.tau));
        rec.push(cell(row.action));
        rec.push(row.family_flag.clone().unwrap_or_default());
        rec.push(cell(row.residual));
        rec.push(row.status.clone());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError(e.to_string()))
}

pub fn cmd_orbits(config: &Path, out: &Path, opts: &Options) -> Result<Vec<OrbitRow>, CliError> {
    let (config, sys) = load(config, opts)?;
    let format = resolve_format(opts, out, &[Format::Csv, Format::Json], Format::Csv)?;
    let rows = in_pool(opts, || orbit_rows(&config, &sys))?;
    let bytes = match format {
        Format::Json => json_bytes(&rows)?,
        _ => orbit_csv(sys.m(), &rows)?,
    };
    write_output(out, &bytes)?;
    Ok(rows)
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

// ---------------------------------------------------------------------------
// flow

fn solved_orbit(config: &Config, sys: &ProductSystem, index: usize) -> Result<CriticalOrbit, CliError> {
    let k = config
        .orbits
        .k
        .get(index)
        .ok_or_else(|| CliError(format!("no orbits.k entry with index {index}")))?;
    solve_reduced(sys, k, &config.initial_guess(index)).map_err(|e| CliError(format!("orbit {k:?}: {e}")))
}

/// The configured starting state of the flow.
pub fn flow_start(config: &Config, sys: &ProductSystem) -> Result<FlowState, CliError> {
    let f = &config.flow;
    let n = config.discretization.n_samples;
    let state = match f.start {
        FlowStart::Orbit => {
            let orbit = solved_orbit(config, sys, f.orbit_index)?;
            let mut state = realize_loop(sys, &orbit, n, f.r)?;
            if f.perturbation != 0.0 {
                let dir = random_loop(sys, n, f.seed, 2.0, 1.0)?;
                state.curve.add_scaled(f.perturbation / dir.l2_norm(), &dir);
            }
            state
        }
        FlowStart::Random => FlowState::new(random_loop(sys, n, f.seed, 2.0, f.amplitude)?, f.tau, f.r)?,
    };
    Ok(state)
}

pub fn cmd_flow(config: &Path, out: &Path, opts: &Options) -> Result<FlowReport, CliError> {
    let (config, sys) = load(config, opts)?;
    let format = resolve_format(opts, out, &[Format::Csv, Format::Json], Format::Csv)?;
    let report = in_pool(opts, || {
        let start = flow_start(&config, &sys)?;
        Ok(flow_run(&sys, start, &config.flow.integrator())?)
    })?;
    let bytes = match format {
        Format::Json => json_bytes(&report)?,
        _ => {
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            buf
        }
    };
    write_output(out, &bytes)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// verify

fn theorem_a_report(config: &Config, sys: &ProductSystem) -> Result<VerificationReport, CliError> {
    let v = &config.verify;
    let mut orbits = (0..config.orbits.k.len())
        .map(|i| solved_orbit(config, sys, i))
        .collect::<Result<Vec<_>, _>>()?;
    if v.corrupt_h != 0.0 {
        orbits = orbits.iter().map(|o| corrupted_orbit(o, v.corrupt_h)).collect();
    }
    let cfg = TheoremAConfig {
        r_grid: v.r_grid.clone(),
        tol: v.tol,
        n_samples: config.discretization.n_samples,
        seed: v.seed,
        ..TheoremAConfig::default()
    };
    Ok(check_theorem_a(sys, &orbits, &cfg)?)
}

fn lemma_report(config: &Config, sys: &ProductSystem) -> Result<VerificationReport, CliError> {
    let v = &config.verify;
    let constants = match estimate_constants(sys, v.region_radius, v.grid_resolution, v.epsilon) {
        Ok(c) => c,
        Err(Error::HypothesisViolation { message, witness }) => {
            let mut report = VerificationReport::new("lemma");
            report.region_radius = Some(v.region_radius);
            report.push_violation(Violation {
                check: "hypothesis".into(),
                seed: v.seed,
                index: 0,
                source: message,
                r: 0.0,
                tau: 0.0,
                values: witness
                    .iter()
                    .enumerate()
                    .map(|(i, x)| (format!("x_{}", i + 1), *x))
                    .collect(),
                state: None,
            });
            return Ok(report);
        }
        Err(e) => return Err(e.into()),
    };
    let orbits = (0..config.orbits.k.len())
        .map(|i| solved_orbit(config, sys, i))
        .collect::<Result<Vec<_>, _>>()?;
    let plan = SamplePlan {
        n_samples: v.lemma_n_samples,
        random: v.lemma_random,
        perturbed: v.lemma_perturbed,
        near_circle: v.lemma_near_circle,
        flow_trajectories: v.lemma_flow_trajectories,
        flow_snapshots: v.lemma_flow_snapshots,
        flow_stride: v.lemma_flow_stride,
        tau_max: v.tau_max,
        r_values: v.r_values.clone(),
        seed: v.seed,
        orbits,
    };
    Ok(check_fundamental_lemma(sys, &constants, &plan)?)
}

fn invariance_report(config: &Config, sys: &ProductSystem) -> Result<VerificationReport, CliError> {
    let v = &config.verify;
    let n = config.discretization.n_samples;
    let m = sys.m();
    let default_witness = m == 2 && !sys.coupling().is_linear();
    let use_witness = v.invariance_witness.unwrap_or(default_witness);
    if use_witness && m != 2 {
        return Err(CliError("verify.invariance_witness needs exactly two factors".into()));
    }
    let curve = if m == 2 {
        witness_loop(n)?
    } else {
        random_loop(sys, n, v.seed, 2.0, 0.3)?
    };
    let mut cfg = InvarianceConfig::new(random_shifts(m, v.invariance_shifts, v.seed));
    cfg.r_values = v.r_values.clone();
    if use_witness {
        cfg.witness = Some(TorusShift::new(vec![0.0, 0.5]));
    }
    Ok(check_invariance(sys, &curve, 1.0, &cfg)?)
}

fn gradient_report(config: &Config, sys: &ProductSystem) -> Result<VerificationReport, CliError> {
    let v = &config.verify;
    let cfg = GradientSuiteConfig {
        n_states: v.gradient_states,
        n_dirs: v.gradient_dirs,
        n_samples: v.gradient_n_samples,
        seed: v.seed,
        ..GradientSuiteConfig::default()
    };
    Ok(gradient_suite(sys, &cfg)?)
}

pub fn run_suites(config: &Config, sys: &ProductSystem, suite: Suite) -> Result<Vec<VerificationReport>, CliError> {
    suite
        .expand()
        .into_iter()
        .map(|s| match s {
            Suite::TheoremA => theorem_a_report(config, sys),
            Suite::Lemma => lemma_report(config, sys),
            Suite::Invariance => invariance_report(config, sys),
            Suite::Gradient => gradient_report(config, sys),
            Suite::All => unreachable!(),
        })
        .collect()
}

#[derive(Serialize)]
struct Combined<'a> {
    pass: bool,
    suites: &'a [VerificationReport],
}

/// Runs the suites and writes the report; returns whether every suite passed.
pub fn cmd_verify(config: &Path, suite: Suite, out: &Path, opts: &Options) -> Result<bool, CliError> {
    let (config, sys) = load(config, opts)?;
    let format = resolve_format(opts, out, &[Format::Json, Format::Text], Format::Json)?;
    let reports = in_pool(opts, || run_suites(&config, &sys, suite))?;
    let pass = reports.iter().all(|r| r.pass);
    let bytes = match (format, suite) {
        (Format::Text, _) => {
            let mut s = String::new();
            for (i, r) in reports.iter().enumerate() {
                if i > 0 {
                    s.push('\n');
                }
                s.push_str(&r.to_text());
            }
            if suite == Suite::All {
                let _ = writeln!(s, "\noverall  {}", if pass { "pass" } else { "fail" });
            }
            s.into_bytes()
        }
        (_, Suite::All) => json_bytes(&Combined { pass, suites: &reports })?,
        _ => json_bytes(&reports[0])?,
    };
    write_output(out, &bytes)?;
    Ok(pass)
}

// ---------------------------------------------------------------------------

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let opts = Options {
        threads: cli.threads,
        seed: cli.seed,
        format: cli.format,
    };
    let outcome = match &cli.command {
        Command::Orbits { config, out } => cmd_orbits(config, out, &opts).map(|rows| {
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!("{} orbits written to {} ({failed} unsolved)", rows.len(), out.display());
            EXIT_OK
        }),
        Command::Flow { config, out } => cmd_flow(config, out, &opts).map(|report| {
            let last = report.last();
            println!(
                "{:?} after {} steps: action {:e}, grad_norm {:e}, tau {:e}",
                report.termination, report.steps, last.action, last.grad_norm, last.tau
            );
            EXIT_OK
        }),
        Command::Verify { config, out, suite } => cmd_verify(config, *suite, out, &opts).map(|pass| {
            println!("{} ({})", if pass { "pass" } else { "FAIL" }, out.display());
            if pass {
                EXIT_OK
            } else {
                EXIT_FAILED
            }
        }),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}
