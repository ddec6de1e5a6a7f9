//! Command-line front end: parse → analyze → solve → integrate → verify.
//!
//! Exit codes are fixed for scripting: 0 ok, 2 model error, 3 non-stabilizing
//! chain, 4 inconsistent initial condition, 5 verification failure. All
//! randomness funnels through one `--seed` flag (environment fallback
//! `SRUSK_SEED`, default 42).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::constraints::{run_algorithm, AlgoOptions, ChainError, ChainStatus};
use crate::dynamics::{project_to_dual, solve_z, SolveMode};
use crate::expr::ZeroCfg;
use crate::geometry::Chart;
use crate::integrator::{
    drift_report, integrate, lift_initial_condition, sode_warnings, IntegrateError,
    IntegrateOptions,
};
use crate::legendre::Classification;
use crate::model::{parse_system, SystemSpec};
use crate::verification::{run_suite, SuiteOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_MODEL_ERROR: i32 = 2;
pub const EXIT_NON_STABILIZING: i32 = 3;
pub const EXIT_BAD_IC: i32 = 4;
pub const EXIT_VERIFY_FAILED: i32 = 5;

#[derive(Parser, Debug)]
#[command(
    name = "srusk",
    about = "Skinner-Rusk mixed-space dynamics for time-dependent Lagrangians",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Classify the model, run the constraint algorithm and solve for Z
    Analyze(AnalyzeArgs),
    /// Integrate the flow and write trajectory CSV/JSON plus a drift report
    Simulate(SimulateArgs),
    /// Run the verification suite; exit 0 iff all checks pass
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Model definition file (.lag)
    pub file: PathBuf,
    /// Seed for all randomized checks (fallback: SRUSK_SEED, then 42)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sample points for rank profiles and witness search
    #[arg(long, default_value_t = 50)]
    pub points: usize,
    /// Write the analysis report as JSON to this path
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Model definition file (.lag)
    pub file: PathBuf,
    /// Initial condition "t0,q1..qn,qd1..qdn" (falls back to the model's
    /// first ic block)
    #[arg(long)]
    pub ic: Option<String>,
    /// Integration step
    #[arg(long, default_value_t = 1e-3)]
    pub h: f64,
    /// Integration horizon
    #[arg(long = "T", default_value_t = 10.0)]
    pub horizon: f64,
    /// Bind a free parameter, e.g. --bind u1=0 (repeatable)
    #[arg(long = "bind")]
    pub bindings: Vec<String>,
    /// Output directory for trajectory files
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Disable per-step re-imposition of solved-form constraints
    #[arg(long)]
    pub no_project: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Model definition file (.lag)
    pub file: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sample points per numeric check
    #[arg(long, default_value_t = 50)]
    pub points: usize,
    /// Write the verification report as JSON to this path
    /// (default: `<model>_verify.json` in the current directory)
    #[arg(long)]
    pub json: Option<PathBuf>,
}

pub fn effective_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| std::env::var("SRUSK_SEED").ok().and_then(|s| s.parse().ok()))
        .unwrap_or(crate::expr::DEFAULT_SEED)
}

fn load_model(path: &Path) -> Result<SystemSpec, i32> {
    let source = match std::fs::read_to_string(path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            return Err(EXIT_MODEL_ERROR);
        }
    };
    parse_system(&source).map_err(|e| {
        eprintln!("{}", e.with_file(&path.display().to_string()));
        EXIT_MODEL_ERROR
    })
}

#[derive(Serialize)]
pub struct AnalyzeReport {
    pub model: String,
    pub classification: String,
    pub hessian_rank: usize,
    pub chain: crate::constraints::ChainReport,
    pub vector_field: Option<crate::dynamics::VectorFieldReport>,
    pub graph_refined_field: Option<crate::dynamics::VectorFieldReport>,
    pub config: serde_json::Value,
}

/// Analysis pipeline shared by the CLI and the C bindings: run the chain,
/// solve for Z where possible, and assemble the JSON-serializable report.
pub fn build_analyze_report(
    spec: &SystemSpec,
    seed: u64,
    points: usize,
) -> Result<(AnalyzeReport, ChainStatus), ChainError> {
    let mut algo = AlgoOptions::with_seed(seed);
    algo.witnesses_per_level = points.max(1);
    let chain = run_algorithm(spec, &algo)?;
    let classification = chain.regularity.classification;
    let cfg = ZeroCfg::with_seed(seed);
    let raw =
        chain.is_stabilized().then(|| solve_z(spec, &chain, SolveMode::Raw, &cfg).ok()).flatten();
    let refined = (chain.is_stabilized() && classification == Classification::Regular)
        .then(|| solve_z(spec, &chain, SolveMode::GraphRefined, &cfg).ok())
        .flatten();
    let status = chain.status;
    Ok((
        AnalyzeReport {
            model: spec.display_name(),
            classification: format!("{classification:?}"),
            hessian_rank: chain.regularity.rank(),
            chain: chain.report(),
            vector_field: raw.as_ref().map(|z| z.report()),
            graph_refined_field: refined.as_ref().map(|z| z.report()),
            config: json!({"seed": seed, "points": points}),
        },
        status,
    ))
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> i32 {
    let spec = match load_model(&args.file) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let seed = effective_seed(args.seed);
    let mut algo = AlgoOptions::with_seed(seed);
    algo.witnesses_per_level = args.points.max(1);
    let chain = match run_algorithm(&spec, &algo) {
        Ok(c) => c,
        Err(ChainError::VariableRank(msg)) => {
            eprintln!("{}: variable-rank Hessian: {msg}", args.file.display());
            return EXIT_MODEL_ERROR;
        }
        Err(e) => {
            eprintln!("{}: {e}", args.file.display());
            return EXIT_MODEL_ERROR;
        }
    };

    let classification = chain.regularity.classification;
    let cfg = ZeroCfg::with_seed(seed);
    let raw = chain.is_stabilized().then(|| solve_z(&spec, &chain, SolveMode::Raw, &cfg).ok()).flatten();
    let refined = (chain.is_stabilized() && classification == Classification::Regular)
        .then(|| solve_z(&spec, &chain, SolveMode::GraphRefined, &cfg).ok())
        .flatten();

    // human-readable summary
    println!("model: {}", spec.display_name());
    println!("regularity: {classification}");
    match chain.status {
        ChainStatus::Stabilized(k) => {
            println!("constraint chain: stabilized at level {k} ({} levels)", chain.levels.len())
        }
        ChainStatus::EmptyFinal => println!("constraint chain: empty final set (no dynamics)"),
        ChainStatus::MaxIterationsExceeded => println!("constraint chain: did not stabilize"),
    }
    for level in &chain.levels {
        if level.level == 1 {
            continue;
        }
        let rendered: Vec<String> = level.constraints.iter().map(|c| c.to_string()).collect();
        println!("  level {}: {{{}}}", level.level, rendered.join(", "));
    }
    match (&raw, &refined) {
        (_, Some(z)) => {
            println!("Z: unique on graph_L (graph-refined); no free parameters");
            for (c, e) in &z.components {
                println!("  Z_{} = {e}", c.name());
            }
        }
        (Some(z), None) => {
            println!(
                "Z: solution family on the final level; {} free parameter(s) {}",
                z.free_params.len(),
                z.free_params.join(", ")
            );
            for (c, e) in &z.components {
                println!("  Z_{} = {e}", c.name());
            }
            if !z.sode_residuals.is_empty() {
                let rendered: Vec<String> =
                    z.sode_residuals.iter().map(|r| format!("{r} = 0")).collect();
                println!(
                    "  second-order consistency holds where {} (reported, not imposed)",
                    rendered.join(", ")
                );
            }
        }
        (None, None) => println!("Z: not solvable on this chain"),
    }
    if let Some(z) = &refined {
        if let Ok(dual) = project_to_dual(&spec, z) {
            println!("dual projection available on (t,q,p,qd); note: {}", dual.globality_warning);
        }
    }

    if let Some(json_path) = &args.json {
        let report = AnalyzeReport {
            model: spec.display_name(),
            classification: format!("{classification:?}"),
            hessian_rank: chain.regularity.rank(),
            chain: chain.report(),
            vector_field: raw.as_ref().map(|z| z.report()),
            graph_refined_field: refined.as_ref().map(|z| z.report()),
            config: json!({"seed": seed, "points": args.points}),
        };
        if let Err(e) = std::fs::write(json_path, serde_json::to_string_pretty(&report).unwrap()) {
            eprintln!("cannot write {}: {e}", json_path.display());
            return EXIT_MODEL_ERROR;
        }
    }

    match chain.status {
        ChainStatus::MaxIterationsExceeded => EXIT_NON_STABILIZING,
        _ => EXIT_OK,
    }
}

fn parse_ic(spec: &SystemSpec, text: &str) -> Result<(f64, Vec<f64>, Vec<f64>), String> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let n = spec.n as usize;
    if parts.len() != 2 * n + 1 {
        return Err(format!(
            "initial condition needs {} comma-separated values (t, q1..q{}, qd1..qd{}), got {}",
            2 * n + 1,
            n,
            n,
            parts.len()
        ));
    }
    let vals: Result<Vec<f64>, _> = parts.iter().map(|p| p.parse::<f64>()).collect();
    let vals = vals.map_err(|e| format!("malformed initial condition: {e}"))?;
    Ok((vals[0], vals[1..=n].to_vec(), vals[n + 1..].to_vec()))
}

fn parse_bindings(args: &[String]) -> Result<BTreeMap<String, f64>, String> {
    let mut out = BTreeMap::new();
    for b in args {
        let (name, value) = b
            .split_once('=')
            .ok_or_else(|| format!("binding `{b}` must have the form name=value"))?;
        let v: f64 = value.trim().parse().map_err(|e| format!("binding `{b}`: {e}"))?;
        out.insert(name.trim().to_string(), v);
    }
    Ok(out)
}

#[derive(Serialize)]
struct TrajectoryJson {
    model: String,
    config: serde_json::Value,
    columns: Vec<String>,
    samples: Vec<Vec<f64>>,
    drift: Vec<f64>,
    drift_report: crate::integrator::DriftReport,
    warnings: Vec<String>,
}

pub fn cmd_simulate(args: &SimulateArgs) -> i32 {
    let spec = match load_model(&args.file) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let seed = effective_seed(args.seed);
    let algo = AlgoOptions::with_seed(seed);
    let chain = match run_algorithm(&spec, &algo) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}: {e}", args.file.display());
            return EXIT_MODEL_ERROR;
        }
    };
    match chain.status {
        ChainStatus::Stabilized(_) => {}
        ChainStatus::MaxIterationsExceeded => {
            eprintln!("{}: constraint chain did not stabilize", args.file.display());
            return EXIT_NON_STABILIZING;
        }
        ChainStatus::EmptyFinal => {
            eprintln!("{}: empty final constraint set; no dynamics to integrate", args.file.display());
            return EXIT_MODEL_ERROR;
        }
    }
    let cfg = ZeroCfg::with_seed(seed);
    let mode = if chain.regularity.classification == Classification::Regular {
        SolveMode::GraphRefined
    } else {
        SolveMode::Raw
    };
    let z = match solve_z(&spec, &chain, mode, &cfg) {
        Ok(z) => z,
        Err(e) => {
            eprintln!("{}: {e}", args.file.display());
            return EXIT_MODEL_ERROR;
        }
    };

    let (t0, q0, qd0) = match &args.ic {
        Some(text) => match parse_ic(&spec, text) {
            Ok(ic) => ic,
            Err(msg) => {
                eprintln!("{}: {msg}", args.file.display());
                return EXIT_BAD_IC;
            }
        },
        None => match spec.initial_conditions.first() {
            Some(ic) => (ic.t0, ic.q.clone(), ic.qd.clone()),
            None => {
                eprintln!(
                    "{}: no --ic given and the model declares no ic block",
                    args.file.display()
                );
                return EXIT_BAD_IC;
            }
        },
    };

    let bindings = match parse_bindings(&args.bindings) {
        Ok(b) => b,
        Err(msg) => {
            eprintln!("{msg}");
            return EXIT_BAD_IC;
        }
    };
    let mut params = spec.default_params();
    params.extend(bindings.iter().map(|(k, v)| (k.clone(), *v)));

    let x0 = match lift_initial_condition(&spec, &chain, t0, &q0, &qd0, &params) {
        Ok(x) => x,
        Err(e @ IntegrateError::InconsistentIc(_)) => {
            eprintln!("{}: {e}", args.file.display());
            return EXIT_BAD_IC;
        }
        Err(e) => {
            eprintln!("{}: {e}", args.file.display());
            return EXIT_MODEL_ERROR;
        }
    };

    let mut warnings = Vec::new();
    let chart = Chart::mixed(spec.n);
    warnings.extend(sode_warnings(&z, &chart, &x0, &params));
    let mut opts = IntegrateOptions::new(args.h, args.horizon);
    opts.project = !args.no_project;
    opts.bindings = bindings.clone();
    for p in &z.free_params {
        if !opts.bindings.contains_key(p) {
            opts.bindings.insert(p.clone(), 0.0);
            warnings.push(format!("free parameter {p} defaulted to 0"));
        }
    }

    let traj = match integrate(&spec, &z, &x0, &opts) {
        Ok(t) => t,
        Err(e @ IntegrateError::InconsistentIc(_)) => {
            eprintln!("{}: {e}", args.file.display());
            return EXIT_BAD_IC;
        }
        Err(e) => {
            eprintln!("{}: {e}", args.file.display());
            return EXIT_MODEL_ERROR;
        }
    };

    let stem = args
        .file
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "model".to_string());
    if let Err(e) = std::fs::create_dir_all(&args.out) {
        eprintln!("cannot create {}: {e}", args.out.display());
        return EXIT_MODEL_ERROR;
    }
    let csv_path = args.out.join(format!("{stem}_trajectory.csv"));
    let json_path = args.out.join(format!("{stem}_trajectory.json"));
    if let Err(e) = std::fs::write(&csv_path, traj.to_csv()) {
        eprintln!("cannot write {}: {e}", csv_path.display());
        return EXIT_MODEL_ERROR;
    }
    let report = drift_report(&traj, &z.domain_constraints, &params);
    let mut columns = traj.chart.names();
    columns.push("drift".to_string());
    let json = TrajectoryJson {
        model: spec.display_name(),
        config: json!({
            "seed": seed,
            "h": args.h,
            "T": args.horizon,
            "ic": {"t": t0, "q": q0, "qd": qd0},
            "bindings": opts.bindings,
            "projection": opts.project,
            "mode": z.mode,
        }),
        columns,
        samples: traj.states.clone(),
        drift: traj.drift.clone(),
        drift_report: report,
        warnings: warnings.clone(),
    };
    if let Err(e) = std::fs::write(&json_path, serde_json::to_string_pretty(&json).unwrap()) {
        eprintln!("cannot write {}: {e}", json_path.display());
        return EXIT_MODEL_ERROR;
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    EXIT_OK
}

pub fn cmd_verify(args: &VerifyArgs) -> i32 {
    let spec = match load_model(&args.file) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let seed = effective_seed(args.seed);
    let mut opts = SuiteOptions { seed, points: args.points, ..Default::default() };
    // test-only negative-control hook
    if std::env::var("SRUSK_TEST_CORRUPT").as_deref() == Ok("omega-sign") {
        opts.corrupt_omega_sign = true;
    }
    let report = run_suite(&spec, &opts);
    print!("{}", report.render_text());
    let stem = args
        .file
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "model".to_string());
    let json_path = args
        .json
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{stem}_verify.json")));
    match std::fs::write(&json_path, serde_json::to_string_pretty(&report).unwrap()) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("cannot write {}: {e}", json_path.display());
            return EXIT_MODEL_ERROR;
        }
    }
    if report.all_passed {
        EXIT_OK
    } else {
        eprintln!("verification failed; report at {}", json_path.display());
        EXIT_VERIFY_FAILED
    }
}

pub fn run(cli: Cli) -> i32 {
    match &cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Verify(args) => cmd_verify(args),
    }
}
