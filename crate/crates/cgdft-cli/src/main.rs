//! Batch experiment runner for the coarse-grained DFT laboratory.
//!
//! Every experiment is deterministic given its config and seed: it loads a
//! schema-validated config, runs, writes CSV/JSON artifacts atomically into
//! the output directory, prints a verdict, and exits 0 only when all of the
//! experiment's asserted invariants hold. Exit code 2 means the config (or
//! an artifact directory handed to `report`) was rejected before any
//! experiment artifact was written; exit code 1 names the failing invariant.

mod experiments;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cgdft::config::{self, Experiment, RunConfig};
use cgdft::io;

#[derive(Parser)]
#[command(
    name = "cgdft",
    version,
    about = "Numerical laboratory for coarse-grained density functional theory",
    max_term_width = 100
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Invert one forward-generated coarse density and emit the result
    Invert(RunArgs),
    /// Sweep the intrinsic energy and projection errors across levels
    Sweep(RunArgs),
    /// Probe a target density for representability under refinement
    Probe(RunArgs),
    /// Sample the continuity of the density-to-(v rho) product map
    Quasi(RunArgs),
    /// Measure the continuity modulus of the coarse intrinsic energy
    Modulus(RunArgs),
    /// Demonstrate potential blow-up: node pinch and oscillation harvest
    Blowup(RunArgs),
    /// Decompose the intrinsic energy into Kohn-Sham components
    Ks(RunArgs),
    /// Run the full acceptance battery (the CI entry point)
    VerifyAll(RunArgs),
    /// Render the artifacts in a run directory as plain-text tables
    Report {
        /// Directory previously populated by a run
        dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Path to a TOML (or JSON) run configuration
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts (overrides the config's `out`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override for all sample streams
    #[arg(long)]
    seed: Option<u64>,
    /// Tolerance override as NAME=VALUE (repeatable; names from the config schema)
    #[arg(long = "tol", value_name = "NAME=VALUE")]
    tol: Vec<String>,
}

/// Exit status contract: pass, failed invariant, rejected config.
const EXIT_PASS: u8 = 0;
const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = init_thread_pool() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_CONFIG);
    }
    let code = match cli.command {
        Command::Report { dir } => match report::render(&dir) {
            Ok(text) => {
                print!("{text}");
                EXIT_PASS
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_CONFIG
            }
        },
        Command::Invert(args) => run_experiment(Experiment::Invert, &args),
        Command::Sweep(args) => run_experiment(Experiment::Sweep, &args),
        Command::Probe(args) => run_experiment(Experiment::Probe, &args),
        Command::Quasi(args) => run_experiment(Experiment::Quasi, &args),
        Command::Modulus(args) => run_experiment(Experiment::Modulus, &args),
        Command::Blowup(args) => run_experiment(Experiment::Blowup, &args),
        Command::Ks(args) => run_experiment(Experiment::Ks, &args),
        Command::VerifyAll(args) => run_experiment(Experiment::VerifyAll, &args),
    };
    ExitCode::from(code)
}

/// Honor the CGDFT_THREADS cap before any parallel work starts.
fn init_thread_pool() -> Result<(), String> {
    match std::env::var("CGDFT_THREADS") {
        Ok(raw) => {
            let n: usize = raw
                .trim()
                .parse()
                .map_err(|_| format!("CGDFT_THREADS must be a positive integer, got {raw:?}"))?;
            if n == 0 {
                return Err("CGDFT_THREADS must be a positive integer, got 0".to_string());
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| format!("failed to configure thread pool: {e}"))
        }
        Err(std::env::VarError::NotPresent) => Ok(()),
        Err(e) => Err(format!("CGDFT_THREADS is not valid unicode: {e}")),
    }
}

/// Load, validate, and resolve a run; write artifacts; map the outcome to
/// the exit-code contract. Nothing is written unless the config (schema and
/// cross-field semantics) is accepted.
fn run_experiment(experiment: Experiment, args: &RunArgs) -> u8 {
    let setup = (|| -> Result<_, String> {
        let mut cfg = RunConfig::from_path(&args.config).map_err(|e| e.to_string())?;
        cfg.experiment = experiment;
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        let overrides = args
            .tol
            .iter()
            .map(|s| config::parse_override(s))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let tols = cfg.resolved_tolerances(&overrides).map_err(|e| e.to_string())?;
        let out = args
            .out
            .clone()
            .or_else(|| cfg.out.clone())
            .ok_or_else(|| "no output directory: pass --out or set `out` in the config".to_string())?;
        experiments::preflight(&cfg).map_err(|e| e.to_string())?;
        Ok((cfg, tols, out, overrides))
    })();
    let (cfg, tols, out, overrides) = match setup {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("config rejected: {msg}");
            return EXIT_CONFIG;
        }
    };

    let run = match experiments::execute(&cfg, &tols) {
        Ok(run) => run,
        Err(e) => {
            eprintln!("failed invariant: {} execution ({e})", experiment_name(experiment));
            return EXIT_FAIL;
        }
    };

    if let Err(e) = write_artifacts(&out, &cfg, &tols, &overrides, &run) {
        eprintln!("error writing artifacts: {e}");
        return EXIT_CONFIG;
    }

    for check in &run.checks {
        println!("{}", check.line());
    }
    let failed: Vec<&str> = run
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    if failed.is_empty() {
        println!("verdict: PASS ({})", experiment_name(experiment));
        EXIT_PASS
    } else {
        println!("verdict: FAIL ({})", experiment_name(experiment));
        eprintln!("failed invariant: {}", failed.join(", "));
        EXIT_FAIL
    }
}

fn experiment_name(e: Experiment) -> &'static str {
    match e {
        Experiment::Invert => "invert",
        Experiment::Sweep => "sweep",
        Experiment::Probe => "probe",
        Experiment::Quasi => "quasi",
        Experiment::Modulus => "modulus",
        Experiment::Blowup => "blowup",
        Experiment::Ks => "ks",
        Experiment::VerifyAll => "verify-all",
    }
}

/// Persist CSV tables, experiment JSON, the verdict, a plain-text summary,
/// and a metadata echo of the fully resolved configuration (defaults
/// materialized) so a run is reproducible from its own artifacts.
fn write_artifacts(
    out: &PathBuf,
    cfg: &RunConfig,
    tols: &cgdft::config::ToleranceSet,
    overrides: &[(String, f64)],
    run: &experiments::ExperimentRun,
) -> Result<(), io::IoError> {
    for table in &run.tables {
        io::write_table(out, table)?;
    }
    for (name, value) in &run.json {
        io::write_json(out, name, value)?;
    }
    let metadata = serde_json::json!({
        "experiment": experiment_name(cfg.experiment),
        "config": cfg,
        "tolerances": tols,
        "tolerance_overrides": overrides
            .iter()
            .map(|(n, v)| serde_json::json!({ "name": n, "value": v }))
            .collect::<Vec<_>>(),
    });
    io::write_json(out, "run_metadata", &metadata)?;
    let verdict = serde_json::json!({
        "experiment": experiment_name(cfg.experiment),
        "passed": run.checks.iter().all(|c| c.passed),
        "checks": run.checks,
    });
    io::write_json(out, "verdict", &verdict)?;
    let mut summary = String::new();
    for check in &run.checks {
        summary.push_str(&check.line());
        summary.push('\n');
    }
    summary.push_str(&format!(
        "verdict: {}\n",
        if run.checks.iter().all(|c| c.passed) { "PASS" } else { "FAIL" }
    ));
    io::write_atomic(&out.join("summary.txt"), summary.as_bytes())
}
