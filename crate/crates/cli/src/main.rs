//! Batch front end: reads a TOML configuration, runs one study or a single
//! solve, and writes a self-contained output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use invman::config::{RunConfig, Violation};
use invman::experiments::{run_study, StudyKind};
use invman::manifold::{
    closed_form_shape, deterministic_graph, random_graph_point, FixedPointReport, ManifoldPoint,
};
use invman::stochastic::derive_seed;
use invman::{Error, OuTrajectory, SpectralVector, WienerPath};
use serde_json::json;

const SCHEMA_VERSION: u32 = 1;
const MARKER: &str = "COMPLETED";

const EXIT_CONFIG: u8 = 2;
const EXIT_BUDGET: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "invman",
    version,
    about = "Unstable invariant manifolds of a stochastic parabolic equation"
)]
struct Cli {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; defaults to `<output root>/<subcommand>`.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Root for default output directories.
    #[arg(
        long,
        global = true,
        env = "INVMAN_OUTPUT_ROOT",
        default_value = "runs"
    )]
    output_root: PathBuf,

    /// Override `study.base_seed` and `solve.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run on the path ω ≡ 0.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Overwrite a completed run.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Graph point h(ω, ξ) for `solve.xi`.
    Solve,
    /// err(r) against the closed-form shape.
    ShapeStudy,
    /// Tail probabilities and success fraction of the shape bound.
    McProbability,
    /// Residual of the manifold under the forward flow.
    Invariance,
    /// Tail-constant diagnostics.
    KDiagnostics,
    /// Distances along the approximation ladder.
    Ladder,
    /// Audit of the Picard contraction.
    Contraction,
    /// Check the configuration and list every violation.
    Validate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Validate => "validate",
            other => other.study().map(StudyKind::name).unwrap_or("run"),
        }
    }

    fn study(self) -> Option<StudyKind> {
        match self {
            Command::ShapeStudy => Some(StudyKind::ShapeStudy),
            Command::McProbability => Some(StudyKind::McProbability),
            Command::Invariance => Some(StudyKind::Invariance),
            Command::KDiagnostics => Some(StudyKind::KDiagnostics),
            Command::Ladder => Some(StudyKind::Ladder),
            Command::Contraction => Some(StudyKind::Contraction),
            Command::Solve | Command::Validate => None,
        }
    }
}

/// Error carrying its exit status and a machine-readable report.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
    violations: Vec<Violation>,
}

impl Failure {
    fn new(code: u8, kind: &'static str, message: impl Into<String>) -> Self {
        Failure {
            code,
            kind,
            message: message.into(),
            violations: Vec::new(),
        }
    }

    fn report(&self) -> String {
        json!({
            "error": self.kind,
            "message": self.message,
            "violations": self.violations,
        })
        .to_string()
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) => Failure::new(EXIT_IO, "io", e.to_string()),
            Error::NoConvergence { .. } | Error::NotContracting(_) | Error::OutsideChart { .. } => {
                Failure::new(EXIT_BUDGET, "solver", e.to_string())
            }
            _ => Failure::new(EXIT_CONFIG, "config", e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(EXIT_IO, "io", format!("{}: {e}", path.display()))
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.study.base_seed = seed;
        cfg.solve.seed = seed;
    }
    if cli.deterministic {
        cfg.study.deterministic = true;
        cfg.solve.deterministic = true;
    }
    Ok(cfg)
}

fn prepare_dir(dir: &Path, force: bool) -> Result<(), Failure> {
    if dir.join(MARKER).exists() {
        if !force {
            return Err(Failure::new(
                EXIT_CONFIG,
                "completed",
                format!(
                    "{} holds a completed run; pass --force to overwrite",
                    dir.display()
                ),
            ));
        }
        fs::remove_file(dir.join(MARKER)).map_err(|e| io_failure(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn write(dir: &Path, name: &str, contents: &[u8]) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| io_failure(&path, e))
}

fn unix_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn solve(
    cfg: &RunConfig,
    echo: &RunConfig,
    setup: &invman::experiments::Setup,
) -> Result<serde_json::Value, Failure> {
    let model = &setup.model;
    let mut xi = model.zeros();
    xi.coeffs_mut()[..cfg.solve.xi.len()].copy_from_slice(&cfg.solve.xi);
    let deterministic = cfg.solve.deterministic;
    let (point, report, z0): (ManifoldPoint, FixedPointReport, f64) = if deterministic {
        let (_, point, report) = deterministic_graph(&xi, &setup.spec, model, &setup.solver)?;
        (point, report, 0.0)
    } else {
        let dt = setup.solver.dt;
        let back = setup.solver.steps() + (setup.t_ou / dt).ceil() as usize;
        let seed = derive_seed(cfg.solve.seed, &[0]);
        let path = WienerPath::sample(seed, -(back as f64) * dt, 0.0, dt)?;
        let ou = OuTrajectory::from_path(&path, cfg.noise.sigma, setup.t_ou)?;
        let (point, report) = random_graph_point(&xi, &ou, &setup.spec, model, &setup.solver)?;
        (point, report, ou.z0())
    };
    let shape = closed_form_shape(&xi, &setup.spec, model)?;
    let err: SpectralVector = point.h_value.sub(&shape);
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "study": "solve",
        "deterministic": deterministic,
        "sigma": if deterministic { 0.0 } else { echo.noise.sigma },
        "seed": cfg.solve.seed,
        "z0": z0,
        "radius": setup.spec.radius,
        "lipschitz": setup.spec.lipschitz,
        "point": point,
        "closed_form": shape,
        "closed_form_error": err.norm(),
        "report": report,
    }))
}

fn run(cli: &Cli) -> Result<String, Failure> {
    let cfg = load_config(cli)?;
    if cli.command == Command::Validate {
        let violations = cfg.violations();
        if violations.is_empty() {
            return Ok("configuration is valid".into());
        }
        let mut f = Failure::new(
            EXIT_CONFIG,
            "validation",
            format!("{} violation(s)", violations.len()),
        );
        f.violations = violations;
        return Err(f);
    }
    let violations = cfg.violations();
    if !violations.is_empty() {
        let mut f = Failure::new(
            EXIT_CONFIG,
            "validation",
            format!("{} violation(s)", violations.len()),
        );
        f.violations = violations;
        return Err(f);
    }
    let (setup, echo) = cfg.resolve()?;
    let dir = cli
        .output_dir
        .clone()
        .unwrap_or_else(|| cli.output_root.join(cli.command.name()));
    prepare_dir(&dir, cli.force)?;
    let started = unix_seconds();
    write(&dir, "config.toml", echo.to_toml_string()?.as_bytes())?;

    let mut over_budget = None;
    match cli.command.study() {
        None => {
            let value = match solve(&cfg, &echo, &setup) {
                Ok(v) => v,
                Err(f) if f.code == EXIT_BUDGET => {
                    over_budget = Some(f.message.clone());
                    json!({ "schema_version": SCHEMA_VERSION, "study": "solve", "failure": f.message })
                }
                Err(f) => return Err(f),
            };
            let text = serde_json::to_string_pretty(&value).map_err(Error::from)?;
            write(&dir, "result.json", text.as_bytes())?;
        }
        Some(kind) => {
            let result = run_study(kind, &setup, &cfg.study_params())?;
            write(&dir, "result.json", result.to_json()?.as_bytes())?;
            let mut csv = Vec::new();
            result.write_csv(&mut csv)?;
            write(&dir, "cells.csv", &csv)?;
            let cells = result.records.len().max(1);
            let fraction = result.failures as f64 / cells as f64;
            if fraction > cfg.study.failure_budget {
                over_budget = Some(format!(
                    "{} of {} cells failed, budget {}",
                    result.failures,
                    result.records.len(),
                    cfg.study.failure_budget
                ));
            }
        }
    }
    let metadata = json!({
        "schema_version": SCHEMA_VERSION,
        "subcommand": cli.command.name(),
        "started_unix": started,
        "finished_unix": unix_seconds(),
    });
    write(&dir, "metadata.json", metadata.to_string().as_bytes())?;
    if let Some(message) = over_budget {
        return Err(Failure::new(EXIT_BUDGET, "failure_budget", message));
    }
    write(&dir, MARKER, b"")?;
    Ok(format!(
        "{} written to {}",
        cli.command.name(),
        dir.display()
    ))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            for v in &f.violations {
                eprintln!("{v}");
            }
            eprintln!("{}", f.report());
            ExitCode::from(f.code)
        }
    }
}
