//! `meanfield`: runs a scenario file and writes CSV/JSON artifacts.
//!
//! Exit codes: 0 all checks pass, 1 a check failed, 2 usage or configuration
//! error, 3 numerical failure.

mod config;
mod expr;
mod output;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{Controller, Loaded};
use output::{evaluate, to_json, Artifacts, Summary};
use run::{Outcome, RunError};

#[derive(Parser)]
#[command(name = "meanfield", version, about = "Density control for swarms of agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Drive a density to a target with the time-invariant feedback law
    /// (hybrid when the scenario has a [hybrid] section).
    Stabilize(Common),
    /// Finite-time steering to within a requested accuracy.
    SteerDensity(Common),
    /// Track a prescribed density path.
    PathFollow(Common),
    /// Piecewise-constant transition rates for a mass transfer on a graph.
    CtmcPlan(Common),
    /// Two-phase steering of a hybrid density.
    HsdpSteer(Common),
    /// Agent-level simulation checked against the PDE.
    Particles(Common),
    /// Eigenvalues of the mass-level or coupled closed loop.
    Spectrum(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the scenario's `output` or `out/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(long, short)]
    verbose: bool,
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Stabilize(c) => ("stabilize", c),
            Command::SteerDensity(c) => ("steer-density", c),
            Command::PathFollow(c) => ("path-follow", c),
            Command::CtmcPlan(c) => ("ctmc-plan", c),
            Command::HsdpSteer(c) => ("hsdp-steer", c),
            Command::Particles(c) => ("particles", c),
            Command::Spectrum(c) => ("spectrum", c),
        }
    }
}

fn accepts(command: &str, c: Controller) -> bool {
    matches!(
        (command, c),
        ("stabilize", Controller::Stabilize | Controller::HsdpStabilize)
            | ("steer-density", Controller::Steer)
            | ("path-follow", Controller::Path)
            | ("ctmc-plan", Controller::CtmcPlan)
            | ("hsdp-steer", Controller::HsdpSteer)
            | ("particles", Controller::Particles)
            | ("spectrum", Controller::Spectrum)
    )
}

#[derive(Serialize)]
struct Metadata<'a> {
    name: &'a str,
    command: &'a str,
    seed: u64,
    version: &'a str,
    scenario: &'a config::Scenario,
    metrics: &'a std::collections::BTreeMap<String, Option<f64>>,
    outputs: &'a [String],
    warnings: &'a [String],
}

fn output_dir(common: &Common, loaded: &Loaded) -> PathBuf {
    if let Some(o) = &common.out {
        return o.clone();
    }
    match &loaded.scenario.output {
        Some(o) if o.is_absolute() => o.clone(),
        Some(o) => loaded.base.join(o),
        None => Path::new("out").join(&loaded.scenario.name),
    }
}

enum Failure {
    Usage(String),
    Numerical(String),
}

fn execute(command: &str, common: &Common) -> Result<bool, Failure> {
    let loaded = config::load(&common.config).map_err(|e| Failure::Usage(e.to_string()))?;
    let s = &loaded.scenario;
    if let Some(c) = s.controller {
        if !accepts(command, c) {
            return Err(Failure::Usage(format!(
                "scenario controller `{}` does not match the `{command}` command",
                serde_json::to_value(c).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
            )));
        }
    }
    let known = run::metric_names(command);
    for key in s.tolerances.keys() {
        let metric = key.strip_prefix("min_").filter(|m| known.contains(m)).unwrap_or(key);
        if !known.contains(&metric) {
            return Err(Failure::Usage(format!(
                "unknown tolerance `{key}` for {command}; expected one of {}",
                known.join(", ")
            )));
        }
    }
    let seed = common.seed.or(s.seed).unwrap_or(0);
    let dir = output_dir(common, &loaded);
    let mut out = Artifacts::create(&dir).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
    log::info!("running {} ({command}) into {}", s.name, dir.display());

    let result: Result<Outcome, RunError> = match command {
        "stabilize" => run::stabilize(&loaded, &mut out),
        "steer-density" => run::steer_density(&loaded, &mut out),
        "path-follow" => run::path_follow(&loaded, &mut out),
        "ctmc-plan" => run::ctmc_plan(&loaded, &mut out),
        "hsdp-steer" => run::hsdp_steer(&loaded, &mut out),
        "particles" => run::particles(&loaded, &mut out, seed),
        "spectrum" => run::spectrum(&loaded, &mut out),
        _ => unreachable!("clap restricts commands"),
    };
    let outcome = match result {
        Ok(o) => o,
        Err(RunError::Core { module, source }) => return Err(Failure::Numerical(format!("error in {module}: {source}"))),
        Err(e) => return Err(Failure::Usage(e.to_string())),
    };
    for w in &outcome.warnings {
        log::warn!("{w}");
    }

    let checks = evaluate(&s.tolerances, &outcome.metrics);
    let passed = checks.iter().all(|c| c.passed);
    let summary = Summary { name: s.name.clone(), command: command.to_string(), passed, checks };
    let io = |e: std::io::Error| Failure::Usage(format!("writing output: {e}"));
    out.write("scenario.toml", &loaded.text).map_err(io)?;
    out.write("summary.json", &to_json(&summary)).map_err(io)?;
    let metrics = outcome.metrics.iter().map(|(k, v)| (k.clone(), Some(*v).filter(|v| v.is_finite()))).collect();
    let mut outputs = out.files().to_vec();
    outputs.push("metadata.json".into());
    let meta = Metadata {
        name: &s.name,
        command,
        seed,
        version: env!("CARGO_PKG_VERSION"),
        scenario: s,
        metrics: &metrics,
        outputs: &outputs,
        warnings: &outcome.warnings,
    };
    out.write("metadata.json", &to_json(&meta)).map_err(io)?;

    for c in &summary.checks {
        let value = c.value.map_or("n/a".to_string(), |v| format!("{v:.6e}"));
        let op = if c.kind == "min" { ">=" } else { "<=" };
        println!("{} {}: {value} {op} {:e}", if c.passed { "PASS" } else { "FAIL" }, c.metric, c.bound);
    }
    for (k, v) in &outcome.metrics {
        log::info!("{k} = {v:e}");
    }
    Ok(passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = cli.command.parts();
    let level = if common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(command, common) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(3)
        }
    }
}
