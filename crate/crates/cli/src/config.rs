//! Scenario files: TOML with one section per concern.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use meanfield_core::ctmc::TransitionGraph;
use meanfield_core::grid::{RectDomain, ScalarField};
use meanfield_core::pde::{AdvectionFlux, StepperConfig, TimeScheme};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Expr, ExprError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("expression {src:?}: {source}")]
    Expr { src: String, source: ExprError },
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Controller {
    Stabilize,
    Steer,
    Path,
    CtmcPlan,
    HsdpSteer,
    HsdpStabilize,
    Particles,
    Spectrum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub lengths: Vec<f64>,
    pub cells: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeName {
    #[default]
    ImplicitEuler,
    CrankNicolson,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FluxName {
    #[default]
    Exponential,
    Centered,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub scheme: SchemeName,
    #[serde(default)]
    pub flux: FluxName,
    /// Record every n-th step in trajectory outputs.
    #[serde(default = "default_sample_every")]
    pub sample_every: usize,
}

fn default_dt() -> f64 {
    1e-3
}

fn default_sample_every() -> usize {
    100
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self { dt: default_dt(), scheme: SchemeName::default(), flux: FluxName::default(), sample_every: default_sample_every() }
    }
}

/// A closed-form expression or a tabulated CSV (one value per cell, last column).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DensitySpec {
    Expr(String),
    File { file: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    pub fn values(&self, n: usize) -> Result<Vec<f64>, ConfigError> {
        match self {
            OneOrMany::One(v) => Ok(vec![*v; n]),
            OneOrMany::Many(v) if v.len() == n => Ok(v.clone()),
            OneOrMany::Many(v) => Err(invalid(format!("expected {n} diffusion values, found {}", v.len()))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    /// 1-based `[source, target]` pairs.
    pub edges: Option<Vec<[usize; 2]>>,
    /// Edge-list file, one `source target` pair per line.
    pub file: Option<PathBuf>,
    pub vertices: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtmcSpec {
    pub initial: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridSpec {
    #[serde(default)]
    pub initial: Vec<DensitySpec>,
    #[serde(default)]
    pub initial_masses: Vec<f64>,
    pub targets: Vec<DensitySpec>,
    pub target_masses: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSpec {
    pub start: DensitySpec,
    pub end: DensitySpec,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumMode {
    #[default]
    Mass,
    Coupled,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSpec {
    #[serde(default)]
    pub mode: SpectrumMode,
    /// Explicit rates, one per edge; otherwise stationary rates are synthesized.
    pub rates: Option<Vec<f64>>,
    pub stationary: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleSpec {
    pub count: usize,
    /// Histogram cells per axis; must divide the grid.
    pub bins: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub controller: Option<Controller>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub domain: Option<DomainSpec>,
    #[serde(default)]
    pub solver: SolverSpec,
    pub diffusion: Option<OneOrMany>,
    pub duration: Option<f64>,
    /// Requested terminal accuracy for planners.
    pub accuracy: Option<f64>,
    pub initial: Option<DensitySpec>,
    pub target: Option<DensitySpec>,
    pub graph: Option<GraphSpec>,
    pub ctmc: Option<CtmcSpec>,
    pub hybrid: Option<HybridSpec>,
    pub path: Option<PathSpec>,
    pub spectrum: Option<SpectrumSpec>,
    pub particles: Option<ParticleSpec>,
    /// Pass/fail thresholds keyed by metric name. Names starting with `min_`
    /// are lower bounds, all others upper bounds.
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
}

/// A parsed scenario with the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub scenario: Scenario,
    pub text: String,
    pub base: PathBuf,
}

pub fn load(path: &Path) -> Result<Loaded, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    let scenario: Scenario = toml::from_str(&text)?;
    scenario.validate()?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { scenario, text, base })
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (k, v) in &self.tolerances {
            if !(*v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("tolerance {k} must be positive and finite")));
            }
        }
        if !(self.solver.dt > 0.0 && self.solver.dt.is_finite()) {
            return Err(invalid("solver.dt must be positive"));
        }
        if self.solver.sample_every == 0 {
            return Err(invalid("solver.sample_every must be at least 1"));
        }
        if let Some(d) = self.duration {
            if !(d > 0.0 && d.is_finite()) {
                return Err(invalid("duration must be positive"));
            }
        }
        if let Some(a) = self.accuracy {
            if !(a > 0.0) {
                return Err(invalid("accuracy must be positive"));
            }
        }
        Ok(())
    }

    pub fn stepper(&self) -> Result<StepperConfig, ConfigError> {
        let scheme = match self.solver.scheme {
            SchemeName::ImplicitEuler => TimeScheme::ImplicitEuler,
            SchemeName::CrankNicolson => TimeScheme::CrankNicolson,
        };
        let flux = match self.solver.flux {
            FluxName::Exponential => AdvectionFlux::ExponentialFitting,
            FluxName::Centered => AdvectionFlux::Centered,
        };
        StepperConfig::new(self.solver.dt)
            .map(|c| c.with_scheme(scheme).with_flux(flux))
            .map_err(|e| invalid(e.to_string()))
    }

    pub fn domain(&self) -> Result<RectDomain, ConfigError> {
        let d = self.domain.as_ref().ok_or_else(|| invalid("missing [domain] section"))?;
        RectDomain::new(&d.lengths, &d.cells).map_err(|e| invalid(e.to_string()))
    }

    pub fn duration(&self) -> Result<f64, ConfigError> {
        self.duration.ok_or_else(|| invalid("missing duration"))
    }

    pub fn diffusions(&self, n: usize) -> Result<Vec<f64>, ConfigError> {
        let v = match &self.diffusion {
            Some(d) => d.values(n)?,
            None => vec![1.0; n],
        };
        if v.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
            return Err(invalid("diffusion values must be nonnegative"));
        }
        Ok(v)
    }

    pub fn section<'a, T>(&self, value: &'a Option<T>, name: &str) -> Result<&'a T, ConfigError> {
        value.as_ref().ok_or_else(|| invalid(format!("missing [{name}] section")))
    }
}

pub fn density(spec: &DensitySpec, domain: RectDomain, base: &Path) -> Result<ScalarField, ConfigError> {
    match spec {
        DensitySpec::Expr(src) => {
            let e = Expr::parse(src).map_err(|source| ConfigError::Expr { src: src.clone(), source })?;
            let f = ScalarField::from_fn(domain, |p| e.eval(p[0], p[1]));
            check_density(f, src)
        }
        DensitySpec::File { file } => {
            let path = base.join(file);
            let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
            let mut values = Vec::new();
            for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
                let last = line.rsplit(',').next().unwrap_or(line).trim();
                match last.parse::<f64>() {
                    Ok(v) => values.push(v),
                    Err(_) if values.is_empty() => continue,
                    Err(_) => return Err(invalid(format!("{}: bad value {last:?}", path.display()))),
                }
            }
            if values.len() != domain.n_cells() {
                return Err(invalid(format!(
                    "{}: {} values for {} cells",
                    path.display(),
                    values.len(),
                    domain.n_cells()
                )));
            }
            let f = ScalarField::new(domain, values).map_err(|e| invalid(e.to_string()))?;
            check_density(f, &path.display().to_string())
        }
    }
}

fn check_density(f: ScalarField, what: &str) -> Result<ScalarField, ConfigError> {
    if f.values().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(invalid(format!("density {what:?} must be finite and nonnegative")));
    }
    Ok(f)
}

pub fn graph(spec: &GraphSpec, base: &Path) -> Result<TransitionGraph, ConfigError> {
    match (&spec.edges, &spec.file) {
        (Some(edges), None) => {
            let n = spec.vertices.unwrap_or_else(|| edges.iter().flatten().copied().max().unwrap_or(0));
            if edges.iter().flatten().any(|&v| v == 0) {
                return Err(invalid("graph vertices are numbered from 1"));
            }
            TransitionGraph::new(n, edges.iter().map(|[a, b]| (a - 1, b - 1)).collect())
                .map_err(|e| invalid(e.to_string()))
        }
        (None, Some(file)) => {
            let path = base.join(file);
            let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io { path, source })?;
            TransitionGraph::parse_edge_list(&text, spec.vertices).map_err(|e| invalid(e.to_string()))
        }
        _ => Err(invalid("graph needs exactly one of `edges` or `file`")),
    }
}
