//! One runner per subcommand. Each writes its artifacts and returns the
//! measured metrics; thresholds are applied by the caller.

use std::collections::BTreeMap;

use meanfield_core::control::{
    execute_plan, follow_path, synthesize_steering_plan_with, LinearPath, SteeringOptions, TargetDensity,
    VelocityLaw,
};
use meanfield_core::ctmc::{
    global_transfer_from_boundary, propagate, spectrum_check, synthesize_stationary_rates, SpectrumReport,
    TransitionGraph,
};
use meanfield_core::grid::{RectDomain, ScalarField};
use meanfield_core::hsdp::{
    coupled_spectrum, execute_hybrid_plan, hybrid_steering_plan, run_time_invariant, stabilizing_controller,
    HybridTarget, StackedDensity,
};
use meanfield_core::particles::{restrict_to_bins, ParticleEnsemble};
use meanfield_core::pde::{evolve_stabilizing_observed, fit_decay_rate, log_gradient_velocity, StepperConfig};
use thiserror::Error;

use crate::config::{self, ConfigError, Loaded, Scenario, SpectrumMode};
use crate::output::{field_csv, stacked_trajectory_csv, table_csv, trajectory_csv, Artifacts};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{module}: {source}")]
    Core { module: &'static str, source: meanfield_core::Error },
    #[error("writing output: {0}")]
    Io(#[from] std::io::Error),
}

fn core(module: &'static str) -> impl Fn(meanfield_core::Error) -> RunError {
    move |e| {
        // user-facing vertex labels are 1-based
        let source = match e {
            meanfield_core::Error::NotStronglyConnected { v1, v2 } => meanfield_core::Error::NotStronglyConnected {
                v1: v1.into_iter().map(|v| v + 1).collect(),
                v2: v2.into_iter().map(|v| v + 1).collect(),
            },
            other => other,
        };
        RunError::Core { module, source }
    }
}

fn invalid(msg: impl Into<String>) -> RunError {
    RunError::Config(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub metrics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl Outcome {
    fn set(&mut self, key: &str, v: f64) {
        self.metrics.insert(key.to_string(), v);
    }
}

/// Metric names each command can produce, for validating tolerance keys.
pub fn metric_names(command: &str) -> &'static [&'static str] {
    match command {
        "stabilize" => &["final_error", "decay_rate", "min_value", "max_velocity"],
        "steer-density" => &["final_error", "max_velocity", "predicted_error"],
        "path-follow" => &["max_tracking_error", "final_error", "max_velocity"],
        "ctmc-plan" => &["endpoint_error", "max_rate", "segments"],
        "hsdp-steer" => &["max_state_error", "max_rate", "max_velocity", "transfer_mass_error"],
        "particles" => &["l1_distance"],
        "spectrum" => &["max_real_part", "gap", "zero_multiplicity", "kernel_error"],
        _ => &[],
    }
}

fn unit_density(spec: &config::DensitySpec, d: RectDomain, loaded: &Loaded, what: &str) -> Result<ScalarField, RunError> {
    config::density(spec, d, &loaded.base)?
        .normalized()
        .map_err(|e| invalid(format!("{what}: {e}")))
}

fn scalar_pair(s: &Scenario, loaded: &Loaded, d: RectDomain) -> Result<(ScalarField, ScalarField), RunError> {
    let target = unit_density(s.section(&s.target, "target")?, d, loaded, "target")?;
    let initial = match &s.initial {
        Some(spec) => unit_density(spec, d, loaded, "initial")?,
        None => ScalarField::constant(d, 1.0 / d.volume()),
    };
    Ok((initial, target))
}

fn scalar_diffusion(s: &Scenario) -> Result<f64, RunError> {
    Ok(s.diffusions(1)?[0])
}

struct HybridSetup {
    graph: TransitionGraph,
    target: HybridTarget,
    initial: StackedDensity,
    diffusion: Vec<f64>,
}

fn stack(
    specs: &[config::DensitySpec],
    masses: &[f64],
    d: RectDomain,
    loaded: &Loaded,
    what: &str,
) -> Result<Vec<ScalarField>, RunError> {
    if specs.len() != masses.len() {
        return Err(invalid(format!("{what}: {} densities but {} masses", specs.len(), masses.len())));
    }
    specs
        .iter()
        .zip(masses)
        .map(|(spec, &m)| {
            if m < 0.0 {
                return Err(invalid(format!("{what}: negative mass {m}")));
            }
            if m == 0.0 {
                return Ok(ScalarField::constant(d, 0.0));
            }
            config::density(spec, d, &loaded.base)?
                .normalized_to(m)
                .map_err(|e| invalid(format!("{what}: {e}")))
        })
        .collect()
}

fn hybrid_setup(s: &Scenario, loaded: &Loaded, d: RectDomain) -> Result<HybridSetup, RunError> {
    let h = s.section(&s.hybrid, "hybrid")?;
    let graph = config::graph(s.section(&s.graph, "graph")?, &loaded.base)?;
    let n = graph.n_vertices();
    if h.targets.len() != n {
        return Err(invalid(format!("graph has {n} states but {} targets are given", h.targets.len())));
    }
    let target = HybridTarget::new(stack(&h.targets, &h.target_masses, d, loaded, "hybrid.targets")?)
        .map_err(|e| invalid(e.to_string()))?;
    let initial = if h.initial.is_empty() {
        StackedDensity::new((0..n).map(|_| ScalarField::constant(d, 1.0 / (n as f64 * d.volume()))).collect())
    } else {
        StackedDensity::new(stack(&h.initial, &h.initial_masses, d, loaded, "hybrid.initial")?)
    }
    .map_err(|e| invalid(e.to_string()))?;
    if initial.n_states() != n {
        return Err(invalid(format!("graph has {n} states but {} initial densities", initial.n_states())));
    }
    initial.validate_density().map_err(|e| invalid(format!("hybrid.initial: {e}")))?;
    Ok(HybridSetup { graph, target, initial, diffusion: s.diffusions(n)? })
}

fn decay_rate(times: &[f64], errors: &[f64]) -> f64 {
    let keep: Vec<usize> = (0..errors.len()).filter(|&k| errors[k] > 1e-13).collect();
    if keep.len() < 3 {
        return f64::NAN;
    }
    let t: Vec<f64> = keep.iter().map(|&k| times[k]).collect();
    let e: Vec<f64> = keep.iter().map(|&k| errors[k]).collect();
    fit_decay_rate(&t, &e).map(|r| r.fitted_rate).unwrap_or(f64::NAN)
}

pub fn stabilize(loaded: &Loaded, out: &mut Artifacts) -> Result<Outcome, RunError> {
    let s = &loaded.scenario;
    if s.hybrid.is_some() {
        return stabilize_hybrid(loaded, out);
    }
    let d = s.domain()?;
    let (y0, f) = scalar_pair(s, loaded, d)?;
    let diffusion = scalar_diffusion(s)?;
    let cfg = s.stepper()?;
    let every = s.solver.sample_every;
    let mut samples = vec![(0.0, y0.clone())];
    let mut errors = vec![(0.0, y0.sub(&f).l2_norm())];
    let mut step = 0usize;
    let (n, _) = cfg.steps_for(&d, s.duration()?);
    let fin = evolve_stabilizing_observed(&y0, &f, diffusion, s.duration()?, &cfg, |t, y| {
        step += 1;
        if step % every == 0 || step == n {
            samples.push((t, y.clone()));
            errors.push((t, y.sub(&f).l2_norm()));
        }
    })
    .map_err(core("pde"))?;
    let v = log_gradient_velocity(&f, diffusion);
    let (times, errs): (Vec<f64>, Vec<f64>) = errors.iter().copied().unzip();

    out.write("trajectory.csv", &trajectory_csv(&samples))?;
    out.write("errors.csv", &table_csv(&["t", "l2_error"], &errors.iter().map(|(t, e)| vec![*t, *e]).collect::<Vec<_>>()))?;
    out.write("final.csv", &field_csv(&fin))?;
    out.write("target.csv", &field_csv(&f))?;

    let mut o = Outcome::default();
    o.set("final_error", fin.sub(&f).l2_norm());
    o.set("decay_rate", decay_rate(&times, &errs));
    o.set("min_value", fin.min());
    o.set("max_velocity", v.max_abs());
    Ok(o)
}

fn stabilize_hybrid(loaded: &Loaded, out: &mut Artifacts) -> Result<Outcome, RunError> {
    let s = &loaded.scenario;
    let d = s.domain()?;
    let h = hybrid_setup(s, loaded, d)?;
    let ctrl = stabilizing_controller(&h.target, &h.graph, &h.diffusion).map_err(core("hsdp"))?;
    let cfg = s.stepper()?;
    let run = run_time_invariant(
        &h.initial,
        &ctrl.velocities,
        &h.diffusion,
        &ctrl.gains,
        s.duration()?,
        &cfg,
        s.solver.sample_every,
        Some(h.target.densities()),
    )
    .map_err(core("hsdp"))?;

    let n = h.graph.n_vertices();
    let mut header = vec!["t".to_string(), "l2_error".to_string()];
    header.extend((1..=n).map(|i| format!("mass_{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<f64>> = run
        .times
        .iter()
        .zip(&run.errors)
        .zip(&run.masses)
        .map(|((t, e), m)| {
            let mut r = vec![*t, *e];
            r.extend(m);
            r
        })
        .collect();
    out.write("errors.csv", &table_csv(&header, &rows))?;
    out.write("gains.csv", &ctrl.gains.to_csv())?;
    let rate_rows: Vec<Vec<f64>> = h
        .graph
        .edges()
        .iter()
        .zip(&ctrl.rates)
        .map(|(&(a, b), &q)| vec![(a + 1) as f64, (b + 1) as f64, q])
        .collect();
    out.write("rates.csv", &table_csv(&["source", "target", "rate"], &rate_rows))?;
    out.write(
        "final.csv",
        &stacked_trajectory_csv(&[(*run.times.last().unwrap_or(&0.0), run.final_state.clone())]),
    )?;

    let mut o = Outcome::default();
    o.set("final_error", *run.errors.last().unwrap_or(&f64::NAN));
    o.set("decay_rate", decay_rate(&run.times, &run.errors));
    o.set("min_value", run.min_value);
    o.set("max_velocity", ctrl.velocities.iter().map(|v| v.max_abs()).fold(0.0, f64::max));
    Ok(o)
}

pub fn steer_density(loaded: &Loaded, out: &mut Artifacts) -> Result<Outcome, RunError> {
    let s = &loaded.scenario;
    let d = s.domain()?;
    let (y0, f) = scalar_pair(s, loaded, d)?;
    let f = TargetDensity::new(f).map_err(core("control"))?;
    let opts = SteeringOptions { diffusion: scalar_diffusion(s)?, ..SteeringOptions::default() };
    let plan = synthesize_steering_plan_with(&y0, &f, s.duration()?, s.accuracy.unwrap_or(1e-2), opts)
        .map_err(core("control"))?;
    let run = execute_plan(&plan, &y0, &s.stepper()?).map_err(core("control"))?;

    out.write("plan.txt", &plan.to_text())?;
    out.write("snapshots.csv", &trajectory_csv(&run.snapshots))?;
    let mut phases = String::from("phase,law,j,gain,duration,weighted_error,gain_peak\n");
    for (k, p) in plan.phases.iter().enumerate() {
        let (law, j, gain) = match p.law {
            VelocityLaw::Zero => ("zero", 0, 0.0),
            VelocityLaw::Stabilize => ("stabilize", 0, 0.0),
            VelocityLaw::Smooth => ("smooth", 0, 1.0),
            VelocityLaw::Gain { j, gain, .. } => ("gain", j, gain),
        };
        phases.push_str(&format!(
            "{},{law},{j},{gain:?},{:?},{:?},{:?}\n",
            k + 1,
            p.duration,
            run.phase_errors[k],
            run.gain_peaks[k]
        ));
    }
    out.write("phases.csv", &phases)?;
    out.write("final.csv", &field_csv(&run.final_state))?;

    let mut o = Outcome::default();
    o.set("final_error", run.final_error);
    o.set("max_velocity", run.max_velocity);
    o.set("predicted_error", plan.schedule.as_ref().map_or(f64::NAN, |sc| sc.predicted_error));
    o.warnings.extend(plan.warning.clone());
    Ok(o)
}

pub fn path_follow(loaded: &Loaded, out: &mut Artifacts) -> Result<Outcome, RunError> {
    let s = &loaded.scenario;
    let d = s.domain()?;
    let p = s.section(&s.path, "path")?;
    let duration = s.duration()?;
    let path = LinearPath {
        start: unit_density(&p.start, d, loaded, "path.start")?,
        end: unit_density(&p.end, d, loaded, "path.end")?,
        duration,
    };
    if path.start.min() <= 0.0 || path.end.min() <= 0.0 {
        return Err(invalid("path end points must be strictly positive"));
    }
    let rate = path.rate();
    let run = follow_path(&path.start, |t| path.at(t), |_| rate.clone(), duration, scalar_diffusion(s)?, &s.stepper()?)
        .map_err(core("control"))?;
    let every = s.solver.sample_every;
    let rows: Vec<Vec<f64>> = run
        .samples
        .iter()
        .enumerate()
        .filter(|(k, _)| k % every == 0 || *k + 1 == run.samples.len())
        .map(|(_, (t, e))| vec![*t, *e])
        .collect();
    out.write("tracking.csv", &table_csv(&["t", "l2_error"], &rows))?;
    out.write("final.csv", &field_csv(&run.final_state))?;

    let mut o = Outcome::default();
    o.set("max_tracking_error", run.max_error);
    o.set("final_error", run.final_state.sub(&path.end).l2_norm());
    o.set("max_velocity", run.max_velocity);
    Ok(o)
}

pub fn ctmc_plan(loaded: &Loaded, out: &mut Artifacts) -> Result<Outcome, RunError> {
    let s = &loaded.scenario;
    let g = config::graph(s.section(&s.graph, "graph")?, &loaded.base)?;
    let c = s.section(&s.ctmc, "ctmc")?;
    if c.initial.len() != g.n_vertices() || c.target.len() != g.n_vertices() {
        return Err(invalid("ctmc.initial and ctmc.target need one entry per vertex"));
    }
    let plan = global_transfer_from_boundary(&g, &c.initial, &c.target, s.duration()?).map_err(core("ctmc"))?;
    let states = propagate(&g, &c.initial, &plan.control).map_err(core("ctmc"))?;

    out.write("control.csv", &plan.control.to_csv(&g))?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=g.n_vertices()).map(|i| format!("mu_{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<f64>> = plan
        .control
        .breakpoints
        .iter()
        .zip(&states)
        .map(|(t, mu)| std::iter::once(*t).chain(mu.iter().copied()).collect())
        .collect();
    out.write("states.csv", &table_csv(&header, &rows))?;
    out.write("graph.txt", &g.to_edge_list())?;

    let end = states.last().expect("at least the initial state");
    let mut o = Outcome::default();
    o.set("endpoint_error", end.iter().zip(&c.target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    o.set("max_rate", plan.control.max_rate());
    o.set("segments", plan.segments as f64);
    Ok(o)
}

pub fn hsdp_steer(loaded: &Loaded, out: &mut Artifacts) -> Result<Outcome, RunError> {
    let s = &loaded.scenario;
    let d = s.domain()?;
    let h = hybrid_setup(s, loaded, d)?;
    let plan = hybrid_steering_plan(&h.initial, &h.target, &h.graph, &h.diffusion, s.duration()?, s.accuracy.unwrap_or(1e-2))
        .map_err(core("hsdp"))?;
    let run = execute_hybrid_plan(&plan, &h.initial, &s.stepper()?).map_err(core("hsdp"))?;

    out.write("control.csv", &plan.transfer.control.to_csv(&h.graph))?;
    let mut snaps = vec![(0.0, h.initial.clone())];
    snaps.extend(run.snapshots.iter().cloned());
    out.write("snapshots.csv", &stacked_trajectory_csv(&snaps))?;
    let rows: Vec<Vec<f64>> = (0..h.graph.n_vertices())
        .map(|i| vec![(i + 1) as f64, h.target.masses()[i], run.masses_after_transfer[i], run.state_errors[i]])
        .collect();
    out.write("states.csv", &table_csv(&["state", "target_mass", "mass_after_transfer", "l2_error"], &rows))?;

    let mut o = Outcome::default();
    o.set("max_state_error", run.state_errors.iter().copied().fold(0.0, f64::max));
    o.set("max_rate", run.max_rate);
    o.set("max_velocity", run.max_velocity);
    o.set(
        "transfer_mass_error",
        run.masses_after_transfer.iter().zip(h.target.masses()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
    );
    o.warnings.extend(run.warnings);
    Ok(o)
}

pub fn particles(loaded: &Loaded, out: &mut Artifacts, seed: u64) -> Result<Outcome, RunError> {
    let s = &loaded.scenario;
    let d = s.domain()?;
    let p = s.section(&s.particles, "particles")?;
    let bins = RectDomain::new(d.lengths(), &p.bins).map_err(|e| invalid(format!("particles.bins: {e}")))?;
    let duration = s.duration()?;
    let dt = s.solver.dt;
    let n_steps = ((duration / dt) - 1e-9).ceil().max(1.0) as usize;
    let dt = duration / n_steps as f64;

    let (start, velocities, diffusion, gains, reference) = if s.hybrid.is_some() {
        let h = hybrid_setup(s, loaded, d)?;
        let ctrl = stabilizing_controller(&h.target, &h.graph, &h.diffusion).map_err(core("hsdp"))?;
        let cfg = StepperConfig { dt, ..s.stepper()? };
        let run = run_time_invariant(&h.initial, &ctrl.velocities, &h.diffusion, &ctrl.gains, duration, &cfg, usize::MAX, None)
            .map_err(core("hsdp"))?;
        (h.initial, ctrl.velocities, h.diffusion, ctrl.gains, run.final_state)
    } else {
        let (y0, f) = scalar_pair(s, loaded, d)?;
        let diffusion = scalar_diffusion(s)?;
        let cfg = StepperConfig { dt, ..s.stepper()? };
        let pde = evolve_stabilizing_observed(&y0, &f, diffusion, duration, &cfg, |_, _| {}).map_err(core("pde"))?;
        let g = TransitionGraph::new(1, vec![]).map_err(core("ctmc"))?;
        let gains = meanfield_core::hsdp::SpatialGainSet::zero(&g, d);
        let start = StackedDensity::new(vec![y0]).map_err(core("hsdp"))?;
        let reference = StackedDensity::new(vec![pde]).map_err(core("hsdp"))?;
        (start, vec![log_gradient_velocity(&f, diffusion)], vec![diffusion], gains, reference)
    };

    let mut ens = ParticleEnsemble::sample(&start, p.count, seed).map_err(core("particles"))?;
    for _ in 0..n_steps {
        ens.sde_step(&velocities, &diffusion, &gains, dt).map_err(core("particles"))?;
    }
    let emp = ens.empirical_density(&bins).map_err(core("particles"))?;
    let pde_bins = reference
        .states()
        .iter()
        .map(|f| restrict_to_bins(f, &bins))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| invalid(format!("particles.bins: {e}")))?;

    out.write("particles.csv", &ens.to_csv())?;
    out.write("empirical.csv", &stacked_trajectory_csv(&[(duration, emp.density.clone())]))?;
    let pde_stack = StackedDensity::new(pde_bins.clone()).map_err(core("hsdp"))?;
    out.write("pde.csv", &stacked_trajectory_csv(&[(duration, pde_stack)]))?;

    let mut o = Outcome::default();
    o.set("l1_distance", emp.l1_distance(&pde_bins));
    Ok(o)
}

fn spectrum_rows(r: &SpectrumReport) -> Vec<Vec<f64>> {
    r.eigenvalues.iter().map(|z| vec![z.re, z.im]).collect()
}

pub fn spectrum(loaded: &Loaded, out: &mut Artifacts) -> Result<Outcome, RunError> {
    let s = &loaded.scenario;
    let spec = s.spectrum.clone().unwrap_or_default();
    let mut o = Outcome::default();
    match spec.mode {
        SpectrumMode::Mass => {
            let g = config::graph(s.section(&s.graph, "graph")?, &loaded.base)?;
            let rates = match (&spec.rates, &spec.stationary) {
                (Some(r), None) => r.clone(),
                (None, Some(mu)) => synthesize_stationary_rates(&g, mu).map_err(core("ctmc"))?,
                _ => return Err(invalid("spectrum needs exactly one of `rates` or `stationary`")),
            };
            if rates.len() != g.n_edges() {
                return Err(invalid(format!("{} rates for {} edges", rates.len(), g.n_edges())));
            }
            let r = spectrum_check(&g, &rates).map_err(core("ctmc"))?;
            out.write("eigenvalues.csv", &table_csv(&["re", "im"], &spectrum_rows(&r)))?;
            let rows: Vec<Vec<f64>> =
                g.edges().iter().zip(&rates).map(|(&(a, b), &q)| vec![(a + 1) as f64, (b + 1) as f64, q]).collect();
            out.write("rates.csv", &table_csv(&["source", "target", "rate"], &rows))?;
            o.set("max_real_part", r.max_real);
            o.set("gap", r.gap);
            o.set("zero_multiplicity", r.zero_multiplicity as f64);
        }
        SpectrumMode::Coupled => {
            let d = s.domain()?;
            let h = hybrid_setup(s, loaded, d)?;
            let ctrl = stabilizing_controller(&h.target, &h.graph, &h.diffusion).map_err(core("hsdp"))?;
            let c = coupled_spectrum(&ctrl.velocities, &h.diffusion, &ctrl.gains).map_err(core("hsdp"))?;
            out.write("eigenvalues.csv", &table_csv(&["re", "im"], &spectrum_rows(&c.report)))?;
            out.write("gains.csv", &ctrl.gains.to_csv())?;
            let stacked: Vec<f64> = h.target.densities().iter().flat_map(|f| f.values().iter().copied()).collect();
            o.set("max_real_part", c.report.max_real);
            o.set("gap", c.report.gap);
            o.set("zero_multiplicity", c.report.zero_multiplicity as f64);
            o.set("kernel_error", c.kernel.iter().zip(&stacked).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    Ok(o)
}
