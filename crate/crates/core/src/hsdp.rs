//! Coupled advection-diffusion-reaction system for a population that switches
//! between discrete states: splitting solver, steering, spatial-gain
//! stabilization and spectral certificates.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::control::{execute_plan, synthesize_steering_plan_with, SteeringOptions, TargetDensity};
use crate::ctmc::{
    check_simplex, global_transfer_from_boundary, is_strongly_connected, monotone_certificate,
    rate_matrix, synthesize_stationary_rates, GlobalTransfer, SpectrumReport, TransitionGraph,
};
use crate::error::{Error, Result};
use crate::grid::{FaceField, RectDomain, ScalarField};
use crate::linalg::{compensated_sum, expm};
use crate::pde::{
    advection_diffusion_operator, log_gradient_velocity, AdvectionFlux, LinearStepper,
    StepperConfig, TimeScheme,
};

/// One density per discrete state on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedDensity {
    states: Vec<ScalarField>,
}

impl StackedDensity {
    pub fn new(states: Vec<ScalarField>) -> Result<Self> {
        let first = states.first().ok_or_else(|| Error::Config("no states given".into()))?;
        if states.iter().any(|s| s.domain() != first.domain()) {
            return Err(Error::Config("states live on different grids".into()));
        }
        Ok(Self { states })
    }

    /// Checks nonnegativity and unit total mass.
    pub fn validate_density(&self) -> Result<()> {
        for s in &self.states {
            let cell = s.argmin();
            if s.values()[cell] < 0.0 {
                return Err(Error::PositivityLoss { value: s.values()[cell], cell, floor: 0.0 });
            }
        }
        let m = self.total_mass();
        if (m - 1.0).abs() > 1e-12 {
            return Err(Error::MassMismatch { found: m, expected: 1.0 });
        }
        Ok(())
    }

    pub fn domain(&self) -> &RectDomain {
        self.states[0].domain()
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn state(&self, i: usize) -> &ScalarField {
        &self.states[i]
    }

    pub fn states(&self) -> &[ScalarField] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [ScalarField] {
        &mut self.states
    }

    pub fn masses(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.mass()).collect()
    }

    pub fn total_mass(&self) -> f64 {
        compensated_sum(self.states.iter().map(|s| s.mass()))
    }

    pub fn min(&self) -> f64 {
        self.states.iter().map(|s| s.min()).fold(f64::INFINITY, f64::min)
    }

    /// Per-state L2 distances.
    pub fn errors_to(&self, other: &[ScalarField]) -> Vec<f64> {
        self.states.iter().zip(other).map(|(a, b)| a.sub(b).l2_norm()).collect()
    }

    /// `sqrt(Σ_i ||y_i - f_i||^2)`.
    pub fn distance(&self, other: &[ScalarField]) -> f64 {
        self.errors_to(other).iter().map(|e| e * e).sum::<f64>().sqrt()
    }

    /// Stacked vector, state-major.
    pub fn to_vector(&self) -> Vec<f64> {
        self.states.iter().flat_map(|s| s.values().iter().copied()).collect()
    }

    /// CSV rows `t,state,cell,value` (state 1-based), no header.
    pub fn write_csv_rows(&self, t: f64, out: &mut String) {
        for (i, s) in self.states.iter().enumerate() {
            for (c, v) in s.values().iter().enumerate() {
                let _ = writeln!(out, "{t:?},{},{c},{v:?}", i + 1);
            }
        }
    }
}

/// Target stack with its support.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridTarget {
    densities: Vec<ScalarField>,
    masses: Vec<f64>,
    support: Vec<usize>,
}

impl HybridTarget {
    pub fn new(densities: Vec<ScalarField>) -> Result<Self> {
        let stack = StackedDensity::new(densities)?;
        let masses = stack.masses();
        let total = compensated_sum(masses.iter().copied());
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Target(format!("total mass {total} differs from 1")));
        }
        let mut support = Vec::new();
        for (i, f) in stack.states.iter().enumerate() {
            if masses[i] > 0.0 {
                if let Some(cell) = f.values().iter().position(|v| !(*v > 0.0)) {
                    return Err(Error::Target(format!(
                        "state {i} has positive mass but value {:e} at cell {cell}",
                        f.values()[cell]
                    )));
                }
                support.push(i);
            } else if f.values().iter().any(|v| *v != 0.0) {
                return Err(Error::Target(format!("state {i} has zero mass but is not zero")));
            }
        }
        if support.is_empty() {
            return Err(Error::Target("target has no support".into()));
        }
        Ok(Self { densities: stack.states, masses, support })
    }

    pub fn densities(&self) -> &[ScalarField] {
        &self.densities
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn n_states(&self) -> usize {
        self.densities.len()
    }

    pub fn full_support(&self) -> bool {
        self.support.len() == self.densities.len()
    }

    /// `min_x f_i(x) / mass(f_i)` for each supported state.
    pub fn lower_bound_constants(&self) -> Vec<f64> {
        self.support.iter().map(|&i| self.densities[i].min() / self.masses[i]).collect()
    }

    pub fn domain(&self) -> &RectDomain {
        self.densities[0].domain()
    }
}

/// Cellwise reaction coefficients, one field per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGainSet {
    graph: TransitionGraph,
    domain: RectDomain,
    gains: Vec<Vec<f64>>,
}

impl SpatialGainSet {
    pub fn new(graph: TransitionGraph, domain: RectDomain, gains: Vec<Vec<f64>>) -> Result<Self> {
        if gains.len() != graph.n_edges() || gains.iter().any(|k| k.len() != domain.n_cells()) {
            return Err(Error::Config("gain array shape does not match graph and grid".into()));
        }
        if gains.iter().flatten().any(|k| !(k.is_finite() && *k >= 0.0)) {
            return Err(Error::Config("gains must be finite and nonnegative".into()));
        }
        Ok(Self { graph, domain, gains })
    }

    /// The same rate on every cell.
    pub fn uniform(graph: &TransitionGraph, domain: RectDomain, rates: &[f64]) -> Result<Self> {
        let gains = rates.iter().map(|&r| vec![r; domain.n_cells()]).collect();
        Self::new(graph.clone(), domain, gains)
    }

    pub fn zero(graph: &TransitionGraph, domain: RectDomain) -> Self {
        Self { graph: graph.clone(), domain, gains: vec![vec![0.0; domain.n_cells()]; graph.n_edges()] }
    }

    pub fn graph(&self) -> &TransitionGraph {
        &self.graph
    }

    pub fn domain(&self) -> &RectDomain {
        &self.domain
    }

    pub fn edge_gain(&self, e: usize) -> &[f64] {
        &self.gains[e]
    }

    pub fn max_gain(&self) -> f64 {
        self.gains.iter().flatten().fold(0.0, |m, k| m.max(*k))
    }

    pub fn is_spatially_constant(&self) -> bool {
        self.gains.iter().all(|k| k.iter().all(|v| *v == k[0]))
    }

    /// Per-edge rates when the gains do not vary in space.
    pub fn constant_rates(&self) -> Option<Vec<f64>> {
        self.is_spatially_constant().then(|| self.gains.iter().map(|k| k[0]).collect())
    }

    /// `Σ_e K_e(x) Q_e` at one cell.
    pub fn cell_matrix(&self, cell: usize) -> DMatrix<f64> {
        let rates: Vec<f64> = self.gains.iter().map(|k| k[cell]).collect();
        rate_matrix(&self.graph, &rates)
    }

    /// Largest total exit rate over states and cells.
    pub fn max_exit_rate(&self) -> f64 {
        let mut worst = 0.0_f64;
        for c in 0..self.domain.n_cells() {
            let mut out = vec![0.0; self.graph.n_vertices()];
            for (e, &(s, _)) in self.graph.edges().iter().enumerate() {
                out[s] += self.gains[e][c];
            }
            worst = out.iter().copied().fold(worst, f64::max);
        }
        worst
    }

    /// One row per cell: `cell,K_s->t,...` with 1-based edge labels.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cell");
        for &(a, b) in self.graph.edges() {
            let _ = write!(s, ",K_{}->{}", a + 1, b + 1);
        }
        s.push('\n');
        for c in 0..self.domain.n_cells() {
            let _ = write!(s, "{c}");
            for k in &self.gains {
                let _ = write!(s, ",{:?}", k[c]);
            }
            s.push('\n');
        }
        s
    }
}

enum Reaction {
    None,
    Uniform(DMatrix<f64>),
    Cellwise(Vec<DMatrix<f64>>),
}

/// Pre-factored Strang step for fixed velocities, diffusions, gains and `dt`.
pub struct HybridStepper {
    transport: Vec<LinearStepper>,
    half_reaction: Reaction,
    n_states: usize,
}

impl HybridStepper {
    pub fn new(
        velocities: &[FaceField],
        diffusion: &[f64],
        gains: &SpatialGainSet,
        dt: f64,
        flux: AdvectionFlux,
    ) -> Result<Self> {
        let n = gains.graph().n_vertices();
        if velocities.len() != n || diffusion.len() != n {
            return Err(Error::Config(format!(
                "{} velocities and {} diffusions for {n} states",
                velocities.len(),
                diffusion.len()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::Config(format!("time step must be positive (got {dt})")));
        }
        let transport = velocities
            .iter()
            .zip(diffusion)
            .map(|(v, &d)| {
                let op = advection_diffusion_operator(v, d, flux)?;
                LinearStepper::new(&op, dt, TimeScheme::ImplicitEuler)
            })
            .collect::<Result<Vec<_>>>()?;
        let half_reaction = if gains.max_gain() == 0.0 {
            Reaction::None
        } else if gains.is_spatially_constant() {
            Reaction::Uniform(expm(&(gains.cell_matrix(0) * (0.5 * dt))))
        } else {
            Reaction::Cellwise(
                (0..gains.domain().n_cells())
                    .map(|c| expm(&(gains.cell_matrix(c) * (0.5 * dt))))
                    .collect(),
            )
        };
        Ok(Self { transport, half_reaction, n_states: n })
    }

    fn react(&self, y: &mut StackedDensity) {
        let n = self.n_states;
        let cells = y.domain().n_cells();
        let mut local = DVector::zeros(n);
        for c in 0..cells {
            let m = match &self.half_reaction {
                Reaction::None => return,
                Reaction::Uniform(m) => m,
                Reaction::Cellwise(ms) => &ms[c],
            };
            for i in 0..n {
                local[i] = y.states[i].values()[c];
            }
            let out = m * &local;
            for i in 0..n {
                y.states[i].values_mut()[c] = out[i];
            }
        }
    }

    pub fn step(&self, y: &mut StackedDensity) {
        self.react(y);
        y.states
            .par_iter_mut()
            .zip(self.transport.par_iter())
            .for_each(|(s, t)| t.step_in_place(s.values_mut()));
        self.react(y);
    }
}

/// One Strang step: half reaction, full transport per state, half reaction.
pub fn split_step(
    y: &StackedDensity,
    velocities: &[FaceField],
    diffusion: &[f64],
    gains: &SpatialGainSet,
    dt: f64,
) -> Result<StackedDensity> {
    let stepper =
        HybridStepper::new(velocities, diffusion, gains, dt, AdvectionFlux::ExponentialFitting)?;
    let mut out = y.clone();
    stepper.step(&mut out);
    if out.states.iter().flat_map(|s| s.values()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical { context: "split step", detail: "non-finite state".into() });
    }
    Ok(out)
}

/// Mass vectors of the split solver against the ODE `μ' = (Σ q_e Q_e) μ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MassConsistency {
    pub times: Vec<f64>,
    pub pde_masses: Vec<Vec<f64>>,
    pub ode_masses: Vec<Vec<f64>>,
    pub max_deviation: f64,
}

/// Runs the split solver with constant rates and compares state masses with
/// the matrix-exponential solution at every step.
pub fn mass_trajectory_consistency(
    y0: &StackedDensity,
    rates: &[f64],
    graph: &TransitionGraph,
    velocities: &[FaceField],
    diffusion: &[f64],
    dt: f64,
    t_final: f64,
) -> Result<MassConsistency> {
    let gains = SpatialGainSet::uniform(graph, *y0.domain(), rates)?;
    let stepper = HybridStepper::new(velocities, diffusion, &gains, dt, AdvectionFlux::ExponentialFitting)?;
    let n_steps = ((t_final / dt) - 1e-9).ceil().max(0.0) as usize;
    let g = rate_matrix(graph, rates);
    let m0 = DVector::from_vec(y0.masses());
    let mut y = y0.clone();
    let mut times = vec![0.0];
    let mut pde_masses = vec![y.masses()];
    let mut ode_masses = vec![y.masses()];
    let mut max_deviation = 0.0_f64;
    for k in 1..=n_steps {
        stepper.step(&mut y);
        let t = k as f64 * dt;
        let ode: Vec<f64> = (expm(&(&g * t)) * &m0).iter().copied().collect();
        let pde = y.masses();
        let dev = pde.iter().zip(&ode).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        max_deviation = max_deviation.max(dev);
        times.push(t);
        pde_masses.push(pde);
        ode_masses.push(ode);
    }
    Ok(MassConsistency { times, pde_masses, ode_masses, max_deviation })
}

/// Per-state `D_i ∇f_i / f_i`; zero for states without target mass.
pub fn stabilizing_velocities(target: &HybridTarget, diffusion: &[f64]) -> Vec<FaceField> {
    target
        .densities
        .iter()
        .zip(&target.masses)
        .zip(diffusion)
        .map(|((f, &m), &d)| {
            if m > 0.0 {
                log_gradient_velocity(f, d)
            } else {
                FaceField::zeros(*f.domain())
            }
        })
        .collect()
}

/// `K_e(x) = q_e μ_S / (|Ω| f_S(x))` on supported sources.
///
/// With `q` stationary for the mass vector this makes `f` an exact zero of
/// the reaction term in every cell; for uniform `f_S` it reduces to `q_e`.
fn supported_gain(q: f64, mass: f64, f: &ScalarField) -> Vec<f64> {
    let scale = q * mass / f.domain().volume();
    f.values().iter().map(|v| scale / v).collect()
}

/// Spatial gains for a fully supported target and rates `q` stationary for
/// its mass vector.
pub fn stabilizing_gains(
    target: &HybridTarget,
    graph: &TransitionGraph,
    q: &[f64],
) -> Result<SpatialGainSet> {
    if graph.n_vertices() != target.n_states() {
        return Err(Error::Config("graph and target have different state counts".into()));
    }
    if !target.full_support() {
        return Err(Error::Config(
            "target has zero-mass states; use zero_mass_stabilizing_gains".into(),
        ));
    }
    if q.len() != graph.n_edges() || q.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Config("one positive rate per edge expected".into()));
    }
    let gains = graph
        .edges()
        .iter()
        .zip(q)
        .map(|(&(s, _), &qe)| supported_gain(qe, target.masses[s], &target.densities[s]))
        .collect();
    SpatialGainSet::new(graph.clone(), *target.domain(), gains)
}

/// Stationary rates, gains and velocities for a fully supported target.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilizingController {
    pub rates: Vec<f64>,
    pub gains: SpatialGainSet,
    pub velocities: Vec<FaceField>,
    pub diffusion: Vec<f64>,
}

pub fn stabilizing_controller(
    target: &HybridTarget,
    graph: &TransitionGraph,
    diffusion: &[f64],
) -> Result<StabilizingController> {
    if target.full_support() {
        let rates = synthesize_stationary_rates(graph, target.masses())?;
        let gains = stabilizing_gains(target, graph, &rates)?;
        Ok(StabilizingController {
            rates,
            gains,
            velocities: stabilizing_velocities(target, diffusion),
            diffusion: diffusion.to_vec(),
        })
    } else {
        let z = zero_mass_stabilizing_gains(target, graph)?;
        Ok(StabilizingController {
            rates: z.rates,
            gains: z.gains,
            velocities: stabilizing_velocities(target, diffusion),
            diffusion: diffusion.to_vec(),
        })
    }
}

/// Gains for targets that vanish on some states, with the structural checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroMassGains {
    pub gains: SpatialGainSet,
    pub rates: Vec<f64>,
    pub support: Vec<usize>,
    /// Eigenvalues of the mass-level matrix restricted to unsupported states.
    pub off_support_spectrum: Option<SpectrumReport>,
}

/// Weight `a_i = 1` on unsupported states; no rate from the support out of it.
pub fn zero_mass_stabilizing_gains(
    target: &HybridTarget,
    graph: &TransitionGraph,
) -> Result<ZeroMassGains> {
    let n = target.n_states();
    if graph.n_vertices() != n {
        return Err(Error::Config("graph and target have different state counts".into()));
    }
    if let Ok(cert) = monotone_certificate(graph) {
        return Err(cert.into_error());
    }
    let support = target.support().to_vec();
    let (g1, e1) = graph.induced(&support)?;
    if let Ok(cert) = monotone_certificate(&g1) {
        let map = |v: Vec<usize>| v.into_iter().map(|k| support[k]).collect();
        return Err(Error::NotStronglyConnected { v1: map(cert.v1), v2: map(cert.v2) });
    }
    let mut in_support = vec![false; n];
    support.iter().for_each(|&i| in_support[i] = true);

    let mut rates = vec![0.0; graph.n_edges()];
    if support.len() > 1 {
        let mu1: Vec<f64> = {
            let m: Vec<f64> = support.iter().map(|&i| target.masses[i]).collect();
            let s = compensated_sum(m.iter().copied());
            m.iter().map(|v| v / s).collect()
        };
        let q1 = synthesize_stationary_rates(&g1, &mu1)?;
        for (k, &e) in e1.iter().enumerate() {
            rates[e] = q1[k];
        }
    }
    for (e, &(s, _)) in graph.edges().iter().enumerate() {
        if !in_support[s] {
            rates[e] = 1.0;
        }
    }

    let g = rate_matrix(graph, &rates);
    for &i in &support {
        for j in (0..n).filter(|&j| !in_support[j]) {
            if g[(j, i)] != 0.0 {
                return Err(Error::Synthesis { residual: g[(j, i)] });
            }
        }
    }
    let off: Vec<usize> = (0..n).filter(|&j| !in_support[j]).collect();
    let off_support_spectrum = (!off.is_empty()).then(|| {
        let g3 = DMatrix::from_fn(off.len(), off.len(), |r, c| g[(off[r], off[c])]);
        SpectrumReport::from_matrix(&g3, 1e-12)
    });
    if let Some(rep) = &off_support_spectrum {
        if !(rep.max_real < 0.0) {
            return Err(Error::Synthesis { residual: rep.max_real });
        }
    }

    let cells = target.domain().n_cells();
    let gains = graph
        .edges()
        .iter()
        .zip(&rates)
        .map(|(&(s, _), &qe)| {
            if in_support[s] {
                supported_gain(qe, target.masses[s], &target.densities[s])
            } else {
                vec![qe; cells]
            }
        })
        .collect();
    let gains = SpatialGainSet::new(graph.clone(), *target.domain(), gains)?;
    Ok(ZeroMassGains { gains, rates, support, off_support_spectrum })
}

/// Dense generator of the coupled system, state-major ordering.
pub fn coupled_generator(
    velocities: &[FaceField],
    diffusion: &[f64],
    gains: &SpatialGainSet,
) -> Result<DMatrix<f64>> {
    let n = gains.graph().n_vertices();
    let cells = gains.domain().n_cells();
    if n * cells > 8192 {
        return Err(Error::Config(format!("generator of size {} exceeds 8192", n * cells)));
    }
    if velocities.len() != n || diffusion.len() != n {
        return Err(Error::Config("one velocity and diffusion per state expected".into()));
    }
    let mut w = DMatrix::zeros(n * cells, n * cells);
    for i in 0..n {
        let op = advection_diffusion_operator(&velocities[i], diffusion[i], AdvectionFlux::ExponentialFitting)?;
        for r in 0..cells {
            for (c, v) in op.row(r) {
                w[(i * cells + r, i * cells + c)] += v;
            }
        }
    }
    for (e, &(s, t)) in gains.graph().edges().iter().enumerate() {
        for (c, &k) in gains.edge_gain(e).iter().enumerate() {
            w[(s * cells + c, s * cells + c)] -= k;
            w[(t * cells + c, s * cells + c)] += k;
        }
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSpectrum {
    pub report: SpectrumReport,
    /// Null vector scaled to unit total mass (cell volume included).
    pub kernel: Vec<f64>,
    /// Smallest singular value of the generator.
    pub kernel_residual: f64,
}

pub fn coupled_spectrum(
    velocities: &[FaceField],
    diffusion: &[f64],
    gains: &SpatialGainSet,
) -> Result<CoupledSpectrum> {
    let w = coupled_generator(velocities, diffusion, gains)?;
    let scale = w.amax().max(1.0);
    let report = SpectrumReport::from_matrix(&w, 1e-9 * scale);
    let svd = w.svd(false, true);
    let v_t = svd.v_t.as_ref().ok_or_else(|| Error::Numerical {
        context: "coupled spectrum",
        detail: "singular vectors unavailable".into(),
    })?;
    let (k, smin) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(k, s)| (k, *s))
        .expect("non-empty matrix");
    let row = v_t.row(k);
    let cellvol = gains.domain().cell_volume();
    let mass = compensated_sum(row.iter().copied()) * cellvol;
    if mass == 0.0 {
        return Err(Error::Numerical { context: "coupled spectrum", detail: "null vector has zero mass".into() });
    }
    let kernel = row.iter().map(|v| v / mass).collect();
    Ok(CoupledSpectrum { report, kernel, kernel_residual: smin })
}

/// Largest real part of the generator restricted to `states` (rows and columns).
pub fn block_spectral_abscissa(w: &DMatrix<f64>, states: &[usize], cells: usize) -> f64 {
    let idx: Vec<usize> = states.iter().flat_map(|&s| (0..cells).map(move |c| s * cells + c)).collect();
    let b = DMatrix::from_fn(idx.len(), idx.len(), |r, c| w[(idx[r], idx[c])]);
    SpectrumReport::from_matrix(&b, 0.0).max_real
}

/// Trajectory summary of a closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridRun {
    pub final_state: StackedDensity,
    pub times: Vec<f64>,
    pub masses: Vec<Vec<f64>>,
    /// Stacked L2 distance to the reference at each sample (empty without one).
    pub errors: Vec<f64>,
    pub min_value: f64,
}

/// Runs time-invariant velocities, diffusions and gains for `t_final`,
/// sampling every `sample_every` steps.
pub fn run_time_invariant(
    y0: &StackedDensity,
    velocities: &[FaceField],
    diffusion: &[f64],
    gains: &SpatialGainSet,
    t_final: f64,
    cfg: &StepperConfig,
    sample_every: usize,
    reference: Option<&[ScalarField]>,
) -> Result<HybridRun> {
    cfg.validate()?;
    let (n, dt) = cfg.steps_for(y0.domain(), t_final);
    let mut y = y0.clone();
    let mut times = vec![0.0];
    let mut masses = vec![y.masses()];
    let mut errors = reference.map(|r| vec![y.distance(r)]).unwrap_or_default();
    let mut min_value = y.min();
    if n > 0 {
        let stepper = HybridStepper::new(velocities, diffusion, gains, dt, cfg.advection_flux)?;
        for k in 1..=n {
            stepper.step(&mut y);
            if k % sample_every.max(1) == 0 || k == n {
                times.push(k as f64 * dt);
                masses.push(y.masses());
                if let Some(r) = reference {
                    errors.push(y.distance(r));
                }
                min_value = min_value.min(y.min());
            }
        }
    }
    if y.states.iter().flat_map(|s| s.values()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical { context: "hybrid run", detail: "non-finite state".into() });
    }
    Ok(HybridRun { final_state: y, times, masses, errors, min_value })
}

/// Two-phase steering plan: mass transfer with rates, then per-state density
/// steering with velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridPlan {
    pub graph: TransitionGraph,
    pub t_final: f64,
    pub diffusion: Vec<f64>,
    pub transfer: GlobalTransfer,
    pub target: HybridTarget,
    pub tol: f64,
    pub steering_options: SteeringOptions,
}

pub fn hybrid_steering_plan(
    y0: &StackedDensity,
    target: &HybridTarget,
    graph: &TransitionGraph,
    diffusion: &[f64],
    t_final: f64,
    tol: f64,
) -> Result<HybridPlan> {
    let n = target.n_states();
    if y0.n_states() != n || graph.n_vertices() != n || diffusion.len() != n {
        return Err(Error::Config("state counts of start, target, graph and diffusion differ".into()));
    }
    if !is_strongly_connected(graph) {
        return Err(monotone_certificate(graph)?.into_error());
    }
    if !target.full_support() {
        return Err(Error::Target("steering needs every target state to carry mass".into()));
    }
    let m0 = y0.masses();
    let (total0, total_f) = (compensated_sum(m0.iter().copied()), 1.0);
    if (total0 - total_f).abs() > 1e-10 {
        return Err(Error::MassMismatch { found: total0, expected: total_f });
    }
    if !(t_final > 0.0) {
        return Err(Error::Config(format!("final time must be positive (got {t_final})")));
    }
    let mu0: Vec<f64> = m0.iter().map(|m| m / total0).collect();
    check_simplex(&mu0)?;
    let transfer = global_transfer_from_boundary(graph, &mu0, target.masses(), 0.5 * t_final)?;
    Ok(HybridPlan {
        graph: graph.clone(),
        t_final,
        diffusion: diffusion.to_vec(),
        transfer,
        target: target.clone(),
        tol,
        steering_options: SteeringOptions::default(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridExecution {
    pub final_state: StackedDensity,
    pub masses_after_transfer: Vec<f64>,
    pub state_errors: Vec<f64>,
    pub max_velocity: f64,
    pub max_rate: f64,
    /// `(t, state)` at the end of the transfer phase and at the end.
    pub snapshots: Vec<(f64, StackedDensity)>,
    pub warnings: Vec<String>,
}

pub fn execute_hybrid_plan(
    plan: &HybridPlan,
    y0: &StackedDensity,
    cfg: &StepperConfig,
) -> Result<HybridExecution> {
    cfg.validate()?;
    let domain = *y0.domain();
    let zero_v: Vec<FaceField> = (0..y0.n_states()).map(|_| FaceField::zeros(domain)).collect();
    let mut y = y0.clone();
    let ctrl = &plan.transfer.control;
    for (k, rates) in ctrl.rates.iter().enumerate() {
        let span = ctrl.breakpoints[k + 1] - ctrl.breakpoints[k];
        let (n, dt) = cfg.steps_for(&domain, span);
        let gains = SpatialGainSet::uniform(&plan.graph, domain, rates)?;
        let stepper = HybridStepper::new(&zero_v, &plan.diffusion, &gains, dt, cfg.advection_flux)?;
        for _ in 0..n {
            stepper.step(&mut y);
        }
    }
    let masses_after_transfer = y.masses();
    let mut snapshots = vec![(0.5 * plan.t_final, y.clone())];

    let mut max_velocity = 0.0_f64;
    let mut warnings = Vec::new();
    let half = plan.t_final - 0.5 * plan.t_final;
    let mut finals = Vec::with_capacity(y.n_states());
    for (i, state) in y.states.iter().enumerate() {
        let m = state.mass();
        let unit = state.scaled(1.0 / m);
        let f = TargetDensity::normalized(plan.target.densities()[i].clone())?;
        let opts = SteeringOptions { diffusion: plan.diffusion[i], ..plan.steering_options };
        let sp = synthesize_steering_plan_with(&unit, &f, half, plan.tol, opts)?;
        if let Some(w) = &sp.warning {
            warnings.push(format!("state {}: {w}", i + 1));
        }
        let run = execute_plan(&sp, &unit, cfg)?;
        max_velocity = max_velocity.max(run.max_velocity);
        finals.push(run.final_state.scaled(m));
    }
    let final_state = StackedDensity::new(finals)?;
    let state_errors = final_state.errors_to(plan.target.densities());
    snapshots.push((plan.t_final, final_state.clone()));
    Ok(HybridExecution {
        final_state,
        masses_after_transfer,
        state_errors,
        max_velocity,
        max_rate: ctrl.max_rate(),
        snapshots,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit(n: usize) -> RectDomain {
        RectDomain::unit_interval(n).unwrap()
    }

    fn two_state_target(n: usize) -> HybridTarget {
        let d = unit(n);
        let f1 = ScalarField::constant(d, 0.4);
        let f2 = ScalarField::from_fn(d, |p| 1.0 + 0.3 * (PI * p[0]).cos()).normalized_to(0.6).unwrap();
        HybridTarget::new(vec![f1, f2]).unwrap()
    }

    #[test]
    fn no_gains_means_decoupled_transport() {
        let d = unit(32);
        let g = TransitionGraph::bidirected_path(2).unwrap();
        let y = StackedDensity::new(vec![
            ScalarField::from_fn(d, |p| 0.5 + 0.4 * p[0]).normalized_to(0.3).unwrap(),
            ScalarField::from_fn(d, |p| 1.0 + (5.0 * p[0]).sin() * 0.2).normalized_to(0.7).unwrap(),
        ])
        .unwrap();
        let v = vec![FaceField::from_faces(d, |_, _, _| 0.3), FaceField::zeros(d)];
        let dt = 1e-3;
        let out = split_step(&y, &v, &[1.0, 0.5], &SpatialGainSet::zero(&g, d), dt).unwrap();
        let cfg = StepperConfig::new(dt).unwrap();
        for i in 0..2 {
            let single = crate::pde::step_advection_diffusion(y.state(i), &v[i], [1.0, 0.5][i], &cfg).unwrap();
            assert!(single.sub(out.state(i)).max_abs() < 1e-14);
        }
    }

    #[test]
    fn pure_reaction_matches_cellwise_exponential() {
        let d = unit(8);
        let g = TransitionGraph::bidirected_path(2).unwrap();
        let gains = SpatialGainSet::new(
            g.clone(),
            d,
            vec![(0..8).map(|c| 1.0 + c as f64 * 0.1).collect(), vec![0.7; 8]],
        )
        .unwrap();
        let y = StackedDensity::new(vec![
            ScalarField::from_fn(d, |p| 1.0 + p[0]).normalized_to(0.5).unwrap(),
            ScalarField::constant(d, 0.5),
        ])
        .unwrap();
        let zero = vec![FaceField::zeros(d), FaceField::zeros(d)];
        let dt = 0.3;
        let out = split_step(&y, &zero, &[0.0, 0.0], &gains, dt).unwrap();
        for c in 0..8 {
            let m = expm(&(gains.cell_matrix(c) * dt));
            let v = &m * DVector::from_vec(vec![y.state(0).values()[c], y.state(1).values()[c]]);
            assert!((out.state(0).values()[c] - v[0]).abs() < 1e-12);
            assert!((out.state(1).values()[c] - v[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_targets_give_constant_gains() {
        let d = unit(16);
        let target =
            HybridTarget::new(vec![ScalarField::constant(d, 0.25), ScalarField::constant(d, 0.75)])
                .unwrap();
        let g = TransitionGraph::bidirected_path(2).unwrap();
        let q = synthesize_stationary_rates(&g, target.masses()).unwrap();
        let k = stabilizing_gains(&target, &g, &q).unwrap();
        assert_eq!(k.constant_rates().unwrap(), q);
    }

    #[test]
    fn target_is_fixed_by_closed_loop() {
        let target = two_state_target(64);
        let g = TransitionGraph::bidirected_path(2).unwrap();
        let c = stabilizing_controller(&target, &g, &[1.0, 0.5]).unwrap();
        let y = StackedDensity::new(target.densities().to_vec()).unwrap();
        let out = split_step(&y, &c.velocities, &c.diffusion, &c.gains, 1e-2).unwrap();
        assert!(out.distance(target.densities()) < 1e-12);
    }

    #[test]
    fn zero_mass_structure() {
        let d = unit(16);
        let g = TransitionGraph::new(3, vec![(0, 1), (1, 0), (1, 2), (2, 0)]).unwrap();
        let target = HybridTarget::new(vec![
            ScalarField::constant(d, 0.5),
            ScalarField::from_fn(d, |p| 1.0 + p[0]).normalized_to(0.5).unwrap(),
            ScalarField::constant(d, 0.0),
        ])
        .unwrap();
        let z = zero_mass_stabilizing_gains(&target, &g).unwrap();
        assert_eq!(z.support, vec![0, 1]);
        assert_eq!(z.rates[2], 0.0);
        assert_eq!(z.rates[3], 1.0);
        assert!(z.off_support_spectrum.unwrap().max_real < 0.0);

        let split = TransitionGraph::new(3, vec![(0, 2), (2, 0), (1, 2), (2, 1)]).unwrap();
        assert!(matches!(
            zero_mass_stabilizing_gains(&target, &split),
            Err(Error::NotStronglyConnected { .. })
        ));
    }

    #[test]
    fn single_state_spectrum_is_real_and_stable() {
        let d = unit(24);
        let g = TransitionGraph::new(1, vec![]).unwrap();
        let f = ScalarField::from_fn(d, |p| 1.0 + 0.5 * p[0]).normalized().unwrap();
        let v = vec![log_gradient_velocity(&f, 1.0)];
        let s = coupled_spectrum(&v, &[1.0], &SpatialGainSet::zero(&g, d)).unwrap();
        assert!(s.report.max_real < 1e-8);
        assert_eq!(s.report.zero_multiplicity, 1);
        assert!(s.report.eigenvalues.iter().all(|z| z.im.abs() < 1e-8));
        for (k, fv) in s.kernel.iter().zip(f.values()) {
            assert!((k - fv).abs() < 1e-8);
        }
    }
}
