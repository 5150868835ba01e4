//! Velocity-control laws for a single density: stabilization, finite-time
//! steering through a gain schedule, and path following.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::{divergence_form_operator, neumann_poisson_solve, FaceField, ScalarField};
use crate::pde::{
    advection_diffusion_operator, log_gradient_velocity, stabilizing_operator,
    weighted_heat_spectral_gap, AdvectionFlux, LinearStepper, StepperConfig, TimeScheme,
};

/// Division floor used by every velocity law that divides by the density.
pub const DENSITY_FLOOR: f64 = 1e-12;

/// Strictly positive unit-mass target with its reciprocal cached.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDensity {
    f: ScalarField,
    a: ScalarField,
    lower_bound: f64,
}

impl TargetDensity {
    pub fn new(f: ScalarField) -> Result<Self> {
        if let Some(cell) = f.values().iter().position(|v| !(*v > 0.0)) {
            return Err(Error::Target(format!(
                "value {:e} at cell {cell} is not positive",
                f.values()[cell]
            )));
        }
        let m = f.mass();
        if (m - 1.0).abs() > 1e-12 {
            return Err(Error::Target(format!("mass {m} differs from 1")));
        }
        Ok(Self::from_positive(f))
    }

    /// Normalizes `f` to unit mass first.
    pub fn normalized(f: ScalarField) -> Result<Self> {
        if let Some(cell) = f.values().iter().position(|v| !(*v > 0.0)) {
            return Err(Error::Target(format!(
                "value {:e} at cell {cell} is not positive",
                f.values()[cell]
            )));
        }
        Ok(Self::from_positive(f.normalized()?))
    }

    fn from_positive(f: ScalarField) -> Self {
        let a = f.reciprocal();
        let lower_bound = f.min();
        Self { f, a, lower_bound }
    }

    pub fn density(&self) -> &ScalarField {
        &self.f
    }

    pub fn weight(&self) -> &ScalarField {
        &self.a
    }

    pub fn lower_bound(&self) -> f64 {
        self.lower_bound
    }

    /// Largest face difference quotient of `f`.
    pub fn max_gradient(&self) -> f64 {
        crate::grid::face_gradient(&self.f).max_abs()
    }
}

/// `D ∇f / f` on faces, evaluated as a difference of logarithms.
pub fn stabilizing_velocity(f: &TargetDensity, diffusion: f64) -> FaceField {
    log_gradient_velocity(f.density(), diffusion)
}

fn check_floor(y: &ScalarField) -> Result<()> {
    let cell = y.argmin();
    let value = y.values()[cell];
    if !(value >= DENSITY_FLOOR) {
        return Err(Error::PositivityLoss { value, cell, floor: DENSITY_FLOOR });
    }
    Ok(())
}

/// `(D ∇y - g ∇(a y)) / y` on faces, with `y` averaged arithmetically.
pub fn feedback_velocity_with(
    y: &ScalarField,
    a: &ScalarField,
    gain: f64,
    diffusion: f64,
) -> Result<FaceField> {
    check_floor(y)?;
    let d = *y.domain();
    let (yv, av) = (y.values(), a.values());
    Ok(FaceField::from_faces(d, |axis, p, q| {
        let h = d.spacing(axis);
        let num = diffusion * (yv[q] - yv[p]) - gain * (av[q] * yv[q] - av[p] * yv[p]);
        num / (h * 0.5 * (yv[p] + yv[q]))
    }))
}

/// `∇y/y - αj ∇(a y)/y`, unit diffusion.
pub fn feedback_velocity(y: &ScalarField, f: &TargetDensity, alpha: f64, j: u32) -> Result<FaceField> {
    feedback_velocity_with(y, f.weight(), alpha * j as f64, 1.0)
}

/// Largest `g |∇(a y)|` over faces.
fn gain_gradient_peak(y: &ScalarField, a: &ScalarField, gain: f64) -> f64 {
    let d = *y.domain();
    let (yv, av) = (y.values(), a.values());
    d.faces()
        .map(|(axis, _, p, q)| (gain * (av[q] * yv[q] - av[p] * yv[p]) / d.spacing(axis)).abs())
        .fold(0.0, f64::max)
}

/// One implicit closed-loop step under the feedback law with gain `gain`.
///
/// Returns the new state and the velocity evaluated at it. Feeding that
/// velocity to the centered-flux implicit advection-diffusion step from `y`
/// reproduces the returned state.
pub fn closed_loop_step(
    y: &ScalarField,
    a: &ScalarField,
    gain: f64,
    diffusion: f64,
    dt: f64,
) -> Result<(ScalarField, FaceField)> {
    let one = ScalarField::constant(*a.domain(), 1.0);
    let op = divergence_form_operator(a, &one)?.scaled(gain);
    let stepper = LinearStepper::new(&op, dt, TimeScheme::ImplicitEuler)?;
    let mut next = y.values().to_vec();
    stepper.step_in_place(&mut next);
    let next = ScalarField::new(*y.domain(), next)?;
    let v = feedback_velocity_with(&next, a, gain, diffusion)?;
    Ok((next, v))
}

/// Velocity law attached to one plan phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VelocityLaw {
    Zero,
    Stabilize,
    /// Feedback law with unit gain.
    Smooth,
    /// Feedback law on gain interval `j` with effective gain `gain = α j / s`.
    Gain { alpha: f64, j: u32, gain: f64 },
}

impl VelocityLaw {
    fn tag(&self) -> &'static str {
        match self {
            VelocityLaw::Zero => "zero",
            VelocityLaw::Stabilize => "stabilize",
            VelocityLaw::Smooth => "smooth",
            VelocityLaw::Gain { .. } => "gain",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase {
    pub duration: f64,
    pub law: VelocityLaw,
}

/// Harmonic-square schedule compressed into the time left after preparation.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    pub alpha: f64,
    pub j_max: u32,
    /// Time rescaling: interval `j` lasts `scale / j^2`.
    pub scale: f64,
    pub spectral_gap: f64,
    pub predicted_error: f64,
}

impl GainSchedule {
    pub fn new(alpha: f64, j_max: u32, duration: f64, spectral_gap: f64) -> Result<Self> {
        if j_max == 0 {
            return Err(Error::Config("gain schedule needs at least one interval".into()));
        }
        if !(alpha > 0.0 && duration > 0.0) {
            return Err(Error::Config("gain and duration must be positive".into()));
        }
        let sum: f64 = (1..=j_max).map(|j| 1.0 / (j as f64).powi(2)).sum();
        Ok(Self { alpha, j_max, scale: duration / sum, spectral_gap, predicted_error: f64::NAN })
    }

    pub fn interval(&self, j: u32) -> Phase {
        let jf = j as f64;
        Phase {
            duration: self.scale / (jf * jf),
            law: VelocityLaw::Gain { alpha: self.alpha, j, gain: self.alpha * jf / self.scale },
        }
    }

    pub fn intervals(&self) -> impl Iterator<Item = Phase> + '_ {
        (1..=self.j_max).map(|j| self.interval(j))
    }

    /// Decay factor `exp(-α λ H_j)` after `j` intervals.
    pub fn envelope(&self, j: u32) -> f64 {
        let harmonic: f64 = (1..=j).map(|k| 1.0 / k as f64).sum();
        (-self.alpha * self.spectral_gap * harmonic).exp()
    }
}

/// Knobs for [`synthesize_steering_plan_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteeringOptions {
    pub j_max: u32,
    pub alpha_factor: f64,
    pub diffusion: f64,
}

impl Default for SteeringOptions {
    fn default() -> Self {
        Self { j_max: 40, alpha_factor: 2.0, diffusion: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringPlan {
    pub target: TargetDensity,
    pub t_final: f64,
    pub epsilon: f64,
    pub diffusion: f64,
    pub phases: Vec<Phase>,
    pub schedule: Option<GainSchedule>,
    /// Set when the predicted terminal error exceeds the requested tolerance.
    pub warning: Option<String>,
}

pub fn synthesize_steering_plan(
    y0: &ScalarField,
    f: &TargetDensity,
    t_final: f64,
    tol: f64,
) -> Result<SteeringPlan> {
    synthesize_steering_plan_with(y0, f, t_final, tol, SteeringOptions::default())
}

pub fn synthesize_steering_plan_with(
    y0: &ScalarField,
    f: &TargetDensity,
    t_final: f64,
    tol: f64,
    opts: SteeringOptions,
) -> Result<SteeringPlan> {
    if !(t_final > 0.0 && t_final.is_finite()) {
        return Err(Error::Config(format!("final time must be positive (got {t_final})")));
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive (got {tol})")));
    }
    if y0.domain() != f.density().domain() {
        return Err(Error::Config("initial and target densities live on different grids".into()));
    }
    if let Some(cell) = y0.values().iter().position(|v| *v < 0.0) {
        return Err(Error::PositivityLoss { value: y0.values()[cell], cell, floor: 0.0 });
    }
    let (m0, mf) = (y0.mass(), f.density().mass());
    if (m0 - mf).abs() > 1e-8 {
        return Err(Error::MassMismatch { found: m0, expected: mf });
    }

    let epsilon = (0.1 * t_final).min(0.3);
    let prep = epsilon / 3.0;
    let gap = weighted_heat_spectral_gap(f.weight())?;
    let alpha = opts.alpha_factor / gap;
    let mut schedule = GainSchedule::new(alpha, opts.j_max, t_final - epsilon, gap)?;

    let a_min = f.weight().min();
    let start = y0.sub(f.density()).weighted_norm(f.weight());
    schedule.predicted_error = start * schedule.envelope(opts.j_max) / a_min.sqrt();
    let warning = (schedule.predicted_error > tol).then(|| {
        format!(
            "schedule truncated at j = {}: achievable error {:e} exceeds tolerance {tol:e}",
            opts.j_max, schedule.predicted_error
        )
    });

    let mut phases = vec![
        Phase { duration: prep, law: VelocityLaw::Zero },
        Phase { duration: prep, law: VelocityLaw::Stabilize },
        Phase { duration: prep, law: VelocityLaw::Smooth },
    ];
    phases.extend(schedule.intervals());
    let plan = SteeringPlan {
        target: f.clone(),
        t_final,
        epsilon,
        diffusion: opts.diffusion,
        phases,
        schedule: Some(schedule),
        warning,
    };
    plan.validate()?;
    Ok(plan)
}

impl SteeringPlan {
    pub fn validate(&self) -> Result<()> {
        if let Some((i, p)) =
            self.phases.iter().enumerate().find(|(_, p)| !(p.duration > 0.0 && p.duration.is_finite()))
        {
            return Err(Error::Plan(format!("phase {i} has duration {}", p.duration)));
        }
        let total: f64 = crate::linalg::compensated_sum(self.phases.iter().map(|p| p.duration));
        if (total - self.t_final).abs() > 1e-12 * self.t_final.max(1.0) {
            return Err(Error::Plan(format!(
                "phase durations sum to {total}, expected {}",
                self.t_final
            )));
        }
        if !(self.diffusion >= 0.0) {
            return Err(Error::Plan(format!("diffusion {} is negative", self.diffusion)));
        }
        Ok(())
    }

    /// Line-oriented text form; floats use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "t_final {:?}", self.t_final);
        let _ = writeln!(s, "epsilon {:?}", self.epsilon);
        let _ = writeln!(s, "diffusion {:?}", self.diffusion);
        for p in &self.phases {
            let _ = write!(s, "phase {} {:?}", p.law.tag(), p.duration);
            if let VelocityLaw::Gain { alpha, j, gain } = p.law {
                let _ = write!(s, " alpha={alpha:?} j={j} gain={gain:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, target: TargetDensity) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Plan(format!("line {}: {msg}", line + 1));
        let num = |line: usize, s: Option<&str>| -> Result<f64> {
            s.and_then(|t| t.parse::<f64>().ok()).ok_or_else(|| bad(line, "expected a number"))
        };
        let mut t_final = None;
        let mut epsilon = 0.0;
        let mut diffusion = 1.0;
        let mut phases = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            match it.next() {
                Some("t_final") => t_final = Some(num(ln, it.next())?),
                Some("epsilon") => epsilon = num(ln, it.next())?,
                Some("diffusion") => diffusion = num(ln, it.next())?,
                Some("phase") => {
                    let tag = it.next().ok_or_else(|| bad(ln, "missing phase tag"))?;
                    let duration = num(ln, it.next())?;
                    let law = match tag {
                        "zero" => VelocityLaw::Zero,
                        "stabilize" => VelocityLaw::Stabilize,
                        "smooth" => VelocityLaw::Smooth,
                        "gain" => {
                            let (mut alpha, mut j, mut gain) = (None, None, None);
                            for kv in it.by_ref() {
                                match kv.split_once('=') {
                                    Some(("alpha", v)) => alpha = v.parse().ok(),
                                    Some(("j", v)) => j = v.parse().ok(),
                                    Some(("gain", v)) => gain = v.parse().ok(),
                                    _ => return Err(bad(ln, "unknown gain parameter")),
                                }
                            }
                            match (alpha, j, gain) {
                                (Some(alpha), Some(j), Some(gain)) => {
                                    VelocityLaw::Gain { alpha, j, gain }
                                }
                                _ => return Err(bad(ln, "gain phase needs alpha, j and gain")),
                            }
                        }
                        other => return Err(bad(ln, &format!("unknown phase tag {other:?}"))),
                    };
                    phases.push(Phase { duration, law });
                }
                Some(other) => return Err(bad(ln, &format!("unknown key {other:?}"))),
                None => {}
            }
        }
        let plan = SteeringPlan {
            target,
            t_final: t_final.ok_or_else(|| Error::Plan("missing t_final".into()))?,
            epsilon,
            diffusion,
            phases,
            schedule: None,
            warning: None,
        };
        plan.validate()?;
        Ok(plan)
    }
}

/// Outcome of running a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanExecution {
    pub final_state: ScalarField,
    /// L2 distance to the target at the final time.
    pub final_error: f64,
    /// Largest face speed of any velocity applied during the run.
    pub max_velocity: f64,
    /// `(t, state)` at every phase boundary, starting with `t = 0`.
    pub snapshots: Vec<(f64, ScalarField)>,
    /// `a`-weighted error to the target at the end of each phase.
    pub phase_errors: Vec<f64>,
    /// Largest `g |∇(a y)|` seen inside each phase (zero for non-feedback phases).
    pub gain_peaks: Vec<f64>,
    /// Smallest density value seen while a feedback law was active.
    pub min_density: f64,
}

fn feedback_phase(
    y: &mut ScalarField,
    a: &ScalarField,
    gain: f64,
    diffusion: f64,
    duration: f64,
    cfg: &StepperConfig,
    max_v: &mut f64,
    peak: &mut f64,
    min_y: &mut f64,
) -> Result<()> {
    let (n, dt) = cfg.steps_for(y.domain(), duration);
    let one = ScalarField::constant(*a.domain(), 1.0);
    let op = divergence_form_operator(a, &one)?.scaled(gain);
    let stepper = LinearStepper::new(&op, dt, TimeScheme::ImplicitEuler)?;
    for _ in 0..n {
        stepper.step_in_place(y.values_mut());
        let v = feedback_velocity_with(y, a, gain, diffusion)?;
        *max_v = max_v.max(v.max_abs());
        *peak = peak.max(gain_gradient_peak(y, a, gain));
        *min_y = min_y.min(y.min());
    }
    Ok(())
}

/// Runs every phase of `plan` from `y0`.
///
/// Feedback phases are advanced in their closed-loop form (the rescaled
/// weighted-heat flow) and the velocity is reconstructed after each step,
/// which is what the boundedness witness records.
pub fn execute_plan(
    plan: &SteeringPlan,
    y0: &ScalarField,
    cfg: &StepperConfig,
) -> Result<PlanExecution> {
    plan.validate()?;
    cfg.validate()?;
    let f = plan.target.density();
    let a = plan.target.weight();
    let mut y = ScalarField::new(*y0.domain(), y0.values().to_vec())?;
    let mut t = 0.0;
    let mut max_v = 0.0_f64;
    let mut min_y = f64::INFINITY;
    let mut snapshots = vec![(0.0, y.clone())];
    let mut phase_errors = Vec::with_capacity(plan.phases.len());
    let mut gain_peaks = Vec::with_capacity(plan.phases.len());
    for phase in &plan.phases {
        let mut peak = 0.0;
        match phase.law {
            VelocityLaw::Zero | VelocityLaw::Stabilize => {
                let op = match phase.law {
                    VelocityLaw::Zero => advection_diffusion_operator(
                        &FaceField::zeros(*y.domain()),
                        plan.diffusion,
                        AdvectionFlux::ExponentialFitting,
                    )?,
                    _ => {
                        max_v = max_v.max(stabilizing_velocity(&plan.target, plan.diffusion).max_abs());
                        stabilizing_operator(f, plan.diffusion, cfg.advection_flux)?
                    }
                };
                let (n, dt) = cfg.steps_for(y.domain(), phase.duration);
                let stepper = LinearStepper::new(&op, dt, cfg.scheme)?;
                for _ in 0..n {
                    stepper.step_in_place(y.values_mut());
                }
            }
            VelocityLaw::Smooth => feedback_phase(
                &mut y,
                a,
                1.0,
                plan.diffusion,
                phase.duration,
                cfg,
                &mut max_v,
                &mut peak,
                &mut min_y,
            )?,
            VelocityLaw::Gain { gain, .. } => feedback_phase(
                &mut y,
                a,
                gain,
                plan.diffusion,
                phase.duration,
                cfg,
                &mut max_v,
                &mut peak,
                &mut min_y,
            )?,
        }
        if y.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                context: "plan execution",
                detail: format!("non-finite state after {} phase", phase.law.tag()),
            });
        }
        t += phase.duration;
        snapshots.push((t, y.clone()));
        phase_errors.push(y.sub(f).weighted_norm(a));
        gain_peaks.push(peak);
    }
    let final_error = y.sub(f).l2_norm();
    Ok(PlanExecution {
        final_state: y,
        final_error,
        max_velocity: max_v,
        snapshots,
        phase_errors,
        gain_peaks,
        min_density: min_y,
    })
}

/// `(D ∇γ + ∇φ) / γ` with `-Δφ = ∂γ/∂t`, so that `γ` solves the controlled
/// equation `y_t = D Δy - div(v y)`.
pub fn path_following_velocity_with(
    gamma: &ScalarField,
    dgamma_dt: &ScalarField,
    diffusion: f64,
) -> Result<FaceField> {
    check_floor(gamma)?;
    let phi = neumann_poisson_solve(dgamma_dt)?;
    let d = *gamma.domain();
    let (g, ph) = (gamma.values(), phi.values());
    Ok(FaceField::from_faces(d, |axis, p, q| {
        let h = d.spacing(axis);
        (diffusion * (g[q] - g[p]) + (ph[q] - ph[p])) / (h * 0.5 * (g[p] + g[q]))
    }))
}

/// Unit-diffusion form of [`path_following_velocity_with`].
pub fn path_following_velocity(gamma: &ScalarField, dgamma_dt: &ScalarField) -> Result<FaceField> {
    path_following_velocity_with(gamma, dgamma_dt, 1.0)
}

/// Result of tracking a prescribed path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTracking {
    pub final_state: ScalarField,
    /// Largest L2 distance between the state and the path over all steps.
    pub max_error: f64,
    pub max_velocity: f64,
    pub samples: Vec<(f64, f64)>,
}

/// Drives `y0` along `gamma(t)` on `[0, t_final]` with the path-following law.
///
/// The velocity for each implicit step is evaluated at the end of the step,
/// and the advective flux is centered so the law is consistent with its own
/// derivation.
pub fn follow_path(
    y0: &ScalarField,
    gamma: impl Fn(f64) -> ScalarField,
    dgamma_dt: impl Fn(f64) -> ScalarField,
    t_final: f64,
    diffusion: f64,
    cfg: &StepperConfig,
) -> Result<PathTracking> {
    cfg.validate()?;
    let (n, dt) = cfg.steps_for(y0.domain(), t_final);
    let mut y = y0.clone();
    let mut max_error = y.sub(&gamma(0.0)).l2_norm();
    let mut max_v = 0.0_f64;
    let mut samples = vec![(0.0, max_error)];
    for k in 1..=n {
        let t = k as f64 * dt;
        let g = gamma(t);
        let v = path_following_velocity_with(&g, &dgamma_dt(t), diffusion)?;
        max_v = max_v.max(v.max_abs());
        let op = advection_diffusion_operator(&v, diffusion, AdvectionFlux::Centered)?;
        LinearStepper::new(&op, dt, TimeScheme::ImplicitEuler)?.step_in_place(y.values_mut());
        let err = y.sub(&g).l2_norm();
        if !err.is_finite() {
            return Err(Error::Numerical {
                context: "path following",
                detail: format!("non-finite state at t = {t}"),
            });
        }
        max_error = max_error.max(err);
        samples.push((t, err));
    }
    Ok(PathTracking { final_state: y, max_error, max_velocity: max_v, samples })
}

/// Straight-line interpolation `(1 - t/T) g0 + (t/T) g1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPath {
    pub start: ScalarField,
    pub end: ScalarField,
    pub duration: f64,
}

impl LinearPath {
    pub fn at(&self, t: f64) -> ScalarField {
        let s = t / self.duration;
        self.start.zip_map(&self.end, |a, b| (1.0 - s) * a + s * b)
    }

    pub fn rate(&self) -> ScalarField {
        let inv = 1.0 / self.duration;
        self.end.zip_map(&self.start, |b, a| (b - a) * inv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::RectDomain;
    use crate::pde::{evolve_weighted_heat, step_advection_diffusion};
    use std::f64::consts::PI;

    fn unit(n: usize) -> RectDomain {
        RectDomain::unit_interval(n).unwrap()
    }

    fn cosine_target(n: usize) -> TargetDensity {
        TargetDensity::normalized(ScalarField::from_fn(unit(n), |p| 1.0 + 0.3 * (PI * p[0]).cos()))
            .unwrap()
    }

    #[test]
    fn uniform_target_has_zero_velocity() {
        let f = TargetDensity::new(ScalarField::constant(unit(16), 1.0)).unwrap();
        assert_eq!(stabilizing_velocity(&f, 1.0).max_abs(), 0.0);
    }

    #[test]
    fn stabilizing_velocity_matches_log_derivative() {
        let n = 128;
        let d = unit(n);
        let f = ScalarField::from_fn(d, |p| 1.0 + 0.3 * (PI * p[0]).cos());
        let v = log_gradient_velocity(&f, 1.0);
        let h = d.spacing(0);
        let err = (0..n - 1)
            .map(|i| {
                let x = (i + 1) as f64 * h;
                let exact = -0.3 * PI * (PI * x).sin() / (1.0 + 0.3 * (PI * x).cos());
                (v.get(0, i) - exact).abs()
            })
            .fold(0.0, f64::max);
        assert!(err < h * h, "{err:e}");
    }

    #[test]
    fn feedback_at_target_is_log_gradient() {
        let f = cosine_target(64);
        let v = feedback_velocity(f.density(), &f, 3.0, 5).unwrap();
        let w = stabilizing_velocity(&f, 1.0);
        // arithmetic-mean and logarithmic face forms agree to O(h^2)
        let h = f.density().domain().spacing(0);
        for i in 0..v.axis(0).len() {
            assert!((v.get(0, i) - w.get(0, i)).abs() < h * h);
        }
    }

    #[test]
    fn closed_loop_reproduces_weighted_heat() {
        let n = 64;
        let f = cosine_target(n);
        let y = ScalarField::from_fn(unit(n), |p| 1.0 + 0.6 * (3.0 * p[0]).sin()).normalized().unwrap();
        let (gain, dt) = (4.0, 2e-4);
        let (next, v) = closed_loop_step(&y, f.weight(), gain, 1.0, dt).unwrap();
        let cfg = StepperConfig::new(dt).unwrap().with_flux(AdvectionFlux::Centered);
        let open = step_advection_diffusion(&y, &v, 1.0, &cfg).unwrap();
        assert!(open.sub(&next).max_abs() < 1e-12);
        let heat = evolve_weighted_heat(&y, f.weight(), gain, dt, &StepperConfig::new(dt).unwrap())
            .unwrap();
        assert!(heat.sub(&next).max_abs() < 1e-12);
    }

    #[test]
    fn zero_gain_feedback_freezes_density() {
        let n = 32;
        let f = cosine_target(n);
        let y = ScalarField::from_fn(unit(n), |p| 1.0 + 0.5 * p[0]).normalized().unwrap();
        let (next, _) = closed_loop_step(&y, f.weight(), 0.0, 1.0, 1e-2).unwrap();
        assert!(next.sub(&y).max_abs() < 1e-14);
    }

    #[test]
    fn feedback_rejects_vanishing_density() {
        let f = cosine_target(8);
        let mut y = f.density().clone();
        y.values_mut()[2] = 0.0;
        assert!(matches!(
            feedback_velocity(&y, &f, 1.0, 1),
            Err(Error::PositivityLoss { cell: 2, .. })
        ));
    }

    #[test]
    fn plan_text_round_trip() {
        let f = cosine_target(32);
        let y0 = ScalarField::constant(unit(32), 1.0);
        let plan = synthesize_steering_plan(&y0, &f, 1.0, 1e-2).unwrap();
        assert_eq!(plan.phases.len(), 43);
        let back = SteeringPlan::from_text(&plan.to_text(), f).unwrap();
        assert_eq!(back.phases, plan.phases);
        assert_eq!(back.t_final, plan.t_final);
    }

    #[test]
    fn plan_rejects_mass_mismatch() {
        let f = cosine_target(32);
        let y0 = ScalarField::constant(unit(32), 0.5);
        assert!(matches!(
            synthesize_steering_plan(&y0, &f, 1.0, 1e-2),
            Err(Error::MassMismatch { .. })
        ));
    }

    #[test]
    fn bad_durations_fail_validation() {
        let f = TargetDensity::new(ScalarField::constant(unit(8), 1.0)).unwrap();
        let plan = SteeringPlan {
            target: f,
            t_final: 1.0,
            epsilon: 0.0,
            diffusion: 1.0,
            phases: vec![Phase { duration: 0.5, law: VelocityLaw::Zero }],
            schedule: None,
            warning: None,
        };
        assert!(matches!(
            execute_plan(&plan, &ScalarField::constant(unit(8), 1.0), &StepperConfig::default()),
            Err(Error::Plan(_))
        ));
    }

    #[test]
    fn zero_plan_keeps_uniform_density() {
        let f = TargetDensity::new(ScalarField::constant(unit(16), 1.0)).unwrap();
        let plan = SteeringPlan {
            target: f,
            t_final: 0.5,
            epsilon: 0.0,
            diffusion: 1.0,
            phases: vec![Phase { duration: 0.5, law: VelocityLaw::Zero }],
            schedule: None,
            warning: None,
        };
        let y0 = ScalarField::constant(unit(16), 1.0);
        let out = execute_plan(&plan, &y0, &StepperConfig::default()).unwrap();
        assert!(out.final_state.sub(&y0).max_abs() < 1e-14);
        assert_eq!(out.max_velocity, 0.0);
    }

    #[test]
    fn stationary_path_is_held() {
        let f = cosine_target(32);
        let zero = ScalarField::constant(unit(32), 0.0);
        let v = path_following_velocity(f.density(), &zero).unwrap();
        let cfg = StepperConfig::new(1e-2).unwrap().with_flux(AdvectionFlux::Centered);
        let out = step_advection_diffusion(f.density(), &v, 1.0, &cfg).unwrap();
        assert!(out.sub(f.density()).max_abs() < 1e-12);
    }

    #[test]
    fn path_rejects_nonzero_mean_rate() {
        let f = cosine_target(32);
        let one = ScalarField::constant(unit(32), 1.0);
        assert!(matches!(
            path_following_velocity(f.density(), &one),
            Err(Error::Compatibility { .. })
        ));
    }
}
