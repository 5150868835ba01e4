//! Time integration of the scalar forward equation and of the weighted-heat
//! and stabilizing flows.

use crate::error::{Error, Result};
use crate::grid::{
    divergence_form_operator, Assembler, FaceField, OperatorSource, RectDomain, ScalarField,
    SparseOperator,
};
use crate::linalg::{compensated_sum, BandedLu};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeScheme {
    #[default]
    ImplicitEuler,
    CrankNicolson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdvectionFlux {
    /// Scharfetter-Gummel flux; Gibbs-type equilibria are exact steady states.
    #[default]
    ExponentialFitting,
    Centered,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepperConfig {
    pub dt: f64,
    pub scheme: TimeScheme,
    pub advection_flux: AdvectionFlux,
}

impl Default for StepperConfig {
    fn default() -> Self {
        Self { dt: 1e-3, scheme: TimeScheme::default(), advection_flux: AdvectionFlux::default() }
    }
}

impl StepperConfig {
    pub fn new(dt: f64) -> Result<Self> {
        let cfg = Self { dt, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_scheme(mut self, scheme: TimeScheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_flux(mut self, flux: AdvectionFlux) -> Self {
        self.advection_flux = flux;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config(format!("time step must be positive (got {})", self.dt)));
        }
        Ok(())
    }

    /// Uniform step count and step size covering `duration`, with the step
    /// capped at `min(dt, h^2)`.
    pub fn steps_for(&self, domain: &RectDomain, duration: f64) -> (usize, f64) {
        if duration <= 0.0 {
            return (0, 0.0);
        }
        let cap = self.dt.min(domain.min_spacing_sq());
        let n = ((duration / cap) - 1e-9).ceil().max(1.0) as usize;
        (n, duration / n as f64)
    }
}

/// `B(z) = z / (e^z - 1)`, continuous at zero.
pub fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-5 {
        1.0 - z / 2.0 + z * z / 12.0
    } else {
        z / z.exp_m1()
    }
}

/// Assembles the generator of `y_t = D Δy - div(v y)` with zero-flux walls.
pub fn advection_diffusion_operator(
    v: &FaceField,
    diffusion: f64,
    flux: AdvectionFlux,
) -> Result<SparseOperator> {
    if !(diffusion.is_finite() && diffusion >= 0.0) {
        return Err(Error::Config(format!("diffusion must be nonnegative (got {diffusion})")));
    }
    if !v.is_finite() {
        return Err(Error::Numerical {
            context: "advection-diffusion assembly",
            detail: "velocity field has non-finite entries".into(),
        });
    }
    let d = *v.domain();
    let mut asm = Assembler::new(d.n_cells());
    for (axis, face, p, q) in d.faces() {
        let h = d.spacing(axis);
        let vel = v.get(axis, face);
        // net flux p -> q is (cp * y_p - cq * y_q) / h
        let (cp, cq) = if diffusion == 0.0 {
            (vel.max(0.0), (-vel).max(0.0))
        } else {
            match flux {
                AdvectionFlux::ExponentialFitting => {
                    let peclet = vel * h / diffusion;
                    let k = diffusion / h;
                    (k * bernoulli(-peclet), k * bernoulli(peclet))
                }
                AdvectionFlux::Centered => {
                    let k = diffusion / h;
                    (k + 0.5 * vel, k - 0.5 * vel)
                }
            }
        };
        asm.add(p, p, -cp / h);
        asm.add(p, q, cq / h);
        asm.add(q, p, cp / h);
        asm.add(q, q, -cq / h);
    }
    Ok(asm.finish(d, OperatorSource::AdvectionDiffusion { diffusion }))
}

/// Pre-factored one-step map for a fixed linear generator.
#[derive(Debug, Clone)]
pub struct LinearStepper {
    lu: BandedLu,
    explicit: Option<SparseOperator>,
    dt: f64,
}

impl LinearStepper {
    pub fn new(op: &SparseOperator, dt: f64, scheme: TimeScheme) -> Result<Self> {
        match scheme {
            TimeScheme::ImplicitEuler => {
                Ok(Self { lu: op.implicit_step_factor(dt)?, explicit: None, dt })
            }
            TimeScheme::CrankNicolson => Ok(Self {
                lu: op.implicit_step_factor(0.5 * dt)?,
                explicit: Some(op.scaled(0.5 * dt)),
                dt,
            }),
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn step_in_place(&self, y: &mut [f64]) {
        if let Some(half) = &self.explicit {
            let ly = half.apply(y);
            y.iter_mut().zip(ly).for_each(|(a, b)| *a += b);
        }
        self.lu.solve_in_place(y);
    }
}

fn check_mass(before: f64, scale: f64, after: f64) -> Result<()> {
    if (after - before).abs() > 1e-10 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Numerical {
            context: "advection-diffusion step",
            detail: format!("mass drifted from {before:e} to {after:e}"),
        });
    }
    Ok(())
}

/// One step of size `cfg.dt` of `y_t = D Δy - div(v y)`.
pub fn step_advection_diffusion(
    y: &ScalarField,
    v: &FaceField,
    diffusion: f64,
    cfg: &StepperConfig,
) -> Result<ScalarField> {
    cfg.validate()?;
    let op = advection_diffusion_operator(v, diffusion, cfg.advection_flux)?;
    let stepper = LinearStepper::new(&op, cfg.dt, cfg.scheme)?;
    let mut out = y.values().to_vec();
    stepper.step_in_place(&mut out);
    let out = ScalarField::new(*y.domain(), out)?;
    check_mass(y.mass(), y.l1_norm(), out.mass())?;
    Ok(out)
}

/// Runs a fixed generator for `duration`, calling `observe(t, y)` after every step.
pub fn evolve_linear(
    y: &ScalarField,
    op: &SparseOperator,
    duration: f64,
    cfg: &StepperConfig,
    mut observe: impl FnMut(f64, &ScalarField),
) -> Result<ScalarField> {
    cfg.validate()?;
    let (n, dt) = cfg.steps_for(y.domain(), duration);
    if n == 0 {
        return Ok(y.clone());
    }
    let stepper = LinearStepper::new(op, dt, cfg.scheme)?;
    let mut cur = y.clone();
    for k in 1..=n {
        stepper.step_in_place(cur.values_mut());
        observe(k as f64 * dt, &cur);
    }
    ScalarField::new(*y.domain(), cur.into_values())
}

/// `D (ln f_q - ln f_p) / h` on each face: the discrete form of `D ∇f / f`.
pub fn log_gradient_velocity(f: &ScalarField, diffusion: f64) -> FaceField {
    let d = *f.domain();
    let lf: Vec<f64> = f.values().iter().map(|v| v.ln()).collect();
    FaceField::from_faces(d, |axis, p, q| diffusion * (lf[q] - lf[p]) / d.spacing(axis))
}

/// Flow of `y_t = β Δ(a y)` for `duration`.
pub fn evolve_weighted_heat(
    y: &ScalarField,
    a: &ScalarField,
    beta: f64,
    duration: f64,
    cfg: &StepperConfig,
) -> Result<ScalarField> {
    evolve_weighted_heat_observed(y, a, beta, duration, cfg, |_, _| {})
}

pub fn evolve_weighted_heat_observed(
    y: &ScalarField,
    a: &ScalarField,
    beta: f64,
    duration: f64,
    cfg: &StepperConfig,
    observe: impl FnMut(f64, &ScalarField),
) -> Result<ScalarField> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::Config(format!("gain must be nonnegative (got {beta})")));
    }
    let one = ScalarField::constant(*a.domain(), 1.0);
    let op = divergence_form_operator(a, &one)?;
    if beta == 0.0 {
        return Ok(y.clone());
    }
    evolve_linear(y, &op.scaled(beta), duration, cfg, observe)
}

/// Generator of the stabilizing flow `y_t = D div(f ∇(y/f))`, in advective form.
pub fn stabilizing_operator(
    f: &ScalarField,
    diffusion: f64,
    flux: AdvectionFlux,
) -> Result<SparseOperator> {
    if let Some(cell) = f.values().iter().position(|v| !(*v > 0.0)) {
        return Err(Error::Target(format!(
            "target must be strictly positive (value {:e} at cell {cell})",
            f.values()[cell]
        )));
    }
    advection_diffusion_operator(&log_gradient_velocity(f, diffusion), diffusion, flux)
}

pub fn evolve_stabilizing(
    y: &ScalarField,
    f: &ScalarField,
    diffusion: f64,
    duration: f64,
    cfg: &StepperConfig,
) -> Result<ScalarField> {
    evolve_stabilizing_observed(y, f, diffusion, duration, cfg, |_, _| {})
}

pub fn evolve_stabilizing_observed(
    y: &ScalarField,
    f: &ScalarField,
    diffusion: f64,
    duration: f64,
    cfg: &StepperConfig,
    observe: impl FnMut(f64, &ScalarField),
) -> Result<ScalarField> {
    let op = stabilizing_operator(f, diffusion, cfg.advection_flux)?;
    let (my, mf) = (y.mass(), f.mass());
    if (my - mf).abs() > 1e-10 * mf.abs().max(1.0) {
        return Err(Error::MassMismatch { found: my, expected: mf });
    }
    evolve_linear(y, &op, duration, cfg, observe)
}

/// Smallest nonzero eigenvalue of `-div ∇(a ·)` on the grid.
///
/// Inverse iteration on zero-mass vectors, using the `a`-weighted inner
/// product in which the operator is self-adjoint.
pub fn weighted_heat_spectral_gap(a: &ScalarField) -> Result<f64> {
    let one = ScalarField::constant(*a.domain(), 1.0);
    let op = divergence_form_operator(a, &one)?;
    let n = op.dim();
    let av = a.values();
    let mut band = op.shifted_band(0.0, -1.0);
    band.set_row_identity(0);
    let lu = band.factor()?;

    let kernel_mass: f64 = compensated_sum(av.iter().map(|v| 1.0 / v));
    let project = |x: &mut Vec<f64>| {
        let m = compensated_sum(x.iter().copied()) / kernel_mass;
        x.iter_mut().zip(av).for_each(|(v, ai)| *v -= m / ai);
    };
    let anorm = |x: &[f64]| compensated_sum(x.iter().zip(av).map(|(v, ai)| ai * v * v)).sqrt();

    // deterministic start with components along every low mode
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let s = i as f64 + 0.5;
            (0.37 * s).sin() + 0.5 * (0.011 * s).cos() + 0.25 * (0.73 * s).sin()
        })
        .collect();
    project(&mut x);
    let nrm = anorm(&x);
    x.iter_mut().for_each(|v| *v /= nrm);

    let mut lambda = f64::NAN;
    for _ in 0..500 {
        let mut z = x.clone();
        z[0] = 0.0;
        lu.solve_in_place(&mut z);
        project(&mut z);
        let nz = anorm(&z);
        if !(nz.is_finite() && nz > 0.0) {
            break;
        }
        z.iter_mut().for_each(|v| *v /= nz);
        let lz = op.apply(&z);
        let rq = -compensated_sum(z.iter().zip(&lz).zip(av).map(|((u, l), ai)| ai * u * l));
        let done = (rq - lambda).abs() <= 1e-13 * rq.abs();
        lambda = rq;
        x = z;
        if done {
            return Ok(lambda);
        }
    }
    if lambda.is_finite() && lambda > 0.0 {
        Ok(lambda)
    } else {
        Err(Error::Numerical {
            context: "spectral gap",
            detail: "inverse iteration did not converge".into(),
        })
    }
}

/// Log-linear fit `error ≈ M0 exp(-λ t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    /// Fitted λ; negative when the series grows.
    pub fitted_rate: f64,
    pub prefactor: f64,
    pub residuals: Vec<f64>,
    pub rms_residual: f64,
}

pub fn fit_decay_rate(times: &[f64], errors: &[f64]) -> Result<ConvergenceReport> {
    if times.len() != errors.len() {
        return Err(Error::Fit(format!("{} times but {} errors", times.len(), errors.len())));
    }
    if times.len() < 3 {
        return Err(Error::Fit(format!("need at least 3 samples, got {}", times.len())));
    }
    if let Some(i) = errors.iter().position(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(Error::Fit(format!("error sample {i} is not positive ({})", errors[i])));
    }
    let n = times.len() as f64;
    let logs: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let tm = times.iter().sum::<f64>() / n;
    let lm = logs.iter().sum::<f64>() / n;
    let stt: f64 = times.iter().map(|t| (t - tm).powi(2)).sum();
    if !(stt > 0.0) {
        return Err(Error::Fit("sample times are all equal".into()));
    }
    let stl: f64 = times.iter().zip(&logs).map(|(t, l)| (t - tm) * (l - lm)).sum();
    let slope = stl / stt;
    let intercept = lm - slope * tm;
    let residuals: Vec<f64> =
        times.iter().zip(&logs).map(|(t, l)| l - (intercept + slope * t)).collect();
    let rms_residual = (residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt();
    Ok(ConvergenceReport {
        fitted_rate: if slope == 0.0 { 0.0 } else { -slope },
        prefactor: intercept.exp(),
        residuals,
        rms_residual,
    })
}
