//! Numerical toolkit for mean-field density control: finite-volume solvers for
//! controlled advection-diffusion(-reaction) equations, continuous-time Markov
//! chain controllability constructions, and particle simulation of the
//! underlying reflected switching diffusions.
//!
//! ```
//! use meanfield_core::grid::{RectDomain, ScalarField};
//! use meanfield_core::pde::{evolve_stabilizing, StepperConfig};
//!
//! # fn main() -> meanfield_core::Result<()> {
//! let d = RectDomain::unit_interval(128)?;
//! let f = ScalarField::from_fn(d, |p| 1.0 + 0.3 * (std::f64::consts::PI * p[0]).cos()).normalized()?;
//! let y0 = ScalarField::constant(d, 1.0);
//! let y = evolve_stabilizing(&y0, &f, 1.0, 2.0, &StepperConfig::new(1e-3)?)?;
//! assert!(y.sub(&f).l2_norm() < 1e-6);
//! # Ok(())
//! # }
//! ```

pub mod control;
pub mod ctmc;
pub mod error;
pub mod grid;
pub mod hsdp;
pub mod linalg;
pub mod particles;
pub mod pde;

pub use error::{Error, Result};
pub use grid::{
    build_grid, divergence_form_operator, face_gradient, neumann_laplacian, neumann_poisson_solve,
    FaceField, RectDomain, ScalarField, SparseOperator,
};
pub use pde::{
    evolve_stabilizing, evolve_weighted_heat, fit_decay_rate, step_advection_diffusion,
    AdvectionFlux, ConvergenceReport, StepperConfig, TimeScheme,
};
pub use control::{
    execute_plan, feedback_velocity, follow_path, path_following_velocity, stabilizing_velocity,
    synthesize_steering_plan, SteeringPlan, TargetDensity,
};
pub use hsdp::{
    coupled_spectrum, execute_hybrid_plan, hybrid_steering_plan, mass_trajectory_consistency,
    split_step, stabilizing_gains, zero_mass_stabilizing_gains, HybridTarget, SpatialGainSet,
    StackedDensity,
};
pub use particles::{EmpiricalDensity, ParticleEnsemble};
