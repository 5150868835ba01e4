//! Monte Carlo simulation of the reflected switching diffusion.
//!
//! Each particle owns a ChaCha8 stream keyed by the run seed and its index, so
//! trajectories do not depend on thread scheduling.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{FaceField, RectDomain, ScalarField};
use crate::hsdp::{SpatialGainSet, StackedDensity};

/// Upper bound on `max exit rate · dt`.
pub const MAX_SWITCH_PROBABILITY: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    domain: RectDomain,
    n_states: usize,
    seed: u64,
    positions: Vec<[f64; 2]>,
    states: Vec<usize>,
    rngs: Vec<ChaCha8Rng>,
}

fn particle_rng(seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    rng
}

impl ParticleEnsemble {
    /// Particles at given positions and 0-based states.
    pub fn from_particles(
        domain: RectDomain,
        n_states: usize,
        positions: Vec<[f64; 2]>,
        states: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        if positions.len() != states.len() {
            return Err(Error::Config("positions and states differ in length".into()));
        }
        if let Some(k) = states.iter().position(|&s| s >= n_states) {
            return Err(Error::Config(format!("particle {k} has state {} of {n_states}", states[k])));
        }
        if let Some(k) = positions.iter().position(|p| !domain.contains(*p)) {
            return Err(Error::Config(format!("particle {k} lies outside the domain")));
        }
        let rngs = (0..positions.len()).map(|id| particle_rng(seed, id)).collect();
        Ok(Self { domain, n_states, seed, positions, states, rngs })
    }

    /// Draws `n` particles from a stacked density: a `(state, cell)` pair by
    /// inverse CDF, then a uniform point in the cell.
    pub fn sample(density: &StackedDensity, n: usize, seed: u64) -> Result<Self> {
        let domain = *density.domain();
        let vol = domain.cell_volume();
        let mut cdf = Vec::with_capacity(density.n_states() * domain.n_cells());
        let mut acc = 0.0;
        for s in density.states() {
            for &v in s.values() {
                if !(v >= 0.0) {
                    return Err(Error::Config("sampling density must be nonnegative".into()));
                }
                acc += v * vol;
                cdf.push(acc);
            }
        }
        if !(acc > 0.0) {
            return Err(Error::Config("sampling density has no mass".into()));
        }
        let cells = domain.n_cells();
        let spacing = domain.spacings();
        let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|id| particle_rng(seed, id)).collect();
        let drawn: Vec<([f64; 2], usize)> = rngs
            .par_iter_mut()
            .map(|rng| {
                let u: f64 = rng.random::<f64>() * acc;
                let k = cdf.partition_point(|c| *c <= u).min(cdf.len() - 1);
                let (state, cell) = (k / cells, k % cells);
                let center = domain.center(cell);
                let mut p = [0.0; 2];
                for axis in 0..domain.dim() {
                    p[axis] = center[axis] + (rng.random::<f64>() - 0.5) * spacing[axis];
                }
                (p, state)
            })
            .collect();
        let (positions, states) = drawn.into_iter().unzip();
        Ok(Self { domain, n_states: density.n_states(), seed, positions, states, rngs })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn domain(&self) -> &RectDomain {
        &self.domain
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    /// Fraction of particles in each state.
    pub fn occupancy(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.n_states];
        self.states.iter().for_each(|&s| counts[s] += 1);
        counts.iter().map(|&c| c as f64 / self.len() as f64).collect()
    }

    /// Euler-Maruyama step with mirror reflection, followed by at most one
    /// state switch per particle using rates evaluated at the new position.
    pub fn sde_step(
        &mut self,
        velocities: &[FaceField],
        diffusion: &[f64],
        gains: &SpatialGainSet,
        dt: f64,
    ) -> Result<()> {
        if velocities.len() != self.n_states || diffusion.len() != self.n_states {
            return Err(Error::Config("one velocity and diffusion per state expected".into()));
        }
        if gains.graph().n_vertices() != self.n_states || gains.domain() != &self.domain {
            return Err(Error::Config("gains do not match the ensemble".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::Config(format!("time step must be positive (got {dt})")));
        }
        let product = gains.max_exit_rate() * dt;
        if product > MAX_SWITCH_PROBABILITY {
            return Err(Error::StepSize { dt, product, limit: MAX_SWITCH_PROBABILITY });
        }
        let domain = self.domain;
        let graph = gains.graph();
        let out_edges: Vec<Vec<usize>> = (0..self.n_states).map(|v| graph.out_edges(v).collect()).collect();
        let noise: Vec<f64> = diffusion.iter().map(|d| (2.0 * d * dt).sqrt()).collect();

        self.positions
            .par_iter_mut()
            .zip(self.states.par_iter_mut())
            .zip(self.rngs.par_iter_mut())
            .for_each(|((p, s), rng)| {
                let v = interpolate_velocity(&velocities[*s], *p);
                for axis in 0..domain.dim() {
                    let xi: f64 = rng.sample(StandardNormal);
                    p[axis] += v[axis] * dt + noise[*s] * xi;
                }
                reflect(&domain, p);
                let cell = domain.locate(*p);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for &e in &out_edges[*s] {
                    acc += -(-gains.edge_gain(e)[cell] * dt).exp_m1();
                    if u < acc {
                        *s = graph.edge(e).1;
                        break;
                    }
                }
            });
        Ok(())
    }

    /// Histogram per state, normalized by particle count and cell volume.
    pub fn empirical_density(&self, domain: &RectDomain) -> Result<EmpiricalDensity> {
        let cells = domain.n_cells();
        let mut counts = vec![0usize; self.n_states * cells];
        for (p, &s) in self.positions.iter().zip(&self.states) {
            if !domain.contains(*p) {
                return Err(Error::Config(format!("particle at {p:?} lies outside the histogram grid")));
            }
            let c = domain.locate(*p);
            counts[s * cells + c] += 1;
        }
        let scale = 1.0 / (self.len() as f64 * domain.cell_volume());
        let states = (0..self.n_states)
            .map(|s| {
                let v = counts[s * cells..(s + 1) * cells].iter().map(|&c| c as f64 * scale).collect();
                ScalarField::new(*domain, v)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EmpiricalDensity { density: StackedDensity::new(states)?, n_particles: self.len() })
    }

    /// `id,state,x[,y]` with 1-based states.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(if self.domain.dim() == 1 { "id,state,x\n" } else { "id,state,x,y\n" });
        for (id, (p, s)) in self.positions.iter().zip(&self.states).enumerate() {
            let _ = write!(out, "{id},{},{:?}", s + 1, p[0]);
            if self.domain.dim() == 2 {
                let _ = write!(out, ",{:?}", p[1]);
            }
            out.push('\n');
        }
        out
    }
}

/// Linear interpolation between the two faces of the containing cell along
/// each axis; boundary faces carry zero velocity.
pub fn interpolate_velocity(v: &FaceField, p: [f64; 2]) -> [f64; 2] {
    let d = v.domain();
    let cell = d.locate(p);
    let center = d.center(cell);
    let mut out = [0.0; 2];
    for axis in 0..d.dim() {
        let h = d.spacing(axis);
        let lo = d.lower_face(axis, cell).map_or(0.0, |f| v.axis(axis)[f]);
        let hi = d.upper_face(axis, cell).map_or(0.0, |f| v.axis(axis)[f]);
        let s = ((p[axis] - center[axis]) / h + 0.5).clamp(0.0, 1.0);
        out[axis] = (1.0 - s) * lo + s * hi;
    }
    out
}

/// Coordinatewise mirroring into `[0, L]`, repeated until inside.
pub fn reflect(domain: &RectDomain, p: &mut [f64; 2]) {
    for axis in 0..domain.dim() {
        let l = domain.lengths()[axis];
        let mut x = p[axis];
        while x < 0.0 || x > l {
            x = if x < 0.0 { -x } else { 2.0 * l - x };
        }
        p[axis] = x;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDensity {
    pub density: StackedDensity,
    pub n_particles: usize,
}

impl EmpiricalDensity {
    /// `Σ_i ∫ |y_i - z_i|` over the histogram grid.
    pub fn l1_distance(&self, other: &[ScalarField]) -> f64 {
        let vol = self.density.domain().cell_volume();
        self.density
            .states()
            .iter()
            .zip(other)
            .map(|(a, b)| a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).sum::<f64>())
            .sum::<f64>()
            * vol
    }
}

/// Cell averages of `density` on the coarser `bins` grid, which must divide it.
pub fn restrict_to_bins(density: &ScalarField, bins: &RectDomain) -> Result<ScalarField> {
    let fine = density.domain();
    let cf = fine.cells();
    let cb = bins.cells();
    if fine.dim() != bins.dim() || (0..fine.dim()).any(|a| cf[a] % cb[a] != 0) || fine.lengths() != bins.lengths() {
        return Err(Error::Config("bin grid must coarsen the density grid".into()));
    }
    let mut out = vec![0.0; bins.n_cells()];
    let ratio = fine.cell_volume() / bins.cell_volume();
    for (k, &v) in density.values().iter().enumerate() {
        let c = fine.cell_coords(k);
        let j = if fine.dim() == 2 { c.1 * cb[1] / cf[1] } else { 0 };
        let b = bins.cell_index(c.0 * cb[0] / cf[0], j);
        out[b] += v * ratio;
    }
    ScalarField::new(*bins, out)
}
