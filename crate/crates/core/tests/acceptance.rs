//! End-to-end acceptance checks. Each check prints one PASS/FAIL line; the
//! process exits nonzero if any check fails.

use std::f64::consts::PI;
use std::time::Instant;

use meanfield_core::control::{execute_plan, follow_path, synthesize_steering_plan, LinearPath, TargetDensity};
use meanfield_core::ctmc::{
    find_covering_closed_walk, global_transfer_plan, local_step_control, monotone_certificate,
    propagate, spectrum_check, PiecewiseConstantControl, TransitionGraph,
};
use meanfield_core::grid::{neumann_laplacian, FaceField, RectDomain, ScalarField};
use meanfield_core::hsdp::{
    block_spectral_abscissa, coupled_generator, coupled_spectrum, mass_trajectory_consistency,
    run_time_invariant, stabilizing_controller, stabilizing_velocities, zero_mass_stabilizing_gains,
    execute_hybrid_plan, hybrid_steering_plan, HybridTarget, StackedDensity,
};
use meanfield_core::particles::{restrict_to_bins, ParticleEnsemble};
use meanfield_core::pde::{
    evolve_stabilizing, evolve_weighted_heat_observed, fit_decay_rate, log_gradient_velocity,
    step_advection_diffusion, StepperConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn line(n: usize) -> RectDomain {
    RectDomain::unit_interval(n).unwrap()
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| floor + rng.random::<f64>()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn random_positive_field(rng: &mut ChaCha8Rng, d: RectDomain, lo: f64, hi: f64) -> ScalarField {
    let modes: Vec<(f64, f64)> = (1..=4).map(|k| (rng.random::<f64>() - 0.5, k as f64)).collect();
    let raw = ScalarField::from_fn(d, |p| modes.iter().map(|(c, k)| c * (k * PI * p[0]).cos()).sum());
    let (mn, mx) = (raw.min(), raw.max());
    raw.map(|v| lo + (hi - lo) * (v - mn) / (mx - mn).max(1e-300))
}

fn mass_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = line(128);
    let y0 = ScalarField::new(d, (0..128).map(|_| rng.random::<f64>()).collect()).unwrap().normalized().unwrap();
    let speeds: Vec<f64> = (0..d.n_faces(0)).map(|_| 10.0 * (rng.random::<f64>() - 0.5)).collect();
    let v = FaceField::from_faces(d, |_, p, _| speeds[p]);
    let cfg = StepperConfig::new(1e-3).unwrap();
    let mut y = y0;
    let mut worst = 0.0_f64;
    for _ in 0..1000 {
        y = step_advection_diffusion(&y, &v, 1.0, &cfg).unwrap();
        worst = worst.max((y.mass() - 1.0).abs());
    }
    outcome(worst <= 1e-12, format!("max |mass - 1| = {worst:.3e}"))
}

fn heat_decay() -> Outcome {
    let d = line(256);
    let y0 = ScalarField::from_fn(d, |p| 1.0 + 0.5 * (PI * p[0]).cos());
    let mean = y0.mean();
    let one = ScalarField::constant(d, 1.0);
    let cfg = StepperConfig::new(1e-3).unwrap();
    let (mut times, mut errs) = (Vec::new(), Vec::new());
    evolve_weighted_heat_observed(&y0, &one, 1.0, 0.5, &cfg, |t, y| {
        times.push(t);
        errs.push(y.map(|v| v - mean).l2_norm());
    })
    .unwrap();
    let fit = fit_decay_rate(&times, &errs).unwrap();
    let dense = neumann_laplacian(d).to_dense();
    let m = -dense;
    let mut eig: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lambda = eig[1];
    let rel = (fit.fitted_rate - lambda).abs() / lambda;
    outcome(rel <= 0.02, format!("fitted {:.6}, eigenvalue {lambda:.6}, rel {rel:.2e}", fit.fitted_rate))
}

fn bound_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = line(64);
    let cfg = StepperConfig::new(1e-4).unwrap();
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..10 {
        let a = random_positive_field(&mut rng, d, 0.5, 2.0);
        let y0 = ScalarField::new(
            d,
            a.values().iter().map(|ai| rng.random::<f64>() / ai).collect(),
        )
        .unwrap();
        evolve_weighted_heat_observed(&y0, &a, 1.0, 500.0 * 1e-4, &cfg, |_, y| {
            let m = y.values().iter().zip(a.values()).map(|(y, a)| y * a).fold(f64::MIN, f64::max);
            worst = worst.max(m);
        })
        .unwrap();
    }
    outcome(worst <= 1.0 + 1e-10, format!("max a*y = {worst:.15}"))
}

fn lower_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = line(64);
    let cfg = StepperConfig::new(1e-4).unwrap();
    let mut margin = f64::INFINITY;
    for _ in 0..10 {
        let c1 = 0.2 + rng.random::<f64>();
        let spread = 3.0 * rng.random::<f64>();
        let a = random_positive_field(&mut rng, d, c1, c1 + spread);
        let c2 = 0.1 + rng.random::<f64>();
        let y0 = random_positive_field(&mut rng, d, c2, c2 + 2.0);
        let bound = c1 * c2 / a.max();
        evolve_weighted_heat_observed(&y0, &a, 1.0, 0.05, &cfg, |_, y| {
            margin = margin.min(y.min() - bound);
        })
        .unwrap();
    }
    outcome(margin >= -1e-10, format!("min(y) - c1 c2/max(a) = {margin:.3e}"))
}

fn ctmc_endpoint() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = TransitionGraph::cycle(4).unwrap();
    let (mut end_err, mut bp_err) = (0.0_f64, 0.0_f64);
    for _ in 0..100 {
        let mu0 = random_simplex(&mut rng, 4, 0.2);
        let rho = 0.5 * mu0.iter().copied().fold(f64::INFINITY, f64::min) - 1e-9;
        let mut dmu: Vec<f64> = (0..4).map(|_| rng.random::<f64>() - 0.5).collect();
        let mean = dmu.iter().sum::<f64>() / 4.0;
        dmu.iter_mut().for_each(|v| *v -= mean);
        let amp = dmu.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let scale = rng.random::<f64>() * 0.999 * rho / 4.0 / amp;
        dmu.iter_mut().for_each(|v| *v *= scale);
        let v0 = rng.random_range(0..4);
        let walk = find_covering_closed_walk(&g, v0).unwrap();
        let (ctrl, cert) = local_step_control(&g, &mu0, &dmu, 1.0, &walk).unwrap();
        let states = propagate(&g, &mu0, &ctrl).unwrap();
        let target: Vec<f64> = mu0.iter().zip(&dmu).map(|(a, b)| a + b).collect();
        let last = states.last().unwrap();
        end_err = end_err.max(last.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        for (i, s) in states.iter().enumerate() {
            let predicted = cert.breakpoint_state(&g, &mu0, i);
            bp_err = bp_err.max(s.iter().zip(&predicted).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    outcome(
        end_err <= 1e-10 && bp_err <= 1e-10,
        format!("endpoint {end_err:.2e}, breakpoints {bp_err:.2e}"),
    )
}

fn random_sc_graph(rng: &mut ChaCha8Rng, n: usize) -> TransitionGraph {
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    for _ in 0..n {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b && !edges.contains(&(a, b)) {
            edges.push((a, b));
        }
    }
    TransitionGraph::new(n, edges).unwrap()
}

fn global_transfer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst, mut rates_ok) = (0.0_f64, true);
    for k in 0..50 {
        let n = if k % 2 == 0 { 4 } else { 6 };
        let g = random_sc_graph(&mut rng, n);
        let mu0 = random_simplex(&mut rng, n, 0.05);
        let mu_t = random_simplex(&mut rng, n, 0.05);
        let plan = global_transfer_plan(&g, &mu0, &mu_t, 1.0).unwrap();
        rates_ok &= plan.control.rates.iter().flatten().all(|r| r.is_finite() && *r >= 0.0);
        let end = propagate(&g, &mu0, &plan.control).unwrap();
        let err = end.last().unwrap().iter().zip(&mu_t).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
    }
    outcome(worst <= 1e-9 && rates_ok, format!("max endpoint error {worst:.2e}, rates valid {rates_ok}"))
}

fn monotone_obstruction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_drop = 0.0_f64;
    for _ in 0..10 {
        let n = rng.random_range(3..7);
        let split = rng.random_range(1..n);
        // every edge between the blocks points from the upper block to the lower one
        let mut edges = Vec::new();
        for a in 0..n {
            for b in 0..n {
                let allowed = a != b && ((a < split) == (b < split) || (a >= split && b < split));
                if allowed && rng.random::<f64>() < 0.6 {
                    edges.push((a, b));
                }
            }
        }
        if !edges.iter().any(|&(a, b)| a >= split && b < split) {
            edges.push((split, 0));
        }
        let g = TransitionGraph::new(n, edges).unwrap();
        let cert = monotone_certificate(&g).unwrap();
        let intervals = 20;
        let ctrl = PiecewiseConstantControl {
            breakpoints: (0..=intervals).map(|i| i as f64 * 0.05).collect(),
            rates: (0..intervals)
                .map(|_| (0..g.n_edges()).map(|_| 5.0 * rng.random::<f64>()).collect())
                .collect(),
        };
        let mu0 = random_simplex(&mut rng, n, 0.0);
        let states = propagate(&g, &mu0, &ctrl).unwrap();
        for w in states.windows(2) {
            worst_drop = worst_drop.max(cert.phi(&w[0]) - cert.phi(&w[1]));
        }
    }
    outcome(worst_drop <= 1e-12, format!("largest decrease of phi {worst_drop:.2e}"))
}

fn scalar_steering() -> Outcome {
    let d = line(256);
    let y0 = ScalarField::from_fn(d, |p| (-(p[0] - 0.3).powi(2) / (2.0 * 0.03_f64.powi(2))).exp())
        .normalized()
        .unwrap();
    let f = TargetDensity::normalized(ScalarField::from_fn(d, |p| 1.0 + 0.3 * (2.0 * PI * p[0]).sin() + 0.7)).unwrap();
    let plan = synthesize_steering_plan(&y0, &f, 1.0, 1e-2).unwrap();
    let run = execute_plan(&plan, &y0, &StepperConfig::default()).unwrap();
    let j = plan.schedule.as_ref().map(|s| s.j_max).unwrap_or(0);
    outcome(
        run.final_error <= 1e-2 && run.max_velocity.is_finite(),
        format!("J = {j}, final L2 error {:.3e}, max |v| {:.3e}", run.final_error, run.max_velocity),
    )
}

fn path_following() -> Outcome {
    let d = line(256);
    let path = LinearPath {
        start: ScalarField::from_fn(d, |p| 1.0 + 0.5 * (PI * p[0]).cos()).normalized().unwrap(),
        end: ScalarField::from_fn(d, |p| 0.3 + p[0] * p[0]).normalized().unwrap(),
        duration: 1.0,
    };
    let run = follow_path(&path.at(0.0), |t| path.at(t), |_| path.rate(), 1.0, 1.0, &StepperConfig::default()).unwrap();
    outcome(
        run.max_error <= 1e-3,
        format!("sup L2 tracking error {:.3e}, max |v| {:.3e}", run.max_error, run.max_velocity),
    )
}

fn split_consistency() -> Outcome {
    let d = line(64);
    let g = TransitionGraph::bidirected_path(2).unwrap();
    let y0 = StackedDensity::new(vec![
        ScalarField::from_fn(d, |p| 1.0 + 0.5 * (PI * p[0]).cos()).normalized_to(0.8).unwrap(),
        ScalarField::constant(d, 0.2),
    ])
    .unwrap();
    let zero = vec![FaceField::zeros(d), FaceField::zeros(d)];
    let rates = [1.0, 0.5];
    let coarse = mass_trajectory_consistency(&y0, &rates, &g, &zero, &[1.0, 0.5], 0.02, 1.0).unwrap();
    let fine = mass_trajectory_consistency(&y0, &rates, &g, &zero, &[1.0, 0.5], 0.01, 1.0).unwrap();
    let ratio = coarse.max_deviation / fine.max_deviation;
    outcome(
        (3.5..=4.5).contains(&ratio),
        format!(
            "deviation {:.3e} at dt, {:.3e} at dt/2, ratio {ratio:.3}",
            coarse.max_deviation, fine.max_deviation
        ),
    )
}

fn two_state_target(d: RectDomain) -> HybridTarget {
    HybridTarget::new(vec![
        ScalarField::from_fn(d, |p| 1.0 + 0.4 * (PI * p[0]).cos()).normalized_to(0.4).unwrap(),
        ScalarField::from_fn(d, |p| 0.6 + p[0] * (1.0 - p[0])).normalized_to(0.6).unwrap(),
    ])
    .unwrap()
}

fn spectral_certificates() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_a = f64::NEG_INFINITY;
    for _ in 0..100 {
        let n = rng.random_range(2..=8);
        let mut edges = Vec::new();
        for a in 0..n {
            for b in 0..n {
                if a != b && rng.random::<f64>() < 0.4 {
                    edges.push((a, b));
                }
            }
        }
        let g = TransitionGraph::new(n, edges).unwrap();
        let rates: Vec<f64> = (0..g.n_edges())
            .map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { 10.0 * rng.random::<f64>() })
            .collect();
        worst_a = worst_a.max(spectrum_check(&g, &rates).unwrap().max_real);
    }
    let d = line(128);
    let target = two_state_target(d);
    let g = TransitionGraph::bidirected_path(2).unwrap();
    let diffusion = [1.0, 0.5];
    let c = stabilizing_controller(&target, &g, &diffusion).unwrap();
    let s = coupled_spectrum(&c.velocities, &diffusion, &c.gains).unwrap();
    let stacked: Vec<f64> = target.densities().iter().flat_map(|f| f.values().iter().copied()).collect();
    let kernel_err = s.kernel.iter().zip(&stacked).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let pass = worst_a <= 1e-10 && s.report.max_real <= 1e-8 && s.report.zero_multiplicity == 1 && kernel_err <= 1e-8;
    outcome(
        pass,
        format!(
            "(a) max Re {worst_a:.2e}; (b) max Re {:.2e}, zero multiplicity {}, kernel error {kernel_err:.2e}, gap {:.4}",
            s.report.max_real, s.report.zero_multiplicity, s.report.gap
        ),
    )
}

fn hybrid_stabilization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d = line(64);
    let target = two_state_target(d);
    let g = TransitionGraph::bidirected_path(2).unwrap();
    let diffusion = [1.0, 0.5];
    let c = stabilizing_controller(&target, &g, &diffusion).unwrap();
    let cfg = StepperConfig::default();
    let (mut worst_err, mut min_rate) = (0.0_f64, f64::INFINITY);
    for _ in 0..5 {
        let mu = random_simplex(&mut rng, 2, 0.1);
        let y0 = StackedDensity::new(
            (0..2)
                .map(|i| random_positive_field(&mut rng, d, 0.1, 2.0).normalized_to(mu[i]).unwrap())
                .collect(),
        )
        .unwrap();
        let run = run_time_invariant(&y0, &c.velocities, &diffusion, &c.gains, 20.0, &cfg, 200, Some(target.densities())).unwrap();
        let keep: Vec<usize> = (0..run.errors.len()).filter(|&k| run.errors[k] > 1e-11).collect();
        let t: Vec<f64> = keep.iter().map(|&k| run.times[k]).collect();
        let e: Vec<f64> = keep.iter().map(|&k| run.errors[k]).collect();
        min_rate = min_rate.min(fit_decay_rate(&t, &e).unwrap().fitted_rate);
        worst_err = worst_err.max(*run.errors.last().unwrap());
    }
    outcome(
        min_rate > 0.0 && worst_err <= 1e-6,
        format!("smallest fitted rate {min_rate:.4}, worst ||Y(20) - f|| {worst_err:.2e}"),
    )
}

fn zero_mass_stabilization() -> Outcome {
    let d = line(64);
    let g = TransitionGraph::new(3, vec![(0, 1), (1, 0), (1, 2), (2, 0)]).unwrap();
    let target = HybridTarget::new(vec![
        ScalarField::from_fn(d, |p| 1.0 + 0.4 * (PI * p[0]).cos()).normalized_to(0.5).unwrap(),
        ScalarField::from_fn(d, |p| 0.5 + p[0]).normalized_to(0.5).unwrap(),
        ScalarField::constant(d, 0.0),
    ])
    .unwrap();
    let diffusion = [1.0, 1.0, 0.5];
    let z = zero_mass_stabilizing_gains(&target, &g).unwrap();
    let v = stabilizing_velocities(&target, &diffusion);
    let y0 = StackedDensity::new(vec![
        ScalarField::constant(d, 0.2),
        ScalarField::constant(d, 0.3),
        ScalarField::from_fn(d, |p| 1.0 + (3.0 * p[0]).sin()).normalized_to(0.5).unwrap(),
    ])
    .unwrap();
    let run = run_time_invariant(&y0, &v, &diffusion, &z.gains, 5.0, &StepperConfig::default(), 100, None).unwrap();
    let m3: Vec<f64> = run.masses.iter().map(|m| m[2]).collect();
    let fit = fit_decay_rate(&run.times, &m3).unwrap();
    let w = coupled_generator(&v, &diffusion, &z.gains).unwrap();
    let bound = -block_spectral_abscissa(&w, &[2], d.n_cells());
    let rel = (fit.fitted_rate - bound).abs() / bound;
    outcome(rel <= 0.1, format!("fitted {:.6}, block bound {bound:.6}, rel {rel:.2e}", fit.fitted_rate))
}

fn hybrid_steering() -> Outcome {
    let d = line(128);
    let target = two_state_target(d);
    let g = TransitionGraph::bidirected_path(2).unwrap();
    let y0 = StackedDensity::new(vec![
        ScalarField::from_fn(d, |p| (-(p[0] - 0.7).powi(2) / 0.01).exp()).normalized().unwrap(),
        ScalarField::constant(d, 0.0),
    ])
    .unwrap();
    let diffusion = [1.0, 0.5];
    let plan = hybrid_steering_plan(&y0, &target, &g, &diffusion, 2.0, 1e-2).unwrap();
    let run = execute_hybrid_plan(&plan, &y0, &StepperConfig::default()).unwrap();
    let worst = run.state_errors.iter().copied().fold(0.0, f64::max);
    outcome(
        worst <= 1e-2,
        format!(
            "per-state L2 errors {:?}, max rate {:.3e}, max |v| {:.3e}",
            run.state_errors.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>(),
            run.max_rate,
            run.max_velocity
        ),
    )
}

fn particle_agreement() -> Outcome {
    let d = line(128);
    let bins = line(32);
    let f = ScalarField::from_fn(d, |p| 1.0 + 0.6 * (PI * p[0]).cos()).normalized().unwrap();
    let y0 = ScalarField::from_fn(d, |p| 1.0 + 0.8 * (2.0 * PI * p[0]).sin() + p[0]).normalized().unwrap();
    let cfg = StepperConfig::new(1e-3).unwrap();
    let pde = evolve_stabilizing(&y0, &f, 1.0, 1.0, &cfg).unwrap();
    let pde_bins = restrict_to_bins(&pde, &bins).unwrap();

    let g = TransitionGraph::new(1, vec![]).unwrap();
    let gains = meanfield_core::hsdp::SpatialGainSet::zero(&g, d);
    let v = vec![log_gradient_velocity(&f, 1.0)];
    let simulate = || {
        let start = StackedDensity::new(vec![y0.clone()]).unwrap();
        let mut ens = ParticleEnsemble::sample(&start, 100_000, 2024).unwrap();
        for _ in 0..1000 {
            ens.sde_step(&v, &[1.0], &gains, 1e-3).unwrap();
        }
        ens
    };
    let a = simulate();
    let b = simulate();
    let identical = a.to_csv() == b.to_csv();
    let l1 = a.empirical_density(&bins).unwrap().l1_distance(&[pde_bins]);
    outcome(l1 <= 0.05 && identical, format!("L1 distance {l1:.4}, identical reruns {identical}"))
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 15] = [
        ("mass conservation", mass_conservation),
        ("heat decay rate", heat_decay),
        ("upper bound invariance", bound_invariance),
        ("lower bound preservation", lower_bound),
        ("ctmc local step exactness", ctmc_endpoint),
        ("ctmc global transfer", global_transfer),
        ("monotone obstruction", monotone_obstruction),
        ("scalar steering", scalar_steering),
        ("path following", path_following),
        ("split mass consistency", split_consistency),
        ("spectral certificates", spectral_certificates),
        ("hybrid stabilization", hybrid_stabilization),
        ("zero-mass stabilization", zero_mass_stabilization),
        ("hybrid steering", hybrid_steering),
        ("particle agreement", particle_agreement),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (k, (name, check)) in checks.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {status} {name} ({:.1} s): {}", k + 1, start.elapsed().as_secs_f64(), o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} checks failed", failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
