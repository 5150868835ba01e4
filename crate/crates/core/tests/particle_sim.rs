use std::f64::consts::PI;

use meanfield_core::ctmc::{rate_matrix, TransitionGraph};
use meanfield_core::grid::{FaceField, RectDomain, ScalarField};
use meanfield_core::hsdp::{SpatialGainSet, StackedDensity};
use meanfield_core::linalg::expm;
use meanfield_core::particles::ParticleEnsemble;
use nalgebra::DVector;
use proptest::prelude::*;

fn line(n: usize) -> RectDomain {
    RectDomain::unit_interval(n).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn particles_stay_in_the_domain(
        seed in any::<u64>(),
        speed in -40.0f64..40.0,
        diffusion in 0.0f64..5.0,
        dt in 1e-4f64..0.05,
        two_d in any::<bool>(),
    ) {
        let d = if two_d {
            RectDomain::new(&[1.0, 0.5], &[8, 4]).unwrap()
        } else {
            RectDomain::new(&[2.0], &[16]).unwrap()
        };
        let g = TransitionGraph::bidirected_path(2).unwrap();
        let start = StackedDensity::new(vec![ScalarField::constant(d, 0.5 / d.volume()), ScalarField::constant(d, 0.5 / d.volume())]).unwrap();
        let mut ens = ParticleEnsemble::sample(&start, 500, seed).unwrap();
        let v = vec![FaceField::from_faces(d, |_, _, _| speed), FaceField::from_faces(d, |_, _, _| -speed)];
        let gains = SpatialGainSet::uniform(&g, d, &[1.0, 1.0]).unwrap();
        for _ in 0..20 {
            ens.sde_step(&v, &[diffusion, diffusion], &gains, dt).unwrap();
            prop_assert!(ens.positions().iter().all(|p| d.contains(*p)));
            prop_assert!(ens.states().iter().all(|s| *s < 2));
        }
    }
}

fn drifting_run(seed: u64) -> String {
    let d = line(32);
    let g = TransitionGraph::bidirected_path(2).unwrap();
    let f = ScalarField::from_fn(d, |p| 1.0 + 0.5 * (PI * p[0]).cos()).normalized_to(0.5).unwrap();
    let start = StackedDensity::new(vec![f.clone(), f]).unwrap();
    let mut ens = ParticleEnsemble::sample(&start, 5000, seed).unwrap();
    let v = vec![FaceField::from_faces(d, |_, p, _| (p as f64 * 0.3).sin()), FaceField::zeros(d)];
    let gains = SpatialGainSet::new(g, d, vec![(0..32).map(|c| 1.0 + c as f64 * 0.05).collect(), vec![0.5; 32]]).unwrap();
    for _ in 0..50 {
        ens.sde_step(&v, &[0.5, 1.0], &gains, 1e-2).unwrap();
    }
    ens.to_csv()
}

#[test]
fn identical_seeds_give_identical_ensembles() {
    let a = drifting_run(99);
    assert_eq!(a, drifting_run(99));
    assert_ne!(a, drifting_run(100));
}

#[test]
fn switch_frequency_matches_the_thinning_probability() {
    let d = line(4);
    let g = TransitionGraph::new(2, vec![(0, 1)]).unwrap();
    let k = 4.0;
    let dt = 0.02;
    let n = 20_000;
    let gains = SpatialGainSet::uniform(&g, d, &[k]).unwrap();
    let zero = vec![FaceField::zeros(d), FaceField::zeros(d)];
    let mut ens = ParticleEnsemble::from_particles(d, 2, vec![[0.5, 0.0]; n], vec![0; n], 5).unwrap();
    let (mut trials, mut switches) = (0usize, 0usize);
    for _ in 0..10 {
        let before = ens.states().iter().filter(|s| **s == 0).count();
        ens.sde_step(&zero, &[0.0, 0.0], &gains, dt).unwrap();
        let after = ens.states().iter().filter(|s| **s == 0).count();
        trials += before;
        switches += before - after;
    }
    let p = -(-k * dt).exp_m1();
    let sigma = (p * (1.0 - p) / trials as f64).sqrt();
    let freq = switches as f64 / trials as f64;
    assert!((freq - p).abs() <= 3.0 * sigma, "{freq} vs {p} (sigma {sigma})");
}

#[test]
fn state_occupancy_follows_the_rate_equation() {
    let d = line(4);
    let g = TransitionGraph::new(3, vec![(0, 1), (1, 2), (2, 0), (1, 0)]).unwrap();
    let rates = [1.5, 1.0, 0.5, 0.8];
    let gains = SpatialGainSet::uniform(&g, d, &rates).unwrap();
    let zero = vec![FaceField::zeros(d); 3];
    let n = 30_000;
    let mut ens = ParticleEnsemble::from_particles(d, 3, vec![[0.3, 0.0]; n], vec![0; n], 11).unwrap();
    let dt = 0.005;
    let q = rate_matrix(&g, &rates);
    let mu0 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
    for step in 1..=200 {
        ens.sde_step(&zero, &[0.0; 3], &gains, dt).unwrap();
        if step % 50 == 0 {
            let exact = expm(&(&q * (step as f64 * dt))) * &mu0;
            for (s, occ) in ens.occupancy().iter().enumerate() {
                let sigma = (exact[s] * (1.0 - exact[s]) / n as f64).sqrt();
                assert!((occ - exact[s]).abs() <= 3.0 * sigma, "state {s} at step {step}: {occ} vs {}", exact[s]);
            }
        }
    }
}

#[test]
fn uniform_samples_fill_the_bins_evenly() {
    let d = line(32);
    let n = 100_000;
    let start = StackedDensity::new(vec![ScalarField::constant(d, 1.0)]).unwrap();
    let ens = ParticleEnsemble::sample(&start, n, 7).unwrap();
    let emp = ens.empirical_density(&d).unwrap();
    assert!((emp.density.total_mass() - 1.0).abs() <= 1e-12);
    let l1 = emp.l1_distance(&[ScalarField::constant(d, 1.0)]);
    // each bin count is binomial; |p_hat - p| has mean sigma sqrt(2/pi) and
    // variance sigma^2 (1 - 2/pi)
    let p = 1.0 / 32.0;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    let mean = 32.0 * sigma * (2.0 / PI).sqrt();
    let spread = (32.0 * sigma * sigma * (1.0 - 2.0 / PI)).sqrt();
    let bound = mean + 3.0 * spread;
    assert!(bound <= 0.02);
    assert!(l1 <= bound, "{l1} > {bound}");
}
