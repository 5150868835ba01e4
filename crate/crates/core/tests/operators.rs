use meanfield_core::grid::{divergence_form_operator, RectDomain, ScalarField};
use meanfield_core::pde::{advection_diffusion_operator, AdvectionFlux};
use meanfield_core::FaceField;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn domain_strategy() -> impl Strategy<Value = RectDomain> {
    prop_oneof![
        (2usize..40, 0.3f64..3.0).prop_map(|(n, l)| RectDomain::new(&[l], &[n]).unwrap()),
        (2usize..9, 2usize..9, 0.3f64..3.0, 0.3f64..3.0)
            .prop_map(|(nx, ny, lx, ly)| RectDomain::new(&[lx, ly], &[nx, ny]).unwrap()),
    ]
}

fn positive_field(d: RectDomain, seed: &[f64], lo: f64) -> ScalarField {
    ScalarField::new(d, (0..d.n_cells()).map(|k| lo + seed[k % seed.len()]).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn divergence_theorem(
        d in domain_strategy(),
        a_seed in prop::collection::vec(0.0f64..4.0, 1..50),
        w_seed in prop::collection::vec(0.0f64..4.0, 1..50),
        u_seed in prop::collection::vec(-3.0f64..3.0, 1..50),
    ) {
        let a = positive_field(d, &a_seed, 0.1);
        let w = positive_field(d, &w_seed, 0.1);
        let u = positive_field(d, &u_seed, 0.0);
        let l = divergence_form_operator(&a, &w).unwrap();
        let total: f64 = l.apply(u.values()).iter().sum::<f64>() * d.cell_volume();
        prop_assert!(total.abs() <= 1e-12 * u.max_abs());
    }

    #[test]
    fn reciprocal_weight_is_in_the_kernel(
        d in domain_strategy(),
        a_seed in prop::collection::vec(0.0f64..4.0, 1..50),
        w_seed in prop::collection::vec(0.0f64..4.0, 1..50),
    ) {
        let a = positive_field(d, &a_seed, 0.1);
        let w = positive_field(d, &w_seed, 0.1);
        let l = divergence_form_operator(&a, &w).unwrap();
        let r = l.apply(a.reciprocal().values());
        let scale = l.inf_norm() * a.reciprocal().max_abs();
        prop_assert!(r.iter().all(|v| v.abs() <= 1e-14 * scale));
    }

    #[test]
    fn weighted_similarity_is_symmetric(
        d in domain_strategy(),
        a_seed in prop::collection::vec(0.0f64..4.0, 1..50),
    ) {
        let a = positive_field(d, &a_seed, 0.1);
        let one = ScalarField::constant(d, 1.0);
        let l = divergence_form_operator(&a, &one).unwrap().to_dense();
        let n = d.n_cells();
        let s = DMatrix::from_fn(n, n, |i, j| l[(i, j)] / a.values()[j]);
        let asym = (&s - s.transpose()).amax();
        prop_assert!(asym <= 1e-12 * s.amax());
    }

    #[test]
    fn spectrum_lies_in_the_closed_left_half_plane(
        d in domain_strategy(),
        a_seed in prop::collection::vec(0.0f64..4.0, 1..50),
        w_seed in prop::collection::vec(0.0f64..4.0, 1..50),
    ) {
        let a = positive_field(d, &a_seed, 0.1);
        let w = positive_field(d, &w_seed, 0.1);
        let l = divergence_form_operator(&a, &w).unwrap().to_dense();
        let scale = l.amax();
        for z in l.complex_eigenvalues().iter() {
            prop_assert!(z.re <= 1e-10 * scale);
        }
    }

    #[test]
    fn advection_operators_conserve_mass(
        n in 2usize..60,
        speeds in prop::collection::vec(-20.0f64..20.0, 1..60),
        diffusion in 0.0f64..2.0,
        centered in any::<bool>(),
    ) {
        let d = RectDomain::unit_interval(n).unwrap();
        let v = FaceField::from_faces(d, |_, p, _| speeds[p % speeds.len()]);
        let flux = if centered { AdvectionFlux::Centered } else { AdvectionFlux::ExponentialFitting };
        let l = advection_diffusion_operator(&v, diffusion, flux).unwrap();
        let scale = l.inf_norm().max(1.0);
        prop_assert!(l.column_sums().iter().all(|c| c.abs() <= 1e-12 * scale));
    }
}
