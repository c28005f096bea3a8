use proptest::prelude::*;
use taskcomm::linalg::{min_eigenvalue, orthonormality_error, Mat};
use taskcomm::refopt::project_psd_trace;
use taskcomm::{
    allocate_energy, analytic_mse, multiuser_encoder, single_user_encoder, solve_reference,
    BasisMethod, ChannelSet, Dims, SolverOptions, SweepInstance, WeightMode,
};

const SMALL: Dims = Dims {
    users: 3,
    latent: 5,
    target: 2,
    observation: 6,
};

fn small_instance(seed: u64, energy: f64) -> SweepInstance {
    let mut inst = SweepInstance::generate(SMALL, Some(3), seed).unwrap();
    inst.channels.energy = energy;
    inst
}

fn trace(m: &Mat) -> f64 {
    m.diagonal().sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn allocation_spends_exactly_the_budget(
        table in prop::collection::vec(0.0f64..5.0, 12),
        gains in prop::collection::vec(0.05f64..3.0, 3),
        energy in 1e-2f64..1e3,
    ) {
        let importance = Mat::from_vec(4, 3, table);
        let channels = ChannelSet::new(gains, energy).unwrap();
        let alloc = allocate_energy(&importance, &channels).unwrap();
        prop_assert!(alloc.energies.iter().all(|&w| w >= 0.0));
        let spent: f64 = alloc.energies.iter().sum();
        prop_assert!((spent - energy).abs() <= 1e-9 * energy, "spent {spent} of {energy}");
    }

    #[test]
    fn psd_projection_lands_on_the_constraint_set(
        entries in prop::collection::vec(-3.0f64..3.0, 25),
        energy in 0.1f64..50.0,
    ) {
        let a = Mat::from_vec(5, 5, entries);
        let s = (&a + a.transpose()) * 0.5;
        let p = project_psd_trace(&s, energy);
        prop_assert!(min_eigenvalue(&p) >= -1e-10 * energy);
        let positive: f64 = s.clone().symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0)).sum();
        if positive > energy {
            prop_assert!((trace(&p) - energy).abs() <= 1e-9 * energy);
        } else {
            prop_assert!((trace(&p) - positive).abs() <= 1e-9 * energy);
        }
        let again = project_psd_trace(&p, energy);
        prop_assert!((&again - &p).norm() <= 1e-9 * energy);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn designed_encoder_is_feasible_and_bounded(seed in 0u64..10_000, energy in 0.05f64..500.0) {
        let inst = small_instance(seed, energy);
        for basis in [BasisMethod::Svd, BasisMethod::GramSchmidt, BasisMethod::Natural] {
            let enc = multiuser_encoder(&inst.stats, &inst.channels, WeightMode::Blended, basis).unwrap();
            prop_assert!(orthonormality_error(&enc.basis) < 1e-10);
            prop_assert!((enc.total_energy() - energy).abs() <= 1e-9 * energy);
            let report = analytic_mse(&inst.stats, &enc.matrix(), &inst.channels, "p").unwrap();
            let silent: f64 = inst.stats.prior.iter().map(trace).sum();
            let floor: f64 = report.mse_floor.iter().sum();
            prop_assert!(report.sum_mse <= silent * (1.0 + 1e-12));
            prop_assert!(report.sum_mse >= floor * (1.0 - 1e-12));
        }
    }

    #[test]
    fn reference_is_never_beaten(seed in 0u64..10_000, energy in 0.1f64..100.0) {
        let inst = small_instance(seed, energy);
        let reference = solve_reference(&inst.stats, &inst.channels, &SolverOptions::default()).unwrap();
        let best = analytic_mse(&inst.stats, &reference.g, &inst.channels, "r").unwrap().sum_mse;
        for basis in [BasisMethod::Svd, BasisMethod::GramSchmidt] {
            let enc = multiuser_encoder(&inst.stats, &inst.channels, WeightMode::Blended, basis).unwrap();
            let mse = analytic_mse(&inst.stats, &enc.matrix(), &inst.channels, "p").unwrap().sum_mse;
            prop_assert!(best <= mse * (1.0 + 1e-7), "reference {best} vs {basis:?} {mse}");
        }
    }

    #[test]
    fn single_user_design_beats_random_encoders(
        seed in 0u64..10_000,
        energy in 0.1f64..100.0,
        gain in 0.1f64..3.0,
        entries in prop::collection::vec(-1.0f64..1.0, 36),
    ) {
        let mut inst = small_instance(seed, energy);
        inst.stats.cross.truncate(1);
        inst.stats.prior.truncate(1);
        inst.stats.gram.truncate(1);
        let channels = ChannelSet::new(vec![gain], energy).unwrap();
        let enc = single_user_encoder(&inst.stats.gram[0], gain, energy).unwrap();
        let designed = analytic_mse(&inst.stats, &enc.matrix(), &channels, "s").unwrap().sum_mse;

        let g = Mat::from_vec(6, 6, entries);
        let norm2 = g.norm_squared();
        prop_assume!(norm2 > 1e-6);
        let g = g * (energy / norm2).sqrt();
        let random = analytic_mse(&inst.stats, &g, &channels, "g").unwrap().sum_mse;
        prop_assert!(designed <= random * (1.0 + 1e-10), "designed {designed} vs random {random}");
    }
}
