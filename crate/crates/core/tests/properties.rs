//! Property tests on random trees: budget monotonicity, admissibility of the
//! optimizer, reflexivity of the ordering, and feasibility of the floor lift.

use drawdown_lab::complete::floor_lift_at;
use drawdown_lab::primal::solve_primal_tree;
use drawdown_lab::random::{random_process, random_tree, RandomTreeSpec};
use drawdown_lab::utility::UtilityField;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn larger_budget_consumes_more(seed in any::<u64>(), x in 0.5f64..8.0, bump in 0.01f64..3.0, lambda in 0.0f64..=1.0) {
        let (tree, z) = random_tree(&mut ChaCha8Rng::seed_from_u64(seed), &RandomTreeSpec::default());
        let log = UtilityField::log();
        let a = solve_primal_tree(&tree, &z, &log, x, 0.0, lambda).unwrap();
        let b = solve_primal_tree(&tree, &z, &log, x + bump, 0.0, lambda).unwrap();
        for (lo, hi) in a.c.iter().zip(&b.c) {
            prop_assert!(lo <= &(hi + 1e-8 * hi.max(1.0)));
        }
        prop_assert!(b.u_hat >= a.u_hat);
    }

    #[test]
    fn optimizer_spends_exactly_the_budget(seed in any::<u64>(), x in 0.5f64..8.0, lambda in 0.0f64..=1.0) {
        let (tree, z) = random_tree(&mut ChaCha8Rng::seed_from_u64(seed), &RandomTreeSpec::default());
        let sol = solve_primal_tree(&tree, &z, &UtilityField::log(), x, 0.0, lambda).unwrap();
        let price = tree.pairing(&sol.plan(), z.values()).unwrap();
        prop_assert!((price - x).abs() <= 1e-8 * x);
        prop_assert!(tree.admissibility(&sol.plan(), &z, x).unwrap());
    }

    #[test]
    fn ordering_is_reflexive(seed in any::<u64>(), lambda in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tree, _) = random_tree(&mut rng, &RandomTreeSpec::default());
        let d = random_process(&mut rng, &tree, 0.0, 2.0);
        prop_assert!(tree.chron_leq(&d, &d, 1e-12).unwrap().holds);
        prop_assert!(tree.chron_leq_lambda(&d, &d, lambda, 1e-12).unwrap().holds);
    }

    #[test]
    fn floor_lift_respects_floor_and_ratchet(seed in any::<u64>(), x in 0.1f64..10.0, q in 0.1f64..3.0, lambda in 0.05f64..=1.0) {
        let (tree, z) = random_tree(&mut ChaCha8Rng::seed_from_u64(seed), &RandomTreeSpec::default());
        let lift = floor_lift_at(&tree, &z, &UtilityField::log(), x, q, lambda).unwrap();
        let alpha = z.alpha(&tree);
        prop_assert!(lift.price >= alpha * lambda * q * (1.0 - 1e-12));
        prop_assert!(lift.price >= x * (1.0 - 1e-9));
        let bar = tree.running_esssup(&lift.c);
        for u in 0..tree.len() {
            prop_assert!(lift.c[u] >= lambda * q - 1e-12);
            prop_assert!(lift.c[u] >= lambda * bar[u] - 1e-9 * bar[u].max(1.0));
        }
    }
}
