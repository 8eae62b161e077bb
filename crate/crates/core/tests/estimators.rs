mod common;

use common::{gae_explicit, mean_and_population_std};
use proptest::prelude::*;
use synthex::trainer::{gae_advantages, grpo_advantages};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn gae_recursion_equals_explicit_sum(
        rewards in prop::collection::vec(-5.0f64..5.0, 1..30),
        seed_values in prop::collection::vec(-5.0f64..5.0, 31),
        gamma in 0.0f64..=1.0,
        lam in 0.0f64..=1.0,
    ) {
        let values = &seed_values[..rewards.len() + 1];
        let fast = gae_advantages(&rewards, values, gamma, lam).unwrap();
        let slow = gae_explicit(&rewards, values, gamma, lam);
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn grpo_advantages_are_standardized(rewards in prop::collection::vec(prop_oneof![Just(0.0f64), Just(1.0), -3.0f64..3.0], 2..20)) {
        let adv = grpo_advantages(&rewards).unwrap();
        let (_, std) = mean_and_population_std(&rewards);
        if std == 0.0 {
            prop_assert!(adv.iter().all(|a| *a == 0.0));
        } else {
            let (m, s) = mean_and_population_std(&adv);
            prop_assert!(m.abs() <= 1e-9);
            prop_assert!((s - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn balanced_binary_group_is_exact() {
    assert_eq!(grpo_advantages(&[1.0, 0.0, 1.0, 0.0]).unwrap(), vec![1.0, -1.0, 1.0, -1.0]);
}

#[test]
fn gae_length_mismatch_is_rejected() {
    assert!(gae_advantages(&[1.0, 2.0], &[0.0, 0.0], 0.9, 0.9).is_err());
}

#[test]
fn gae_lambda_one_is_discounted_return_minus_baseline() {
    let r = [0.0, 0.0, 1.0];
    let v = [0.3, 0.2, 0.1, 0.0];
    let a = gae_advantages(&r, &v, 0.9, 1.0).unwrap();
    let expected = [0.81 - 0.3, 0.9 - 0.2, 1.0 - 0.1];
    for (x, y) in a.iter().zip(expected) {
        assert!((x - y).abs() < 1e-12);
    }
}
