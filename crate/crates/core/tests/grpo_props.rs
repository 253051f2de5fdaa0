mod common;

use common::{oracle_advantages, oracle_objective, oracle_term};
use proptest::prelude::*;
use sketchloop::grpo::{
    advantages, advantages_with, clip, clipped_term, objective, objective_logprob_gradient, GroupBatch, RatioInput,
    StdKind,
};

fn rewards() -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(0u8..=1, 1..=16)
}

fn batch(ratios: &[f64], rewards: &[u8]) -> GroupBatch {
    GroupBatch { ratios: ratios.to_vec(), advantages: advantages(rewards).unwrap() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn advantages_match_closed_form(r in rewards()) {
        let got = advantages(&r).unwrap();
        for (a, b) in got.advantages.iter().zip(oracle_advantages(&r)) {
            prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn non_degenerate_groups_are_standardized(r in rewards()) {
        let set = advantages(&r).unwrap();
        if set.is_degenerate() {
            prop_assert!(set.advantages.iter().all(|&a| a == 0.0));
            prop_assert!(r.iter().all(|&x| x == r[0]));
        } else {
            let n = set.len() as f64;
            let mean = set.advantages.iter().sum::<f64>() / n;
            let var = set.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_rewards_permutes_advantages(
        (r, perm) in rewards().prop_flat_map(|r| {
            let idx: Vec<usize> = (0..r.len()).collect();
            (Just(r), Just(idx).prop_shuffle())
        })
    ) {
        let base = advantages(&r).unwrap().advantages;
        let permuted: Vec<u8> = perm.iter().map(|&i| r[i]).collect();
        let got = advantages(&permuted).unwrap().advantages;
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((got[k] - base[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn min_dominance(r in 0.01f64..5.0, a in -5.0f64..5.0, eps in 0.01f64..0.99) {
        let t = clipped_term(RatioInput::new(r, a, eps).unwrap());
        prop_assert!(t <= r * a + 1e-15);
        prop_assert!(t <= clip(r, eps) * a + 1e-15);
        prop_assert!((t - oracle_term(r, a, eps)).abs() < 1e-12);
    }

    #[test]
    fn objective_matches_oracle(
        groups in proptest::collection::vec(
            (2usize..=16).prop_flat_map(|g| (
                proptest::collection::vec(0.3f64..2.0, g),
                proptest::collection::vec(0u8..=1, g),
            )),
            1..8,
        ),
        eps in 0.05f64..0.5,
    ) {
        let batches: Vec<GroupBatch> = groups.iter().map(|(q, r)| batch(q, r)).collect();
        let got = objective(&batches, eps).unwrap();
        prop_assert!((got - oracle_objective(&groups, eps)).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences(
        groups in proptest::collection::vec(
            (2usize..=8).prop_flat_map(|g| (
                proptest::collection::vec(-0.6f64..0.6, g),
                proptest::collection::vec(0u8..=1, g),
            )),
            1..4,
        ),
        eps in 0.1f64..0.3,
    ) {
        // ratio = exp(logp - logp_old) with logp_old = 0
        let ratios: Vec<Vec<f64>> = groups.iter().map(|(l, _)| l.iter().map(|x| x.exp()).collect()).collect();
        let near_kink = ratios.iter().flatten().any(|&r| (r - (1.0 - eps)).abs() < 1e-4 || (r - (1.0 + eps)).abs() < 1e-4);
        prop_assume!(!near_kink);
        let batches: Vec<GroupBatch> = ratios.iter().zip(&groups).map(|(q, (_, r))| batch(q, r)).collect();
        let grad = objective_logprob_gradient(&batches, eps).unwrap();
        let h = 1e-6;
        #[allow(clippy::needless_range_loop)]
        for gi in 0..groups.len() {
            for i in 0..groups[gi].0.len() {
                let at = |delta: f64| {
                    let mut b = batches.clone();
                    b[gi].ratios[i] = (groups[gi].0[i] + delta).exp();
                    objective(&b, eps).unwrap()
                };
                let fd = (at(h) - at(-h)) / (2.0 * h);
                prop_assert!((fd - grad[gi][i]).abs() < 1e-5, "group {gi} sample {i}: fd {fd} vs {}", grad[gi][i]);
            }
        }
    }
}

#[test]
fn sample_std_is_switchable() {
    let pop = advantages_with(&[1, 0], StdKind::Population).unwrap();
    let sample = advantages_with(&[1, 0], StdKind::Sample).unwrap();
    assert_eq!(pop.advantages, vec![1.0, -1.0]);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    assert!((sample.advantages[0] - s).abs() < 1e-12);
    assert!(advantages_with(&[1], StdKind::Sample).unwrap().is_degenerate());
}

#[test]
fn rejects_bad_inputs() {
    assert!(advantages(&[]).is_err());
    assert!(advantages(&[0, 2]).is_err());
    assert!(RatioInput::new(0.0, 1.0, 0.2).is_err());
    assert!(RatioInput::new(1.0, 1.0, 1.0).is_err());
    assert!(RatioInput::new(f64::NAN, 1.0, 0.2).is_err());
    let mismatched = GroupBatch { ratios: vec![1.0], advantages: advantages(&[1, 0]).unwrap() };
    assert!(objective(&[mismatched], 0.2).is_err());
    assert!(objective(&[], 0.2).is_err());
}
