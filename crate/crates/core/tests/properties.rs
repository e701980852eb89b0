use proptest::prelude::*;

use brex_core::brex::run_mcmc;
use brex_core::chain::propose;
use brex_core::demos::{generate_ranked_random_demos, sample_ground_truth_reward};
use brex_core::hcpe::var_bound;
use brex_core::mdp::{
    bellman_residual, greedy_policy, l2_norm, policy_loss, value_iteration, GridWorld, RewardWeights,
    StochasticPolicy,
};
use brex_core::rng::seeded;
use brex_core::{McmcConfig, PosteriorChain, PreferenceDataset};

fn world(seed: u64, gamma: f64) -> GridWorld {
    GridWorld::random(4, 3, 3, gamma, &mut seeded(seed)).unwrap()
}

fn weights(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, k)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn value_iteration_is_a_bellman_fixed_point(seed in 0u64..1000, gamma in 0.0f64..0.95, w in weights(3)) {
        let mdp = world(seed, gamma);
        let reward = RewardWeights::unconstrained(w).unwrap();
        let q = value_iteration(&mdp, &reward, 1e-10).unwrap();
        prop_assert!(bellman_residual(&mdp, &reward, &q).unwrap() < 1e-8);
    }

    #[test]
    fn policy_loss_is_nonnegative(
        seed in 0u64..1000,
        w in weights(3),
        rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 12),
    ) {
        let mdp = world(seed, 0.9);
        let reward = RewardWeights::unconstrained(w).unwrap();
        let rows = rows
            .into_iter()
            .map(|r| {
                let z: f64 = r.iter().sum();
                r.into_iter().map(|x| x / z).collect()
            })
            .collect();
        let policy = StochasticPolicy::from_rows(rows).unwrap();
        prop_assert!(policy_loss(&mdp, &policy, &reward).unwrap() >= -1e-9);
        let best = greedy_policy(&value_iteration(&mdp, &reward, 1e-10).unwrap());
        prop_assert!(policy_loss(&mdp, &best, &reward).unwrap().abs() < 1e-6);
    }

    #[test]
    fn proposals_stay_on_the_sphere(w in weights(5), sigma in 0.001f64..2.0, seed in any::<u64>()) {
        prop_assume!(l2_norm(&w) > 1e-6);
        let w = RewardWeights::normalized_l2(w).unwrap();
        let p = propose(&w, sigma, &mut seeded(seed)).unwrap();
        prop_assert!((l2_norm(p.as_slice()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn var_is_an_order_statistic(xs in prop::collection::vec(-1e3f64..1e3, 1..200), d1 in 0.01f64..0.99, d2 in 0.01f64..0.99) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let a = var_bound(&xs, lo).unwrap();
        let b = var_bound(&xs, hi).unwrap();
        prop_assert!(a <= b);
        prop_assert!(xs.contains(&a));
        let below = xs.iter().filter(|&&x| x < a).count();
        prop_assert!((below as f64) < (lo * xs.len() as f64).ceil().max(1.0));
    }

    #[test]
    fn world_json_round_trips(seed in any::<u64>(), w in 1usize..6, h in 1usize..6, k in 1usize..5) {
        let mdp = GridWorld::random(w, h, k, 0.9, &mut seeded(seed)).unwrap();
        let back = GridWorld::from_json(&mdp.to_json()).unwrap();
        prop_assert_eq!(back.to_json(), mdp.to_json());
        prop_assert_eq!(back.content_hash(), mdp.content_hash());
    }

    #[test]
    fn dataset_json_round_trips(seed in any::<u64>(), m in 2usize..8) {
        let mut rng = seeded(seed);
        let mdp = world(seed, 0.9);
        let truth = sample_ground_truth_reward(3, &mut rng).unwrap();
        let data = generate_ranked_random_demos(&mdp, &truth, m, 6, &mut rng).unwrap();
        let back = PreferenceDataset::from_json(&data.to_json()).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn chain_bytes_round_trip(
        rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 1..50),
        lp in -1e3f64..0.0,
    ) {
        let log_post = vec![lp; rows.len()];
        let chain = PosteriorChain::from_rows(
            brex_core::chain::ChainKind::Brex,
            &rows,
            log_post,
            McmcConfig::default(),
        )
        .unwrap();
        let back = PosteriorChain::from_bytes(&chain.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), chain.to_bytes());
        prop_assert_eq!(back.samples().collect::<Vec<_>>(), chain.samples().collect::<Vec<_>>());
    }
}

#[test]
fn chains_are_reproducible_from_a_seed() {
    let mdp = world(4, 0.9);
    let truth = sample_ground_truth_reward(3, &mut seeded(4)).unwrap();
    let data = generate_ranked_random_demos(&mdp, &truth, 6, 10, &mut seeded(5)).unwrap();
    let cfg = McmcConfig::gridworld(9).with_steps(3000);
    let a = run_mcmc(&data, &cfg, &mut seeded(9)).unwrap();
    let b = run_mcmc(&data, &cfg, &mut seeded(9)).unwrap();
    let c = run_mcmc(&data, &cfg, &mut seeded(10)).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_ne!(a.to_bytes(), c.to_bytes());
}
