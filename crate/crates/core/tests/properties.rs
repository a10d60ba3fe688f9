use gleet::backbone::{DeConfig, PsoConfig};
use gleet::env::{replay_rewards, Backbone, EnvConfig, GleetEnv};
use gleet::harness::{rank_sum_test, rank_table, RunResult};
use gleet::policy::{NetworkConfig, PolicyNetwork};
use gleet::rng::rng_for;
use gleet::suite::{augment, orthogonality_error, BaseFunction, Bounds};
use gleet::env::StateBundle;
use proptest::prelude::*;
use rand::Rng;

fn backbone(de: bool) -> Backbone {
    if de {
        Backbone::De(DeConfig::default())
    } else {
        Backbone::Pso(PsoConfig::default())
    }
}

fn base(i: usize) -> BaseFunction {
    BaseFunction::ALL[i % BaseFunction::ALL.len()]
}

fn result(algorithm: &str, instance: usize, seed: u64, cost: f64) -> RunResult {
    RunResult {
        algorithm: algorithm.into(),
        instance,
        seed,
        final_cost: cost,
        curve: vec![cost],
        action_mean: vec![],
        action_std: vec![],
        clipped_out_of_range: 0,
        episode: vec![],
        wall_time: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_episodes_keep_every_invariant(
        base_idx in 0usize..8,
        dim in 1usize..6,
        de in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let bounds = Bounds::default();
        let inst = augment(base(base_idx), dim, bounds, 0, &mut rng_for(seed, 5)).unwrap();
        let n = 6;
        let cfg = EnvConfig { backbone: backbone(de), population: n, fe_max: (n * 15) as u64, ..EnvConfig::default() };
        let (mut env, mut state) = GleetEnv::reset(&inst, cfg, seed).unwrap();
        let mut rng = rng_for(seed, 9);
        let initial = env.population().gbest_cost;
        let mut previous = initial;
        let mut total = 0.0;
        while !env.is_done() {
            state.validate().unwrap();
            let actions: Vec<f64> = (0..n * cfg.backbone.action_dim()).map(|_| rng.random_range(0.0..1.0)).collect();
            let out = env.step(&actions).unwrap();
            total += out.reward;
            let pop = env.population();
            prop_assert!(pop.gbest_cost <= previous);
            previous = pop.gbest_cost;
            for x in &pop.positions {
                prop_assert!(x.iter().all(|&v| v >= bounds.lower && v <= bounds.upper));
            }
            state = out.state;
        }
        state.validate().unwrap();
        let expected = (initial - previous) / initial;
        prop_assert!((total - expected).abs() <= 1e-12, "{total} vs {expected}");

        let stored: Vec<f64> = env.log()[1..].iter().map(|r| r.reward).collect();
        let replayed = replay_rewards(cfg.reward, env.log()).unwrap();
        prop_assert_eq!(stored, replayed);
    }

    #[test]
    fn instances_are_orthogonal_with_zero_optimum(base_idx in 0usize..8, dim in 1usize..11, seed in any::<u64>()) {
        let mut rng = rng_for(seed, 0);
        let inst = augment(base(base_idx), dim, Bounds::default(), 0, &mut rng).unwrap();
        prop_assert!(orthogonality_error(&inst.rotation, dim) < 1e-8);
        prop_assert!(inst.cost(&inst.shift).unwrap().abs() <= 1e-12);
        for _ in 0..20 {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-100.0..100.0)).collect();
            prop_assert!(inst.cost(&x).unwrap() >= 0.0);
        }
    }

    #[test]
    fn rank_table_follows_relabeling(costs in prop::collection::vec(0.0f64..10.0, 3 * 4 * 2), shift in 1usize..3) {
        let names = ["a", "b", "c"];
        let groups: Vec<Vec<RunResult>> = (0..3)
            .map(|g| (0..4).flat_map(|i| (0..2u64).map(move |s| (i, s)))
                .map(|(i, s)| result(names[g], i, s, costs[g * 8 + i * 2 + s as usize]))
                .collect())
            .collect();
        let mut rotated = groups.clone();
        rotated.rotate_left(shift);
        let key = |rows: Vec<gleet::harness::StatsRow>| {
            let mut v: Vec<_> = rows.into_iter().map(|r| (r.algorithm, r.instance, r.rank.to_bits())).collect();
            v.sort();
            v
        };
        prop_assert_eq!(key(rank_table(&groups).unwrap()), key(rank_table(&rotated).unwrap()));
    }

    #[test]
    fn rank_sum_is_antisymmetric(
        a in prop::collection::vec(0.0f64..5.0, 3..20),
        b in prop::collection::vec(0.0f64..5.0, 3..20),
    ) {
        let (z_ab, p_ab) = rank_sum_test(&a, &b).unwrap();
        let (z_ba, p_ba) = rank_sum_test(&b, &a).unwrap();
        prop_assert!((z_ab + z_ba).abs() < 1e-12);
        prop_assert!((p_ab - p_ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&p_ab));
    }
}

fn small_network(action_dim: usize) -> NetworkConfig {
    NetworkConfig { embed_dim: 16, heads: 2, ff_hidden: 24, action_dim, ..NetworkConfig::default() }
}

fn random_state(n: usize, seed: u64) -> StateBundle {
    let inst = augment(BaseFunction::Ackley, 3, Bounds::default(), 0, &mut rng_for(seed, 2)).unwrap();
    let cfg = EnvConfig { population: n, fe_max: (n * 20) as u64, ..EnvConfig::default() };
    let (mut env, _) = GleetEnv::reset(&inst, cfg, seed).unwrap();
    let mut rng = rng_for(seed, 3);
    for _ in 0..3 {
        let actions: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        env.step(&actions).unwrap();
    }
    env.state()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn policy_is_permutation_equivariant(
        seed in any::<u64>(),
        perm in Just((0..7).collect::<Vec<usize>>()).prop_shuffle(),
        use_mha in any::<bool>(),
        use_eet in any::<bool>(),
    ) {
        let cfg = NetworkConfig { use_mha, use_eet_embeddings: use_eet, ..small_network(1) };
        let net = PolicyNetwork::new(cfg, seed).unwrap();
        let state = random_state(7, seed);
        let base_out = net.act(&state).unwrap();
        let out = net.act(&state.permuted(&perm)).unwrap();
        for (k, &src) in perm.iter().enumerate() {
            prop_assert!((out.mu[k] - base_out.mu[src]).abs() <= 1e-9);
            prop_assert!((out.sigma[k] - base_out.sigma[src]).abs() <= 1e-9);
        }
        prop_assert!((out.value - base_out.value).abs() <= 1e-9);
    }
}
