mod common;

use backdoor_prune::nn::Model;
use backdoor_prune::par::with_jobs;
use backdoor_prune::shapley::*;
use backdoor_prune::NeuronId;
use common::games::*;
use rand::seq::SliceRandom;

fn uniform(iterations: usize, tau: f64, seed: u64) -> ShapleyConfig {
    ShapleyConfig {
        iterations,
        discard_threshold: tau,
        policy: PermutationPolicy::Uniform,
        seed,
        top_k: 1,
        bottom_l: 1,
        discard_mode: DiscardMode::Omit,
    }
}

fn labels(n: usize) -> Vec<NeuronId> {
    (0..n).map(|i| NeuronId::new(0, i)).collect()
}

#[test]
fn all_orders_reproduce_the_exact_values() {
    for g in oracle_games() {
        let exact = exact_shapley(&g).unwrap();
        assert!(max_abs_diff(&exact, &g.expected) < 1e-12, "{}: {exact:?}", g.name);
        let walked = all_permutations_estimate(&g);
        assert!(max_abs_diff(&walked, &exact) < 1e-9, "{}: {walked:?}", g.name);
    }
}

#[test]
fn exact_values_satisfy_the_axioms() {
    for g in oracle_games().into_iter().chain(four_player_games()) {
        let phi = exact_shapley(&g).unwrap();
        let v = coalition_values(&g);
        let grand = v[v.len() - 1] - v[0];
        assert!((phi.iter().sum::<f64>() - grand).abs() < 1e-9, "{}: efficiency", g.name);
        for (i, j) in symmetric_pairs(&g) {
            assert!((phi[i] - phi[j]).abs() < 1e-9, "{}: symmetry {i} {j}", g.name);
        }
        for i in dummies(&g) {
            assert!(phi[i].abs() < 1e-9, "{}: dummy {i}", g.name);
        }
    }
    assert_eq!(dummies(&glove(2)), vec![3, 4]);
    assert_eq!(symmetric_pairs(&glove(0)), vec![(1, 2)]);
}

#[test]
fn monte_carlo_converges_on_four_player_games() {
    for g in four_player_games() {
        let t = estimate_game(&g, labels(4), MetricKind::Other, &uniform(5000, 0.0, 17)).unwrap();
        let est: Vec<f64> = t.estimates().into_iter().map(|e| e.unwrap()).collect();
        assert!(max_abs_diff(&est, &g.expected) < 0.02, "{}: {est:?}", g.name);
    }
}

#[test]
fn undiscarded_walks_telescope() {
    let g = random_monotone(6, 3);
    let v = coalition_values(&g);
    let mut rng = common::rng(1);
    for _ in 0..50 {
        let mut perm: Vec<usize> = (0..6).collect();
        perm.shuffle(&mut rng);
        let mut w = g.walker().unwrap();
        let s = walk_permutation(w.as_mut(), &perm, 0.0, DiscardMode::Omit).unwrap();
        assert_eq!(s.len(), 6);
        let total: f64 = s.iter().map(|x| x.1).sum();
        assert!((total - (v[63] - v[0])).abs() < 1e-12);
    }
}

#[test]
fn discarded_walks_are_prefixes_of_full_walks() {
    let mut rng = common::rng(2);
    for seed in 0..10 {
        let g = random_monotone(6, 100 + seed);
        for _ in 0..30 {
            let mut perm: Vec<usize> = (0..6).collect();
            perm.shuffle(&mut rng);
            let full = walk_permutation(g.walker().unwrap().as_mut(), &perm, 0.0, DiscardMode::Omit).unwrap();
            let cut = walk_permutation(g.walker().unwrap().as_mut(), &perm, 0.2, DiscardMode::Omit).unwrap();
            assert_eq!(cut[..], full[..cut.len()]);
            // the walk stops exactly at the first coalition below the threshold
            let mut value = 1.0;
            let mut below = Vec::new();
            for (_, m) in &full {
                value -= m;
                below.push(value < 0.2);
            }
            let first_below = below.iter().position(|b| *b).map_or(6, |j| j + 1);
            assert_eq!(cut.len(), first_below);
            let zero = walk_permutation(g.walker().unwrap().as_mut(), &perm, 0.2, DiscardMode::ZeroFill).unwrap();
            assert_eq!(zero.len(), 6);
            assert_eq!(zero[..cut.len()], cut[..]);
            assert!(zero[cut.len()..].iter().all(|x| x.1 == 0.0));
        }
    }
}

#[test]
fn tables_do_not_depend_on_worker_count() {
    let g = random_monotone(6, 9);
    let cfg = ShapleyConfig {
        iterations: 60,
        discard_threshold: 0.2,
        policy: PermutationPolicy::epsilon_greedy(2),
        seed: 4,
        top_k: 2,
        bottom_l: 3,
        discard_mode: DiscardMode::Omit,
    };
    let one = with_jobs(Some(1), || estimate_game(&g, labels(6), MetricKind::Other, &cfg).unwrap());
    let four = with_jobs(Some(4), || estimate_game(&g, labels(6), MetricKind::Other, &cfg).unwrap());
    assert_eq!(one, four);
    assert_eq!(one.iterations, 60);
}

#[test]
fn neuron_tables_do_not_depend_on_worker_count() {
    let data = backdoor_prune::attack::make_synthetic_dataset(&backdoor_prune::attack::SyntheticSpec {
        classes: 3,
        per_class: 4,
        size: 8,
        seed: 5,
    })
    .unwrap();
    let model = Model::reference([3, 8, 8], 3, 7).unwrap();
    let cfg = ShapleyConfig {
        discard_threshold: 0.0,
        ..ShapleyConfig::for_players(model.neuron_count())
    };
    let run = |jobs| {
        with_jobs(Some(jobs), || estimate_shapley(&model, Metric::Acc { data: &data }, &cfg).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a, b);
    assert_eq!(a.len(), 112);
}
