use serde::{Deserialize, Serialize};

use super::game::{CoalitionGame, Walker};
use super::neuron::{Metric, NeuronGame};
use super::policy::{iteration_rng, sample_permutation, PermutationPolicy};
use super::table::{MetricKind, ShapleyTable};
use crate::error::{Error, Result};
use crate::nn::{Model, NeuronId};
use crate::par;

/// What happens to players behind the stop point of a walk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardMode {
    /// They get no sample this iteration.
    #[default]
    Omit,
    /// They get a zero sample.
    ZeroFill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapleyConfig {
    pub iterations: usize,
    pub discard_threshold: f64,
    pub policy: PermutationPolicy,
    pub seed: u64,
    pub top_k: usize,
    pub bottom_l: usize,
    #[serde(default)]
    pub discard_mode: DiscardMode,
}

impl ShapleyConfig {
    /// Defaults for `n` players: 50 iterations, τ = 0.2, ε-greedy policy,
    /// `k = ⌈n/100⌉` and `l = n − ⌈n/10⌉`, so the accuracy table vetoes
    /// its top tenth.
    pub fn for_players(n: usize) -> Self {
        let top_k = n.div_ceil(100).max(1);
        Self {
            iterations: 50,
            discard_threshold: 0.2,
            policy: PermutationPolicy::epsilon_greedy(top_k),
            seed: 0,
            top_k,
            bottom_l: n - n.div_ceil(10),
            discard_mode: DiscardMode::Omit,
        }
    }

    pub fn validate(&self, players: usize) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.discard_threshold) {
            return Err(Error::invalid(format!(
                "discard threshold {} not in [0, 1]",
                self.discard_threshold
            )));
        }
        if self.top_k > players || self.bottom_l > players {
            return Err(Error::invalid(format!(
                "top_k {} / bottom_l {} exceed {players} players",
                self.top_k, self.bottom_l
            )));
        }
        self.policy.validate(players)
    }
}

/// Walk `perm` from the grand coalition, pruning cumulatively, and return
/// `(player, m(before) − m(after))` for every player walked. The walk stops
/// once the metric falls below `tau`.
pub fn walk_permutation(
    walker: &mut dyn Walker,
    perm: &[usize],
    tau: f64,
    mode: DiscardMode,
) -> Result<Vec<(usize, f64)>> {
    let mut samples = Vec::with_capacity(perm.len());
    let mut before = walker.value();
    let mut stop = 0;
    if before >= tau {
        for (j, &p) in perm.iter().enumerate() {
            let after = walker.remove(p)?;
            samples.push((p, before - after));
            before = after;
            stop = j + 1;
            if after < tau {
                break;
            }
        }
    }
    if mode == DiscardMode::ZeroFill {
        samples.extend(perm[stop..].iter().map(|&p| (p, 0.0)));
    }
    Ok(samples)
}

fn run_iteration(
    game: &dyn CoalitionGame,
    config: &ShapleyConfig,
    table: &ShapleyTable,
    t: usize,
) -> Result<Vec<(usize, f64)>> {
    let mut rng = iteration_rng(config.seed, t);
    let perm = sample_permutation(&config.policy, table, t, &mut rng);
    let mut walker = game.walker()?;
    walk_permutation(
        walker.as_mut(),
        &perm,
        config.discard_threshold,
        config.discard_mode,
    )
}

/// Monte-Carlo permutation estimate over an arbitrary game.
///
/// Iterations that draw independently of the table run in parallel; the
/// ε-greedy phase reads the running table and runs in order. Either way the
/// samples are merged in iteration order, so the result does not depend on
/// the thread count.
pub fn estimate_game(
    game: &dyn CoalitionGame,
    players: Vec<NeuronId>,
    kind: MetricKind,
    config: &ShapleyConfig,
) -> Result<ShapleyTable> {
    let n = game.player_count();
    if players.len() != n {
        return Err(Error::invalid(format!(
            "{} labels for {n} players",
            players.len()
        )));
    }
    config.validate(n)?;
    let mut table = ShapleyTable::with_players(kind, players);
    let independent = (1..=config.iterations)
        .take_while(|&t| config.policy.is_uniform_at(t))
        .count();
    let first = par::map(independent, |i| run_iteration(game, config, &table, i + 1));
    for (i, walk) in first.into_iter().enumerate() {
        merge(&mut table, i + 1, walk);
    }
    for t in independent + 1..=config.iterations {
        let walk = run_iteration(game, config, &table, t);
        merge(&mut table, t, walk);
    }
    Ok(table)
}

fn merge(table: &mut ShapleyTable, t: usize, walk: Result<Vec<(usize, f64)>>) {
    match walk {
        Ok(samples) => table.record_walk(&samples),
        Err(e) => table.aborted.push((t, e.to_string())),
    }
}

/// Shapley table of every prunable neuron of `model` for `metric`.
pub fn estimate_shapley(
    model: &Model,
    metric: Metric<'_>,
    config: &ShapleyConfig,
) -> Result<ShapleyTable> {
    let kind = metric.kind();
    let game = NeuronGame::new(model, metric)?;
    estimate_game(&game, model.neurons(), kind, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapley::{exact_shapley, FnGame};

    fn uniform(r: usize, tau: f64) -> ShapleyConfig {
        ShapleyConfig {
            iterations: r,
            discard_threshold: tau,
            policy: PermutationPolicy::Uniform,
            seed: 3,
            top_k: 1,
            bottom_l: 1,
            discard_mode: DiscardMode::Omit,
        }
    }

    fn labels(n: usize) -> Vec<NeuronId> {
        (0..n).map(|i| NeuronId::new(0, i)).collect()
    }

    #[test]
    fn additive_samples_equal_weights() {
        let w = [0.4, 0.3, 0.2, 0.1];
        let g = FnGame::new(4, |a: &[bool]| (0..4).filter(|&i| a[i]).map(|i| w[i]).sum());
        for tau in [0.0, 0.35] {
            let t = estimate_game(&g, labels(4), MetricKind::Other, &uniform(40, tau)).unwrap();
            for i in 0..4 {
                if let Some(e) = t.estimate(i) {
                    assert!((e - w[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn majority_converges_to_exact() {
        let g = FnGame::new(4, |a: &[bool]| {
            if a.iter().filter(|x| **x).count() >= 3 {
                1.0
            } else {
                0.0
            }
        });
        let exact = exact_shapley(&g).unwrap();
        let t = estimate_game(&g, labels(4), MetricKind::Other, &uniform(5000, 0.0)).unwrap();
        for i in 0..4 {
            assert!((t.estimate(i).unwrap() - exact[i]).abs() < 0.02);
        }
        assert_eq!(t.iterations, 5000);
    }

    #[test]
    fn stop_rule_and_zero_fill() {
        let g = FnGame::new(4, |a: &[bool]| a.iter().filter(|x| **x).count() as f64 / 4.0);
        let perm = [2, 0, 3, 1];
        let mut w = g.walker().unwrap();
        let s = walk_permutation(w.as_mut(), &perm, 0.3, DiscardMode::Omit).unwrap();
        // 1.0 → 0.75 → 0.5 → 0.25, stop after the third removal
        assert_eq!(s, vec![(2, 0.25), (0, 0.25), (3, 0.25)]);
        let mut w = g.walker().unwrap();
        let z = walk_permutation(w.as_mut(), &perm, 0.3, DiscardMode::ZeroFill).unwrap();
        assert_eq!(z.last(), Some(&(1, 0.0)));
        assert_eq!(z.len(), 4);
        let mut w = g.walker().unwrap();
        let none = walk_permutation(w.as_mut(), &perm, 1.5, DiscardMode::Omit).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn failing_iterations_are_dropped() {
        let g = FnGame::new(3, |a: &[bool]| a.iter().filter(|x| **x).count() as f64);
        struct Flaky<'a, G>(&'a G);
        impl<G: CoalitionGame> CoalitionGame for Flaky<'_, G> {
            fn player_count(&self) -> usize {
                self.0.player_count()
            }
            fn value(&self, alive: &[bool]) -> Result<f64> {
                if !alive[0] && !alive[1] {
                    return Err(Error::invalid("metric failed"));
                }
                self.0.value(alive)
            }
        }
        let t = estimate_game(&Flaky(&g), labels(3), MetricKind::Other, &uniform(30, 0.0)).unwrap();
        assert!(!t.aborted.is_empty());
        assert_eq!(t.iterations + t.aborted.len(), 30);
        // every surviving sample is exact for this additive game
        for i in 0..3 {
            assert_eq!(t.sums[i], t.counts[i] as f64);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = uniform(0, 0.2);
        assert!(c.validate(4).is_err());
        c.iterations = 1;
        c.discard_threshold = 1.5;
        assert!(c.validate(4).is_err());
        let d = ShapleyConfig::for_players(112);
        assert_eq!(d.top_k, 2);
        d.validate(112).unwrap();
    }
}
