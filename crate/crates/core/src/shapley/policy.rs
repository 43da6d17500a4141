use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::table::ShapleyTable;
use crate::error::{Error, Result};

/// `epsilon` applies to iterations `t > after`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonStep {
    pub after: usize,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PermutationPolicy {
    Uniform,
    EpsilonGreedy {
        warmup_iters: usize,
        schedule: Vec<EpsilonStep>,
        top_group: usize,
    },
}

impl PermutationPolicy {
    /// Uniform up to iteration 30, then ε = 0.5 until 40 and 0.3 after,
    /// with a top group of `2k`.
    pub fn epsilon_greedy(top_k: usize) -> Self {
        Self::EpsilonGreedy {
            warmup_iters: 30,
            schedule: vec![
                EpsilonStep {
                    after: 30,
                    epsilon: 0.5,
                },
                EpsilonStep {
                    after: 40,
                    epsilon: 0.3,
                },
            ],
            top_group: 2 * top_k,
        }
    }

    pub fn validate(&self, players: usize) -> Result<()> {
        if let Self::EpsilonGreedy {
            warmup_iters,
            schedule,
            top_group,
        } = self
        {
            if *warmup_iters == 0 {
                return Err(Error::invalid("warmup_iters must be at least 1"));
            }
            if *top_group > players {
                return Err(Error::invalid(format!(
                    "top group {top_group} exceeds {players} players"
                )));
            }
            if schedule.iter().any(|s| !(0.0..=1.0).contains(&s.epsilon)) {
                return Err(Error::invalid("epsilon must lie in [0, 1]"));
            }
            if schedule.windows(2).any(|w| w[0].after >= w[1].after) {
                return Err(Error::invalid("epsilon schedule must be increasing"));
            }
        }
        Ok(())
    }

    /// Whether iteration `t` (1-based) draws independently of the table.
    pub fn is_uniform_at(&self, t: usize) -> bool {
        match self {
            Self::Uniform => true,
            Self::EpsilonGreedy { warmup_iters, .. } => t <= *warmup_iters,
        }
    }

    /// ε for iteration `t`; 1 before the first schedule step.
    pub fn epsilon_at(&self, t: usize) -> f64 {
        match self {
            Self::Uniform => 1.0,
            Self::EpsilonGreedy { schedule, .. } => schedule
                .iter()
                .rev()
                .find(|s| t > s.after)
                .map_or(1.0, |s| s.epsilon),
        }
    }
}

/// Per-iteration RNG: stream `t` of the run seed.
pub fn iteration_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    rng
}

pub fn sample_permutation(
    policy: &PermutationPolicy,
    table: &ShapleyTable,
    t: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let n = table.len();
    let top_group = match policy {
        PermutationPolicy::EpsilonGreedy { top_group, .. } if !policy.is_uniform_at(t) => {
            (*top_group).min(n)
        }
        _ => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            return perm;
        }
    };
    let eps = policy.epsilon_at(t);
    let ranking = table.ranking();
    let mut top = ranking[..top_group].to_vec();
    let mut others = ranking[top_group..].to_vec();
    // draw order inside a group must not depend on the ranking order
    top.sort_unstable();
    others.sort_unstable();
    let mut perm = Vec::with_capacity(n);
    while perm.len() < n {
        let use_top = if top.is_empty() {
            false
        } else if others.is_empty() {
            true
        } else {
            rng.random::<f64>() >= eps
        };
        let group = if use_top { &mut top } else { &mut others };
        let i = rng.random_range(0..group.len());
        perm.push(group.swap_remove(i));
    }
    perm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapley::MetricKind;
    use std::collections::HashMap;

    fn table_with(estimates: &[f64]) -> ShapleyTable {
        let mut t = ShapleyTable::new(MetricKind::Other, estimates.len());
        for (i, e) in estimates.iter().enumerate() {
            t.record(i, *e);
        }
        t
    }

    fn greedy(eps: f64, top_group: usize) -> PermutationPolicy {
        PermutationPolicy::EpsilonGreedy {
            warmup_iters: 1,
            schedule: vec![EpsilonStep {
                after: 0,
                epsilon: eps,
            }],
            top_group,
        }
    }

    #[test]
    fn default_schedule() {
        let p = PermutationPolicy::epsilon_greedy(2);
        assert!(p.is_uniform_at(30));
        assert!(!p.is_uniform_at(31));
        assert_eq!(p.epsilon_at(31), 0.5);
        assert_eq!(p.epsilon_at(40), 0.5);
        assert_eq!(p.epsilon_at(41), 0.3);
        p.validate(4).unwrap();
        assert!(p.validate(3).is_err());
    }

    #[test]
    fn warmup_is_uniform() {
        // chi-square over the 24 orderings of 4 players
        let table = ShapleyTable::new(MetricKind::Other, 4);
        let policy = PermutationPolicy::epsilon_greedy(1);
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        let draws = 10_000;
        for t in 0..draws {
            let mut rng = iteration_rng(5, t);
            *counts
                .entry(sample_permutation(&policy, &table, 1, &mut rng))
                .or_default() += 1;
        }
        assert_eq!(counts.len(), 24);
        let expected = draws as f64 / 24.0;
        let chi2: f64 = counts
            .values()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 23 degrees of freedom, 0.999 quantile
        assert!(chi2 < 49.73, "chi2 = {chi2}");
    }

    #[test]
    fn zero_epsilon_front_loads_top_group() {
        let table = table_with(&[0.1, 0.9, 0.3, 0.8, 0.2]);
        for s in 0..50 {
            let p = sample_permutation(&greedy(0.0, 2), &table, 5, &mut iteration_rng(s, 1));
            let mut front = p[..2].to_vec();
            front.sort();
            assert_eq!(front, vec![1, 3]);
        }
    }

    #[test]
    fn unit_epsilon_places_others_first() {
        let table = table_with(&[0.1, 0.9, 0.3, 0.8, 0.2]);
        for s in 0..50 {
            let p = sample_permutation(&greedy(1.0, 2), &table, 5, &mut iteration_rng(s, 1));
            let mut back = p[3..].to_vec();
            back.sort();
            assert_eq!(back, vec![1, 3]);
        }
        // empty top group degenerates to a plain shuffle
        let p = sample_permutation(&greedy(1.0, 0), &table, 5, &mut iteration_rng(0, 1));
        let mut sorted = p.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn unvisited_rank_below_visited() {
        let mut table = ShapleyTable::new(MetricKind::Other, 4);
        table.record(2, -5.0);
        for s in 0..20 {
            let p = sample_permutation(&greedy(0.0, 1), &table, 5, &mut iteration_rng(s, 1));
            assert_eq!(p[0], 2);
        }
    }
}
