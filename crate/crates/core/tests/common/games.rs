use backdoor_prune::shapley::{walk_permutation, CoalitionGame, DiscardMode};
use backdoor_prune::Result;
use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Metric = Box<dyn Fn(&[bool]) -> f64 + Sync>;

/// A small game with Shapley values known in closed form.
pub struct Game {
    pub name: String,
    pub n: usize,
    metric: Metric,
    pub expected: Vec<f64>,
}

impl CoalitionGame for Game {
    fn player_count(&self) -> usize {
        self.n
    }

    fn value(&self, alive: &[bool]) -> Result<f64> {
        Ok((self.metric)(alive))
    }
}

fn game(name: impl Into<String>, n: usize, expected: Vec<f64>, metric: impl Fn(&[bool]) -> f64 + Sync + 'static) -> Game {
    Game {
        name: name.into(),
        n,
        metric: Box::new(metric),
        expected,
    }
}

fn count(a: &[bool]) -> usize {
    a.iter().filter(|&&x| x).count()
}

pub fn additive(weights: &[f64]) -> Game {
    let w = weights.to_vec();
    game(format!("additive-{}", w.len()), w.len(), w.clone(), move |a| {
        a.iter().zip(&w).filter(|(on, _)| **on).map(|(_, w)| w).sum()
    })
}

/// `m = 1` when at least `quota` players are present; symmetric, so each
/// player gets `1/n`.
pub fn majority(n: usize, quota: usize) -> Game {
    game(format!("majority-{n}"), n, vec![1.0 / n as f64; n], move |a| {
        if count(a) >= quota {
            1.0
        } else {
            0.0
        }
    })
}

/// One left glove (player 0) and two right gloves; `dummies` extra players
/// never matter.
pub fn glove(dummies: usize) -> Game {
    let mut expected = vec![2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0];
    expected.extend(std::iter::repeat_n(0.0, dummies));
    let name = if dummies == 0 {
        "glove".to_string()
    } else {
        format!("glove+{dummies}-dummies")
    };
    game(name, 3 + dummies, expected, |a| {
        if a[0] && (a[1] || a[2]) {
            1.0
        } else {
            0.0
        }
    })
}

/// `m(C) = Σ_{S ⊆ C} w_S` with random non-negative dividends `w_S` on
/// coalitions of up to three players, scaled so `m(N) = 1`. Monotone, and
/// each player's value is `Σ_{S ∋ i} w_S / |S|`.
pub fn random_monotone(n: usize, seed: u64) -> Game {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dividends: Vec<(u32, f64)> = (1u32..1 << n)
        .filter(|s| s.count_ones() <= 3)
        .map(|s| (s, if rng.random_bool(0.6) { rng.random_range(0.0..1.0) } else { 0.0 }))
        .collect();
    let total: f64 = dividends.iter().map(|d| d.1).sum();
    for d in &mut dividends {
        d.1 /= total;
    }
    let mut expected = vec![0.0; n];
    for &(s, w) in &dividends {
        for (i, e) in expected.iter_mut().enumerate() {
            if s >> i & 1 == 1 {
                *e += w / s.count_ones() as f64;
            }
        }
    }
    game(format!("random-monotone-{n}"), n, expected, move |a| {
        let mask: u32 = a.iter().enumerate().map(|(i, &on)| (on as u32) << i).sum();
        dividends.iter().filter(|(s, _)| s & mask == *s).map(|d| d.1).sum()
    })
}

/// The five oracle games on at most six players.
pub fn oracle_games() -> Vec<Game> {
    vec![
        additive(&[0.3, 0.25, 0.2, 0.15, 0.1]),
        majority(3, 2),
        glove(0),
        glove(2),
        random_monotone(6, 21),
    ]
}

pub fn four_player_games() -> Vec<Game> {
    vec![
        majority(4, 3),
        additive(&[0.4, 0.3, 0.2, 0.1]),
        glove(1),
        random_monotone(4, 5),
    ]
}

/// Average of the walk marginals over all `n!` removal orders with no
/// discarding.
pub fn all_permutations_estimate(g: &Game) -> Vec<f64> {
    let mut sums = vec![0.0; g.n];
    let mut orders = 0usize;
    for perm in (0..g.n).permutations(g.n) {
        let mut walker = g.walker().unwrap();
        for (p, m) in walk_permutation(walker.as_mut(), &perm, 0.0, DiscardMode::Omit).unwrap() {
            sums[p] += m;
        }
        orders += 1;
    }
    sums.iter().map(|s| s / orders as f64).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Coalition values indexed by bitmask.
pub fn coalition_values(g: &Game) -> Vec<f64> {
    (0..1usize << g.n)
        .map(|mask| {
            let alive: Vec<bool> = (0..g.n).map(|i| mask >> i & 1 == 1).collect();
            g.value(&alive).unwrap()
        })
        .collect()
}

/// Players whose marginal is zero against every coalition.
pub fn dummies(g: &Game) -> Vec<usize> {
    let v = coalition_values(g);
    (0..g.n)
        .filter(|&i| (0..v.len()).filter(|m| m >> i & 1 == 0).all(|m| v[m | 1 << i] == v[m]))
        .collect()
}

/// Pairs `(i, j)` with `m(C ∪ i) = m(C ∪ j)` for every `C` avoiding both.
pub fn symmetric_pairs(g: &Game) -> Vec<(usize, usize)> {
    let v = coalition_values(g);
    let mut out = Vec::new();
    for i in 0..g.n {
        for j in i + 1..g.n {
            let both = 1 << i | 1 << j;
            if (0..v.len())
                .filter(|m| m & both == 0)
                .all(|m| v[m | 1 << i] == v[m | 1 << j])
            {
                out.push((i, j));
            }
        }
    }
    out
}
