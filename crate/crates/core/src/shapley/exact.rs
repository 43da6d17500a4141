use super::game::CoalitionGame;
use crate::error::{Error, Result};

pub const MAX_EXACT_PLAYERS: usize = 12;

/// Exact Shapley values by enumerating every coalition:
/// `φ_i = Σ_{C ⊆ N∖{i}} |C|!(n−|C|−1)!/n! · (m(C ∪ {i}) − m(C))`.
pub fn exact_shapley(game: &dyn CoalitionGame) -> Result<Vec<f64>> {
    let n = game.player_count();
    if n == 0 || n > MAX_EXACT_PLAYERS {
        return Err(Error::invalid(format!(
            "exact enumeration supports 1..={MAX_EXACT_PLAYERS} players, got {n}"
        )));
    }
    let subsets = 1usize << n;
    let mut values = Vec::with_capacity(subsets);
    let mut alive = vec![false; n];
    for mask in 0..subsets {
        for (i, a) in alive.iter_mut().enumerate() {
            *a = mask >> i & 1 == 1;
        }
        values.push(game.value(&alive)?);
    }
    let fact: Vec<f64> = (0..=n)
        .scan(1.0, |acc, k| {
            if k > 0 {
                *acc *= k as f64;
            }
            Some(*acc)
        })
        .collect();
    let weight: Vec<f64> = (0..n).map(|c| fact[c] * fact[n - c - 1] / fact[n]).collect();
    let mut phi = vec![0.0; n];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        for mask in (0..subsets).filter(|m| m & bit == 0) {
            let c = mask.count_ones() as usize;
            *p += weight[c] * (values[mask | bit] - values[mask]);
        }
    }
    Ok(phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapley::FnGame;

    fn count(alive: &[bool]) -> usize {
        alive.iter().filter(|a| **a).count()
    }

    #[test]
    fn additive_game_returns_weights() {
        let w = [0.3, -0.1, 0.25, 0.05];
        let g = FnGame::new(4, |a: &[bool]| (0..4).filter(|&i| a[i]).map(|i| w[i]).sum());
        let phi = exact_shapley(&g).unwrap();
        for (p, w) in phi.iter().zip(w) {
            assert!((p - w).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_majority_and_glove() {
        let sym = FnGame::new(3, |a: &[bool]| count(a) as f64 / 3.0);
        for p in exact_shapley(&sym).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let majority = FnGame::new(3, |a: &[bool]| if count(a) >= 2 { 1.0 } else { 0.0 });
        for p in exact_shapley(&majority).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let glove = FnGame::new(3, |a: &[bool]| {
            if a[0] && (a[1] || a[2]) {
                1.0
            } else {
                0.0
            }
        });
        let phi = exact_shapley(&glove).unwrap();
        assert!((phi[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((phi[1] - 1.0 / 6.0).abs() < 1e-12);
        assert!((phi[2] - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn size_guard() {
        let g = FnGame::new(13, |_: &[bool]| 0.0);
        assert!(exact_shapley(&g).is_err());
        let g = FnGame::new(0, |_: &[bool]| 0.0);
        assert!(exact_shapley(&g).is_err());
    }
}
