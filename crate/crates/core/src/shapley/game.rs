use crate::error::{Error, Result};

/// A cooperative game: a metric over coalitions of alive players.
pub trait CoalitionGame: Sync {
    fn player_count(&self) -> usize;

    /// Metric of the coalition given by `alive` (one flag per player).
    fn value(&self, alive: &[bool]) -> Result<f64>;

    /// Start a removal walk from the grand coalition. The default
    /// re-evaluates every coalition from scratch; games with cheaper
    /// incremental updates override it.
    fn walker(&self) -> Result<Box<dyn Walker + '_>> {
        Ok(Box::new(SubsetWalker::new(self)?))
    }
}

/// Removes players one at a time, tracking the current metric.
pub trait Walker {
    fn value(&self) -> f64;

    /// Remove `player` and return the metric of what remains.
    fn remove(&mut self, player: usize) -> Result<f64>;
}

pub struct SubsetWalker<'a, G: ?Sized> {
    game: &'a G,
    alive: Vec<bool>,
    value: f64,
}

impl<'a, G: CoalitionGame + ?Sized> SubsetWalker<'a, G> {
    pub fn new(game: &'a G) -> Result<Self> {
        let alive = vec![true; game.player_count()];
        let value = game.value(&alive)?;
        Ok(Self { game, alive, value })
    }
}

impl<G: CoalitionGame + ?Sized> Walker for SubsetWalker<'_, G> {
    fn value(&self) -> f64 {
        self.value
    }

    fn remove(&mut self, player: usize) -> Result<f64> {
        let slot = self
            .alive
            .get_mut(player)
            .ok_or_else(|| Error::invalid(format!("player {player} out of range")))?;
        *slot = false;
        self.value = self.game.value(&self.alive)?;
        Ok(self.value)
    }
}

/// Game defined by a closure over alive flags.
pub struct FnGame<F> {
    players: usize,
    metric: F,
}

impl<F> FnGame<F>
where
    F: Fn(&[bool]) -> f64 + Sync,
{
    pub fn new(players: usize, metric: F) -> Self {
        Self { players, metric }
    }
}

impl<F> CoalitionGame for FnGame<F>
where
    F: Fn(&[bool]) -> f64 + Sync,
{
    fn player_count(&self) -> usize {
        self.players
    }

    fn value(&self, alive: &[bool]) -> Result<f64> {
        if alive.len() != self.players {
            return Err(Error::invalid(format!(
                "{} flags for {} players",
                alive.len(),
                self.players
            )));
        }
        Ok((self.metric)(alive))
    }
}
