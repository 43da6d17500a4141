//! Neuron attribution by Shapley values.
//!
//! Each prunable neuron is a player; a coalition is the set of neurons left
//! alive and its worth is a metric such as attack success rate. Estimates
//! come from random removal orders: walking an order from the full model
//! and recording the metric drop at each step yields one marginal sample per
//! player. Walks stop early once the metric falls below a threshold, and the
//! players behind the stop get no sample at all.

mod estimate;
mod exact;
mod game;
mod neuron;
mod policy;
mod select;
mod table;

pub use estimate::{
    estimate_game, estimate_shapley, walk_permutation, DiscardMode, ShapleyConfig,
};
pub use exact::{exact_shapley, MAX_EXACT_PLAYERS};
pub use game::{CoalitionGame, FnGame, SubsetWalker, Walker};
pub use neuron::{Metric, NeuronGame};
pub use policy::{iteration_rng, sample_permutation, EpsilonStep, PermutationPolicy};
pub use select::{bottom_l_players, mixture_select, top_k, top_k_players, MixtureSelection};
pub use table::{MetricKind, NeuronEntry, ShapleyTable, TableFile};
