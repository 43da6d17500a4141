use serde::{Deserialize, Serialize};

use super::table::ShapleyTable;
use crate::error::{Error, Result};
use crate::nn::NeuronId;

/// Player indices of the `k` largest estimates, ties broken by smaller
/// index. Unvisited players are never selected.
pub fn top_k_players(table: &ShapleyTable, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let visited = table.visited();
    if k > visited {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {visited} visited players"
        )));
    }
    Ok(table.ranking()[..k].to_vec())
}

pub fn top_k(table: &ShapleyTable, k: usize) -> Result<Vec<NeuronId>> {
    Ok(top_k_players(table, k)?
        .into_iter()
        .map(|i| table.players[i])
        .collect())
}

/// Player indices of the `l` smallest visited estimates, ties broken by
/// smaller index. Fewer are returned when fewer players were visited.
pub fn bottom_l_players(table: &ShapleyTable, l: usize) -> Vec<usize> {
    let mut visited: Vec<(usize, f64)> = (0..table.len())
        .filter_map(|i| table.estimate(i).map(|e| (i, e)))
        .collect();
    visited.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    visited.into_iter().take(l).map(|(i, _)| i).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSelection {
    pub neurons: Vec<NeuronId>,
    /// Set when fewer than `k` neurons survived the intersection.
    pub shortfall: bool,
}

/// Neurons in both the ASR top-k and the Acc bottom-l, in ASR rank order.
pub fn mixture_select(
    asr: &ShapleyTable,
    acc: &ShapleyTable,
    k: usize,
    bottom_l: usize,
) -> Result<MixtureSelection> {
    if asr.players != acc.players {
        return Err(Error::invalid("ASR and Acc tables cover different neurons"));
    }
    let low = bottom_l_players(acc, bottom_l);
    let neurons: Vec<NeuronId> = top_k_players(asr, k)?
        .into_iter()
        .filter(|i| low.contains(i))
        .map(|i| asr.players[i])
        .collect();
    Ok(MixtureSelection {
        shortfall: neurons.len() < k,
        neurons,
    })
}
