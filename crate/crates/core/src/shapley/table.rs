use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::NeuronId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Asr,
    Acc,
    /// Any other game, e.g. the constructed games used in tests.
    Other,
}

/// Running sums of marginal contributions per player.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapleyTable {
    pub kind: MetricKind,
    pub players: Vec<NeuronId>,
    pub sums: Vec<f64>,
    pub counts: Vec<u64>,
    /// Completed iterations, aborted ones excluded.
    pub iterations: usize,
    /// `(iteration, reason)` for every walk that failed and was dropped.
    pub aborted: Vec<(usize, String)>,
}

impl ShapleyTable {
    /// Table for an abstract game; players are labelled `L0:i`.
    pub fn new(kind: MetricKind, n: usize) -> Self {
        Self::with_players(kind, (0..n).map(|i| NeuronId::new(0, i)).collect())
    }

    pub fn with_players(kind: MetricKind, players: Vec<NeuronId>) -> Self {
        let n = players.len();
        Self {
            kind,
            players,
            sums: vec![0.0; n],
            counts: vec![0; n],
            iterations: 0,
            aborted: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.sums.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sums.is_empty()
    }

    pub fn record(&mut self, player: usize, marginal: f64) {
        self.sums[player] += marginal;
        self.counts[player] += 1;
    }

    /// Apply one iteration's samples in walk order.
    pub fn record_walk(&mut self, samples: &[(usize, f64)]) {
        for &(p, v) in samples {
            self.record(p, v);
        }
        self.iterations += 1;
    }

    /// `sum / count`, or `None` for a player never sampled.
    pub fn estimate(&self, player: usize) -> Option<f64> {
        (self.counts[player] > 0).then(|| self.sums[player] / self.counts[player] as f64)
    }

    pub fn estimates(&self) -> Vec<Option<f64>> {
        (0..self.len()).map(|i| self.estimate(i)).collect()
    }

    pub fn visited(&self) -> usize {
        self.counts.iter().filter(|c| **c > 0).count()
    }

    /// Visited players by estimate descending (ties by smaller index), then
    /// unvisited players by index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut visited: Vec<(usize, f64)> = (0..self.len())
            .filter_map(|i| self.estimate(i).map(|e| (i, e)))
            .collect();
        visited.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut order: Vec<usize> = visited.into_iter().map(|(i, _)| i).collect();
        order.extend((0..self.len()).filter(|&i| self.counts[i] == 0));
        order
    }

    pub fn to_file<C: Serialize>(&self, config: &C) -> Result<TableFile> {
        Ok(TableFile {
            kind: self.kind,
            iterations: self.iterations,
            config: serde_json::to_value(config)?,
            neurons: (0..self.len())
                .map(|i| NeuronEntry {
                    layer: self.players[i].layer,
                    channel: self.players[i].channel,
                    sum: self.sums[i],
                    count: self.counts[i],
                    estimate: self.estimate(i),
                })
                .collect(),
            aborted: self.aborted.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronEntry {
    pub layer: usize,
    pub channel: usize,
    pub sum: f64,
    pub count: u64,
    pub estimate: Option<f64>,
}

/// On-disk form of a table, with the estimator configuration echoed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableFile {
    pub kind: MetricKind,
    pub iterations: usize,
    pub config: serde_json::Value,
    pub neurons: Vec<NeuronEntry>,
    #[serde(default)]
    pub aborted: Vec<(usize, String)>,
}

impl TableFile {
    pub fn into_table(self) -> Result<ShapleyTable> {
        let mut t = ShapleyTable::with_players(
            self.kind,
            self.neurons
                .iter()
                .map(|e| NeuronId::new(e.layer, e.channel))
                .collect(),
        );
        for (i, e) in self.neurons.iter().enumerate() {
            if (e.count == 0) != e.estimate.is_none() {
                return Err(Error::invalid(format!(
                    "neuron {i}: estimate inconsistent with count"
                )));
            }
            t.sums[i] = e.sum;
            t.counts[i] = e.count;
        }
        t.iterations = self.iterations;
        t.aborted = self.aborted;
        Ok(t)
    }
}
