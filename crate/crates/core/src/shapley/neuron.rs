use super::game::{CoalitionGame, Walker};
use super::table::MetricKind;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{argmax, Mode, Model};
use crate::tensor::Tensor;

/// The score a neuron game measures.
#[derive(Clone, Copy, Debug)]
pub enum Metric<'a> {
    /// Fraction of triggered non-target images sent to `target`.
    Asr { triggered: &'a Dataset, target: usize },
    /// Accuracy on clean images.
    Acc { data: &'a Dataset },
}

impl Metric<'_> {
    pub fn kind(&self) -> MetricKind {
        match self {
            Metric::Asr { .. } => MetricKind::Asr,
            Metric::Acc { .. } => MetricKind::Acc,
        }
    }
}

/// Coalition game over the prunable neurons of a model: a coalition is
/// the set of neurons left alive.
pub struct NeuronGame<'a> {
    model: &'a Model,
    images: Tensor,
    /// Class each image must land in to count as a success.
    wanted: Vec<usize>,
}

impl<'a> NeuronGame<'a> {
    pub fn new(model: &'a Model, metric: Metric<'_>) -> Result<Self> {
        let (data, keep, wanted): (&Dataset, Vec<usize>, Vec<usize>) = match metric {
            Metric::Asr { triggered, target } => {
                if target >= model.class_count() {
                    return Err(Error::invalid(format!("target class {target} out of range")));
                }
                let keep: Vec<usize> = (0..triggered.len())
                    .filter(|&i| triggered.labels()[i] != target)
                    .collect();
                let n = keep.len();
                (triggered, keep, vec![target; n])
            }
            Metric::Acc { data } => {
                let keep: Vec<usize> = (0..data.len()).collect();
                (data, keep, data.labels().to_vec())
            }
        };
        if keep.is_empty() {
            return Err(Error::invalid("metric dataset has no usable images"));
        }
        let images = data.subset(&keep)?.images().clone();
        Ok(Self {
            model,
            images,
            wanted,
        })
    }

    fn score(&self, logits: &Tensor) -> f64 {
        let k = logits.sample_len();
        let hits = logits
            .data()
            .chunks(k)
            .zip(&self.wanted)
            .filter(|(row, w)| argmax(row) == **w)
            .count();
        hits as f64 / self.wanted.len() as f64
    }
}

impl CoalitionGame for NeuronGame<'_> {
    fn player_count(&self) -> usize {
        self.model.neuron_count()
    }

    fn value(&self, alive: &[bool]) -> Result<f64> {
        let base = self.model.alive_flags();
        if alive.len() != base.len() {
            return Err(Error::invalid(format!(
                "{} flags for {} neurons",
                alive.len(),
                base.len()
            )));
        }
        let flags: Vec<bool> = base.iter().zip(alive).map(|(b, a)| *b && *a).collect();
        let mut m = self.model.clone();
        m.set_alive_flags(&flags)?;
        Ok(self.score(&m.forward(&self.images)?))
    }

    fn walker(&self) -> Result<Box<dyn Walker + '_>> {
        Ok(Box::new(NeuronWalker::new(self)?))
    }
}

/// Keeps every layer's output for the current coalition; removing a
/// neuron recomputes only the layers from its mask site onward.
struct NeuronWalker<'g, 'a> {
    game: &'g NeuronGame<'a>,
    model: Model,
    neurons: Vec<crate::nn::NeuronId>,
    outputs: Vec<Tensor>,
    value: f64,
}

impl<'g, 'a> NeuronWalker<'g, 'a> {
    fn new(game: &'g NeuronGame<'a>) -> Result<Self> {
        let model = game.model.clone();
        let mut outputs: Vec<Tensor> = Vec::with_capacity(model.layers().len());
        for (i, layer) in model.layers().iter().enumerate() {
            let input = outputs.last().unwrap_or(&game.images);
            let out = layer.forward(input, Mode::Eval, model.site_mask(i))?.0;
            outputs.push(out);
        }
        let value = game.score(outputs.last().expect("model has layers"));
        Ok(Self {
            game,
            neurons: model.neurons(),
            model,
            outputs,
            value,
        })
    }
}

impl Walker for NeuronWalker<'_, '_> {
    fn value(&self) -> f64 {
        self.value
    }

    fn remove(&mut self, player: usize) -> Result<f64> {
        let id = *self
            .neurons
            .get(player)
            .ok_or_else(|| Error::invalid(format!("player {player} out of range")))?;
        if !self.model.is_alive(id)? {
            return Ok(self.value);
        }
        self.model.set_alive(id, false)?;
        let site = self.model.mask_site(id.layer).expect("prunable layer");
        for i in site..self.model.layers().len() {
            let input = if i == 0 {
                &self.game.images
            } else {
                &self.outputs[i - 1]
            };
            let out = self.model.layers()[i]
                .forward(input, Mode::Eval, self.model.site_mask(i))?
                .0;
            self.outputs[i] = out;
        }
        self.value = self.game.score(self.outputs.last().expect("model has layers"));
        Ok(self.value)
    }
}
