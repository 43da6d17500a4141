use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{Layer, Mode};
use super::model::{cross_entropy, Model};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f32,
    /// L2 penalty added to every weight gradient.
    pub weight_decay: f32,
    /// Keep batch-norm in inference mode and leave its running statistics
    /// untouched. Used when fine-tuning on a handful of images.
    pub freeze_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 15,
            batch_size: 32,
            seed: 0,
            momentum: 0.9,
            weight_decay: 2e-3,
            freeze_bn: false,
        }
    }
}

pub(crate) fn batch_of(data: &Dataset, idx: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let samples: Vec<&[f32]> = idx.iter().map(|&i| data.image(i)).collect();
    let x = Tensor::stack(&samples, &data.image_shape())?;
    Ok((x, idx.iter().map(|&i| data.labels()[i]).collect()))
}

/// Minibatch SGD with momentum on mean cross-entropy. Deterministic for a
/// given seed; the input model is left untouched.
pub fn train_sgd(model: &Model<f32>, data: &Dataset, cfg: &TrainConfig) -> Result<Model<f32>> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.batch_size == 0 || !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(Error::invalid("batch_size must be positive and lr finite and >= 0"));
    }
    let mode = if cfg.freeze_bn { Mode::Eval } else { Mode::Train };
    let mut model = model.clone();
    let mut velocity: Vec<Vec<f32>> = model.parameters().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut recent = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            if mode == Mode::Train && idx.len() < 2 {
                continue;
            }
            let (x, labels) = batch_of(data, idx)?;
            let trace = model.trace(&x, mode)?;
            let (loss, d_logits) = cross_entropy(&trace.logits, &labels)?;
            recent.push(loss);
            if recent.len() > 8 {
                recent.remove(0);
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    stage: "train",
                    step,
                    trace: recent,
                });
            }
            let (grads, _) = model.backprop(&trace, Some(&d_logits), &[])?;
            if mode == Mode::Train {
                update_running_stats(&mut model, &trace)?;
            }
            model.attach_grads(grads)?;
            for (p, v) in model.parameters_mut().into_iter().zip(&mut velocity) {
                let g = p.take_grad().expect("gradient attached above");
                for ((w, v), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
                    *w -= cfg.lr * *v;
                }
            }
            step += 1;
        }
    }
    Ok(model)
}

fn update_running_stats(model: &mut Model<f32>, trace: &super::model::Trace<f32>) -> Result<()> {
    for (i, layer) in model.layers_mut().iter_mut().enumerate() {
        let Layer::BatchNorm(bn) = layer else { continue };
        let (mean, var) = trace
            .batch_stats(i)
            .ok_or_else(|| Error::invalid("train trace lacks batch statistics"))?;
        let x = &trace.inputs[i];
        let count = (x.len() / bn.channels()) as f32;
        let unbias = count / (count - 1.0);
        let m = bn.momentum;
        for (r, &b) in bn.running_mean.data_mut().iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in bn.running_var.data_mut().iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
    }
    Ok(())
}
