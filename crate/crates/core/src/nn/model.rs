use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layer::{BatchNorm, Cache, Conv2d, Dense, Layer, Mode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A prunable unit: one output channel of a conv layer or one output unit
/// of a dense layer, addressed by the layer's index in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub channel: usize,
}

impl NeuronId {
    pub fn new(layer: usize, channel: usize) -> Self {
        Self { layer, channel }
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}:{}", self.layer, self.channel)
    }
}

/// Mask for one prunable layer, applied at the ReLU (`site`) that follows it.
#[derive(Clone, Debug, PartialEq)]
struct MaskGroup {
    layer: usize,
    site: usize,
    alive: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    layers: Vec<Layer<T>>,
    input_shape: Vec<usize>,
    class_count: usize,
    groups: Vec<MaskGroup>,
}

/// Activations recorded by a forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    /// Input of every layer, in order.
    pub inputs: Vec<Tensor<T>>,
    pub caches: Vec<Cache<T>>,
    pub logits: Tensor<T>,
    pub mode: Mode,
}

impl<T: Scalar> Trace<T> {
    /// Batch mean and biased variance seen by the batch-norm layer at
    /// `layer` (train-mode traces only).
    pub fn batch_stats(&self, layer: usize) -> Option<(&[T], &[T])> {
        match self.caches.get(layer)? {
            Cache::Norm {
                batch_stats: Some((m, v)),
                ..
            } => Some((m, v)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Gradients<T> {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// One tensor per trainable parameter, in [`Model::parameters`] order.
    pub params: Vec<Tensor<T>>,
    pub input: Tensor<T>,
}

/// Mean cross-entropy of `logits` `[n, k]` and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    if logits.rank() != 2 || logits.batch() != labels.len() {
        return Err(Error::shape(format!(
            "logits {:?} against {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = Tensor::zeros([n, k]);
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.sample(i).iter().map(|v| v.as_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        total += z.ln() + max - row[label];
        for (j, g) in grad.sample_mut(i).iter_mut().enumerate() {
            let p = (row[j] - max).exp() / z;
            let target = if j == label { 1.0 } else { 0.0 };
            *g = T::lit((p - target) / n as f64);
        }
    }
    Ok((total / n as f64, grad))
}

impl<T: Scalar> Model<T> {
    /// Build a model after checking that consecutive layers fit together and
    /// the last layer emits `class_count` logits.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer<T>>, class_count: usize) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::shape(format!("bad input shape {input_shape:?}")));
        }
        if class_count == 0 {
            return Err(Error::invalid("class_count must be positive"));
        }
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::shape(format!("layer {i}: {e}")))?;
            if let Layer::BatchNorm(bn) = layer {
                if bn.running_var.data().iter().any(|v| !(*v > T::zero())) {
                    return Err(Error::invalid(format!(
                        "layer {i}: batch-norm running variance must be positive"
                    )));
                }
            }
        }
        if shape != [class_count] {
            return Err(Error::shape(format!(
                "model emits {shape:?}, expected [{class_count}]"
            )));
        }
        let groups = Self::mask_groups(&layers);
        Ok(Self {
            layers,
            input_shape,
            class_count,
            groups,
        })
    }

    /// Conv/dense layers whose output reaches a ReLU, skipping batch-norm only.
    fn mask_groups(layers: &[Layer<T>]) -> Vec<MaskGroup> {
        let mut groups = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            let width = match layer {
                Layer::Dense(d) => d.out_features(),
                Layer::Conv2d(c) => c.out_channels(),
                _ => continue,
            };
            let site = layers[i + 1..]
                .iter()
                .position(|l| !matches!(l, Layer::BatchNorm(_)))
                .map(|p| i + 1 + p);
            if let Some(site) = site.filter(|&s| matches!(layers[s], Layer::Relu)) {
                groups.push(MaskGroup {
                    layer: i,
                    site,
                    alive: vec![true; width],
                });
            }
        }
        groups
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Every prunable neuron, ordered by layer then channel. The position in
    /// this list is the neuron's player index in attribution games.
    pub fn neurons(&self) -> Vec<NeuronId> {
        self.groups
            .iter()
            .flat_map(|g| (0..g.alive.len()).map(move |c| NeuronId::new(g.layer, c)))
            .collect()
    }

    pub fn neuron_count(&self) -> usize {
        self.groups.iter().map(|g| g.alive.len()).sum()
    }

    fn group(&self, id: NeuronId) -> Result<usize> {
        let g = self
            .groups
            .iter()
            .position(|g| g.layer == id.layer)
            .ok_or_else(|| Error::invalid(format!("layer {} has no prunable neurons", id.layer)))?;
        if id.channel >= self.groups[g].alive.len() {
            return Err(Error::invalid(format!(
                "neuron {id} out of range ({} channels)",
                self.groups[g].alive.len()
            )));
        }
        Ok(g)
    }

    pub fn is_alive(&self, id: NeuronId) -> Result<bool> {
        let g = self.group(id)?;
        Ok(self.groups[g].alive[id.channel])
    }

    pub fn set_alive(&mut self, id: NeuronId, alive: bool) -> Result<()> {
        let g = self.group(id)?;
        self.groups[g].alive[id.channel] = alive;
        Ok(())
    }

    pub fn dead_neurons(&self) -> Vec<NeuronId> {
        self.neurons()
            .into_iter()
            .filter(|&id| !self.is_alive(id).unwrap_or(true))
            .collect()
    }

    /// Alive flags in [`Model::neurons`] order.
    pub fn alive_flags(&self) -> Vec<bool> {
        self.groups.iter().flat_map(|g| g.alive.iter().copied()).collect()
    }

    pub(crate) fn set_alive_flags(&mut self, flags: &[bool]) -> Result<()> {
        if flags.len() != self.neuron_count() {
            return Err(Error::invalid(format!(
                "{} mask bits for {} neurons",
                flags.len(),
                self.neuron_count()
            )));
        }
        let mut it = flags.iter();
        for g in &mut self.groups {
            for a in &mut g.alive {
                *a = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Copy of the model with `dead` switched off on top of the current mask.
    pub fn apply_prune_mask(&self, dead: &[NeuronId]) -> Result<Self> {
        let mut out = self.clone();
        for &id in dead {
            out.set_alive(id, false)?;
        }
        Ok(out)
    }

    /// Channel mask applied at the output of `layer`, when it is a mask site.
    pub fn site_mask(&self, layer: usize) -> Option<&[bool]> {
        self.groups
            .iter()
            .find(|g| g.site == layer)
            .map(|g| g.alive.as_slice())
    }

    /// Index of the ReLU where neurons of prunable `layer` are masked.
    pub fn mask_site(&self, layer: usize) -> Option<usize> {
        self.groups.iter().find(|g| g.layer == layer).map(|g| g.site)
    }

    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            input_shape: self.input_shape.clone(),
            class_count: self.class_count,
            groups: self.groups.clone(),
        }
    }

    fn check_batch(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(format!(
                "batch {:?} does not match model input [N, {}]",
                x.shape(),
                self.input_shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        Ok(())
    }

    /// Inference-mode logits `[batch, class_count]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(x)?;
        self.forward_from(0, x.clone())
    }

    /// Run layers `start..` in inference mode on an activation that is the
    /// input of layer `start`.
    pub fn forward_from(&self, start: usize, mut act: Tensor<T>) -> Result<Tensor<T>> {
        for (i, layer) in self.layers.iter().enumerate().skip(start) {
            act = layer.forward(&act, Mode::Eval, self.site_mask(i))?.0;
        }
        Ok(act)
    }

    pub fn trace(&self, x: &Tensor<T>, mode: Mode) -> Result<Trace<T>> {
        self.check_batch(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut act = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, cache) = layer.forward(&act, mode, self.site_mask(i))?;
            inputs.push(act);
            caches.push(cache);
            act = next;
        }
        Ok(Trace {
            inputs,
            caches,
            logits: act,
            mode,
        })
    }

    /// Backpropagate `d_logits` through a recorded trace. `injections` add
    /// extra gradient w.r.t. the *input* of the given layer, for losses
    /// defined on intermediate activations. Returns parameter gradients and
    /// the gradient w.r.t. the model input.
    pub fn backprop(
        &self,
        trace: &Trace<T>,
        d_logits: Option<&Tensor<T>>,
        injections: &[(usize, &Tensor<T>)],
    ) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let mut grad = match d_logits {
            Some(g) if g.shape() == trace.logits.shape() => g.clone(),
            Some(g) => {
                return Err(Error::shape(format!(
                    "logit gradient {:?} vs logits {:?}",
                    g.shape(),
                    trace.logits.shape()
                )))
            }
            None => Tensor::zeros(trace.logits.shape().to_vec()),
        };
        let mut per_layer: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.inputs[i];
            let (dx, dparams) = layer.backward(x, &trace.caches[i], &grad, self.site_mask(i));
            per_layer[i] = dparams;
            grad = dx;
            for (at, extra) in injections.iter().filter(|(at, _)| *at == i) {
                if extra.shape() != grad.shape() {
                    return Err(Error::shape(format!(
                        "injected gradient {:?} at layer {at} vs activation {:?}",
                        extra.shape(),
                        grad.shape()
                    )));
                }
                for (g, e) in grad.data_mut().iter_mut().zip(extra.data()) {
                    *g += *e;
                }
            }
        }
        Ok((per_layer.into_iter().flatten().collect(), grad))
    }

    /// Mean cross-entropy and gradients for every parameter and the input.
    pub fn backward(&self, x: &Tensor<T>, labels: &[usize], mode: Mode) -> Result<Gradients<T>> {
        let trace = self.trace(x, mode)?;
        let (loss, d_logits) = cross_entropy(&trace.logits, labels)?;
        let (params, input) = self.backprop(&trace, Some(&d_logits), &[])?;
        Ok(Gradients {
            loss,
            params,
            input,
        })
    }

    pub fn loss(&self, x: &Tensor<T>, labels: &[usize], mode: Mode) -> Result<f64> {
        let trace = self.trace(x, mode)?;
        Ok(cross_entropy(&trace.logits, labels)?.0)
    }

    /// Store gradients in the `grad` buffers of the parameters.
    pub fn attach_grads(&mut self, grads: Vec<Tensor<T>>) -> Result<()> {
        let params = self.parameters_mut();
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.into_iter().zip(grads) {
            p.set_grad(g.into_data())?;
        }
        Ok(())
    }

    /// Argmax class per sample, evaluated in bounded chunks.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        self.check_batch(x)?;
        const CHUNK: usize = 256;
        let mut out = Vec::with_capacity(x.batch());
        let per = x.sample_len();
        for start in (0..x.batch()).step_by(CHUNK) {
            let end = (start + CHUNK).min(x.batch());
            let mut shape = x.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(shape, x.data()[start * per..end * per].to_vec())?;
            let logits = self.forward(&chunk)?;
            out.extend((0..logits.batch()).map(|i| argmax(logits.sample(i))));
        }
        Ok(out)
    }
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn he_tensor<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

pub fn dense<T: Scalar>(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Layer<T> {
    Layer::Dense(Dense {
        weight: he_tensor(&[outputs, inputs], inputs, rng),
        bias: Tensor::zeros([outputs]),
    })
}

pub fn conv<T: Scalar>(inputs: usize, outputs: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Layer<T> {
    Layer::Conv2d(Conv2d {
        weight: he_tensor(&[outputs, inputs, kernel, kernel], inputs * kernel * kernel, rng),
        bias: Tensor::zeros([outputs]),
        stride: 1,
        padding: kernel / 2,
    })
}

impl Model<f32> {
    /// The desk architecture:
    /// conv(16)-BN-ReLU-pool-conv(32)-BN-ReLU-pool-dense(64)-ReLU-dense(K).
    pub fn reference(input_shape: [usize; 3], class_count: usize, seed: u64) -> Result<Self> {
        let [c, h, w] = input_shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat = 32 * (h / 4) * (w / 4);
        let layers = vec![
            conv(c, 16, 3, &mut rng),
            Layer::BatchNorm(BatchNorm::new(16)),
            Layer::Relu,
            Layer::MaxPool { size: 2 },
            conv(16, 32, 3, &mut rng),
            Layer::BatchNorm(BatchNorm::new(32)),
            Layer::Relu,
            Layer::MaxPool { size: 2 },
            Layer::Flatten,
            dense(flat, 64, &mut rng),
            Layer::Relu,
            dense(64, class_count, &mut rng),
        ];
        Self::new(input_shape.to_vec(), layers, class_count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_model(n: usize) -> Model<f32> {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        let layers = vec![Layer::Dense(Dense {
            weight: Tensor::new([n, n], w).unwrap(),
            bias: Tensor::zeros([n]),
        })];
        Model::new(vec![n], layers, n).unwrap()
    }

    #[test]
    fn identity_dense_returns_input() {
        let m = identity_model(4);
        let x = Tensor::new([1, 4], vec![0.5, -1.0, 2.0, 3.5]).unwrap();
        assert_eq!(m.forward(&x).unwrap().data(), x.data());
        assert_eq!(m.neuron_count(), 0);
    }

    #[test]
    fn uniform_logits_give_log_k_loss() {
        let logits = Tensor::<f64>::zeros([3, 7]);
        let (loss, _) = cross_entropy(&logits, &[0, 3, 6]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&logits, &[0, 3, 7]).is_err());
    }

    #[test]
    fn reference_has_112_prunable_neurons() {
        let m = Model::reference([3, 16, 16], 10, 1).unwrap();
        assert_eq!(m.neuron_count(), 112);
        assert_eq!(m.mask_site(0), Some(2));
        assert_eq!(m.mask_site(4), Some(6));
        assert_eq!(m.mask_site(9), Some(10));
        assert_eq!(m.mask_site(11), None);
    }

    #[test]
    fn rejects_wrong_batch_shape() {
        let m = Model::reference([3, 16, 16], 10, 1).unwrap();
        let err = m.forward(&Tensor::zeros([2, 1, 16, 16])).unwrap_err();
        assert!(err.to_string().contains("does not match model input"));
    }

    #[test]
    fn rejects_incompatible_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layers: Vec<Layer<f32>> = vec![dense(4, 3, &mut rng), dense(4, 2, &mut rng)];
        assert!(Model::new(vec![4], layers, 2).is_err());
        let layers: Vec<Layer<f32>> = vec![dense(4, 3, &mut rng)];
        assert!(Model::new(vec![4], layers, 2).is_err());
    }

    #[test]
    fn invalid_neuron_is_rejected() {
        let m = Model::reference([3, 16, 16], 10, 1).unwrap();
        assert!(m.apply_prune_mask(&[NeuronId::new(0, 16)]).is_err());
        assert!(m.apply_prune_mask(&[NeuronId::new(1, 0)]).is_err());
        assert!(m.apply_prune_mask(&[NeuronId::new(11, 0)]).is_err());
    }
}
