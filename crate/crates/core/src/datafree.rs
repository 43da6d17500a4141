//! Surrogate images synthesised from a trained model alone.
//!
//! Starting from noise, a labelled batch is optimised so that the model
//! classifies it as its labels, the statistics it induces at every
//! batch-norm input match the statistics recorded during training, and the
//! images stay smooth and small.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io;
use crate::nn::layer::channel_stats;
use crate::nn::{cross_entropy, Layer, Mode, Model, Trace};
use crate::optim::Adam;

pub use crate::pipeline::datafree_mitigate;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoveryConfig {
    /// Cross-entropy weight.
    pub alpha: f64,
    /// Batch-norm matching weight.
    pub beta: f64,
    /// Image prior weight.
    pub gamma: f64,
    /// Total-variation weight inside the prior.
    pub alpha1: f64,
    /// Squared-norm weight inside the prior.
    pub alpha2: f64,
    pub per_class: usize,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            // the matching term is an absolute squared difference and the
            // recorded variances are small, so it needs a large weight
            beta: 1000.0,
            gamma: 1.0,
            alpha1: 1e-2,
            alpha2: 1e-4,
            per_class: 4,
            iterations: 300,
            lr: 0.05,
            seed: 0,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.alpha, self.beta, self.gamma, self.alpha1, self.alpha2];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if self.per_class == 0 || self.iterations == 0 {
            return Err(Error::invalid("per_class and iterations must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Indices of the batch-norm layers of `model`.
pub fn bn_layers<T: Scalar>(model: &Model<T>) -> Vec<usize> {
    (0..model.layers().len())
        .filter(|&i| matches!(model.layers()[i], Layer::BatchNorm(_)))
        .collect()
}

fn recorded<T: Scalar>(model: &Model<T>, layer: usize) -> (Vec<f64>, Vec<f64>) {
    match &model.layers()[layer] {
        Layer::BatchNorm(bn) => (
            bn.running_mean.data().iter().map(|v| v.as_f64()).collect(),
            bn.running_var.data().iter().map(|v| v.as_f64()).collect(),
        ),
        _ => unreachable!("not a batch-norm layer"),
    }
}

fn check_bn_batch<T: Scalar>(model: &Model<T>, x: &Tensor<T>) -> Result<Vec<usize>> {
    let layers = bn_layers(model);
    if layers.is_empty() {
        return Err(Error::invalid("model has no batch-norm layers"));
    }
    if x.batch() < 2 {
        return Err(Error::invalid("batch-norm matching needs at least 2 images"));
    }
    Ok(layers)
}

/// Matching loss on a recorded eval-mode trace and the gradients to inject
/// at each batch-norm input. Batch variance is the biased one.
fn bn_terms<T: Scalar>(
    model: &Model<T>,
    trace: &Trace<T>,
    layers: &[usize],
) -> (f64, Vec<(usize, Tensor<T>)>) {
    let mut loss = 0.0;
    let mut injections = Vec::with_capacity(layers.len());
    for &l in layers {
        let x = &trace.inputs[l];
        let (mean, var) = channel_stats(x);
        let (rm, rv) = recorded(model, l);
        let shape = x.shape();
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let count = (n * s) as f64;
        let mut g = Tensor::zeros(shape.to_vec());
        for ch in 0..c {
            let dm = mean[ch] - rm[ch];
            let dv = var[ch] - rv[ch];
            loss += dm * dm + dv * dv;
            for b in 0..n {
                let base = (b * c + ch) * s;
                for k in 0..s {
                    let xv = x.data()[base + k].as_f64();
                    g.data_mut()[base + k] =
                        T::lit(2.0 * dm / count + 4.0 * dv * (xv - mean[ch]) / count);
                }
            }
        }
        injections.push((l, g));
    }
    (loss, injections)
}

/// `Σ_layers Σ_channels (μ(x) − μ)² + (σ²(x) − σ²)²` at every batch-norm
/// input, against the running statistics recorded in training.
pub fn bn_loss<T: Scalar>(model: &Model<T>, x: &Tensor<T>) -> Result<f64> {
    let layers = check_bn_batch(model, x)?;
    let trace = model.trace(x, Mode::Eval)?;
    Ok(bn_terms(model, &trace, &layers).0)
}

/// [`bn_loss`] and its gradient w.r.t. `x`.
pub fn bn_loss_grad<T: Scalar>(model: &Model<T>, x: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let layers = check_bn_batch(model, x)?;
    let trace = model.trace(x, Mode::Eval)?;
    let (loss, inj) = bn_terms(model, &trace, &layers);
    let refs: Vec<(usize, &Tensor<T>)> = inj.iter().map(|(l, g)| (*l, g)).collect();
    let (_, dx) = model.backprop(&trace, None, &refs)?;
    Ok((loss, dx))
}

/// Total variation (squared horizontal and vertical neighbour differences)
/// and squared L2 norm, each summed per image and averaged over the batch.
/// Returns `(L_V, L_norm)` and the gradient of `alpha1·L_V + alpha2·L_norm`.
pub fn prior_terms<T: Scalar>(x: &Tensor<T>, alpha1: f64, alpha2: f64) -> Result<(f64, f64, Tensor<T>)> {
    if x.rank() != 4 {
        return Err(Error::shape(format!("images must be [n, c, h, w], got {:?}", x.shape())));
    }
    let shape = x.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let inv_n = 1.0 / n as f64;
    let d = x.data();
    let mut tv = 0.0;
    let mut norm = 0.0;
    let mut g = vec![0.0f64; d.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h {
            for xx in 0..w {
                let i = base + y * w + xx;
                let v = d[i].as_f64();
                norm += v * v;
                g[i] += alpha2 * 2.0 * v * inv_n;
                for j in [
                    (xx + 1 < w).then(|| i + 1),
                    (y + 1 < h).then(|| i + w),
                ]
                .into_iter()
                .flatten()
                {
                    let diff = d[j].as_f64() - v;
                    tv += diff * diff;
                    g[j] += alpha1 * 2.0 * diff * inv_n;
                    g[i] -= alpha1 * 2.0 * diff * inv_n;
                }
            }
        }
    }
    let grad = Tensor::new(shape.to_vec(), g.into_iter().map(T::lit).collect())?;
    Ok((tv * inv_n, norm * inv_n, grad))
}

/// `alpha1·L_V + alpha2·L_norm`
pub fn prior_loss<T: Scalar>(x: &Tensor<T>, alpha1: f64, alpha2: f64) -> Result<f64> {
    let (tv, norm, _) = prior_terms(x, alpha1, alpha2)?;
    Ok(alpha1 * tv + alpha2 * norm)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub bn: f64,
    pub prior: f64,
    pub total: f64,
}

/// `alpha·CE + beta·L_bn + gamma·L_prior` and its gradient w.r.t. `x`.
pub fn recovery_loss<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &RecoveryConfig,
) -> Result<(LossParts, Tensor<T>)> {
    let layers = check_bn_batch(model, x)?;
    let trace = model.trace(x, Mode::Eval)?;
    let (ce, mut d_logits) = cross_entropy(&trace.logits, labels)?;
    for v in d_logits.data_mut() {
        *v *= T::lit(cfg.alpha);
    }
    let (bn, mut inj) = bn_terms(model, &trace, &layers);
    for (_, g) in &mut inj {
        for v in g.data_mut() {
            *v *= T::lit(cfg.beta);
        }
    }
    let refs: Vec<(usize, &Tensor<T>)> = inj.iter().map(|(l, g)| (*l, g)).collect();
    let (_, mut dx) = model.backprop(&trace, Some(&d_logits), &refs)?;
    let (tv, norm, g_prior) = prior_terms(x, cfg.alpha1, cfg.alpha2)?;
    for (d, p) in dx.data_mut().iter_mut().zip(g_prior.data()) {
        *d += T::lit(cfg.gamma) * *p;
    }
    let prior = cfg.alpha1 * tv + cfg.alpha2 * norm;
    let parts = LossParts {
        ce,
        bn,
        prior,
        total: cfg.alpha * ce + cfg.beta * bn + cfg.gamma * prior,
    };
    Ok((parts, dx))
}

#[derive(Clone, Debug)]
pub struct RecoveredBatch {
    pub data: Dataset,
    /// Loss parts before every optimiser step.
    pub trace: Vec<LossParts>,
    /// Loss parts of the returned images.
    pub final_loss: LossParts,
}

/// Optimise a noise batch, `per_class` images for every class, against the
/// recovery loss. Pixels are clamped to `[0, 1]` after each step.
pub fn recover_images(model: &Model, cfg: &RecoveryConfig) -> Result<RecoveredBatch> {
    cfg.validate()?;
    let k = model.class_count();
    let labels: Vec<usize> = (0..cfg.per_class).flat_map(|_| 0..k).collect();
    let mut shape = vec![labels.len()];
    shape.extend_from_slice(model.input_shape());
    let len: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = Tensor::new(shape, (0..len).map(|_| rng.random::<f32>()).collect())?;
    let mut adam = Adam::new(len);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let (parts, grad) = recovery_loss(model, &x, &labels, cfg)?;
        if !parts.total.is_finite() {
            return Err(Error::NonFinite {
                stage: "recover",
                step,
                trace: trace.iter().map(|p: &LossParts| p.total).collect(),
            });
        }
        trace.push(parts);
        adam.step(x.data_mut(), grad.data(), cfg.lr);
        for v in x.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    let (final_loss, _) = recovery_loss(model, &x, &labels, cfg)?;
    Ok(RecoveredBatch {
        data: Dataset::new(x, labels, k)?,
        trace,
        final_loss,
    })
}

/// Per-channel agreement between a batch's statistics at one batch-norm
/// input and the recorded ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStatError {
    pub layer: usize,
    pub channel: usize,
    /// `|μ(x) − μ| / σ`
    pub mean: f64,
    /// `|σ²(x) − σ²| / σ²`
    pub var: f64,
}

pub fn bn_stat_errors(model: &Model, x: &Tensor) -> Result<Vec<BnStatError>> {
    let layers = check_bn_batch(model, x)?;
    let trace = model.trace(x, Mode::Eval)?;
    let mut out = Vec::new();
    for l in layers {
        let (mean, var) = channel_stats(&trace.inputs[l]);
        let (rm, rv) = recorded(model, l);
        for ch in 0..mean.len() {
            out.push(BnStatError {
                layer: l,
                channel: ch,
                mean: (mean[ch] - rm[ch]).abs() / rv[ch].sqrt(),
                var: (var[ch] - rv[ch]).abs() / rv[ch],
            });
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    label: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    images: Vec<ManifestEntry>,
    final_loss: &'a LossParts,
}

/// Dump the images as PPM/PGM files plus `manifest.json`.
pub fn save_recovered(batch: &RecoveredBatch, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let shape = batch.data.image_shape();
    let mut images = Vec::with_capacity(batch.data.len());
    for i in 0..batch.data.len() {
        let stem = format!("recovered_{i:04}");
        let file = io::write_image(&dir.join(&stem), shape, batch.data.image(i))?;
        images.push(ManifestEntry {
            file: file
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or(stem),
            label: batch.data.labels()[i],
        });
    }
    let manifest = Manifest {
        images,
        final_loss: &batch.final_loss,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::BatchNorm;

    fn tiny() -> Model<f64> {
        let mut bn = BatchNorm::<f64>::new(2);
        bn.running_mean = Tensor::new([2], vec![0.5, 0.25]).unwrap();
        bn.running_var = Tensor::new([2], vec![0.1, 0.2]).unwrap();
        Model::new(
            vec![2, 2, 2],
            vec![Layer::BatchNorm(bn), Layer::Flatten],
            8,
        )
        .unwrap()
    }

    #[test]
    fn zero_when_statistics_match() {
        let m = tiny();
        // channel 0: values 0.5 ± √0.1, channel 1: 0.25 ± √0.2
        let (a, b) = (0.1f64.sqrt(), 0.2f64.sqrt());
        let mut data = Vec::new();
        for sign in [1.0, -1.0] {
            data.extend([0.5 + sign * a; 4]);
            data.extend([0.25 + sign * b; 4]);
        }
        let x = Tensor::new([2, 2, 2, 2], data).unwrap();
        assert!(bn_loss(&m, &x).unwrap() < 1e-20);
    }

    #[test]
    fn rejects_single_image_and_missing_bn() {
        let m = tiny();
        assert!(bn_loss(&m, &Tensor::<f64>::zeros([1, 2, 2, 2])).is_err());
        let plain = Model::<f64>::new(vec![2, 2, 2], vec![Layer::Flatten], 8).unwrap();
        assert!(bn_loss(&plain, &Tensor::<f64>::zeros([2, 2, 2, 2])).is_err());
    }

    #[test]
    fn prior_hand_values() {
        let x = Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let (tv, norm, _) = prior_terms(&x, 1.0, 0.0).unwrap();
        assert_eq!(tv, 2.0);
        assert_eq!(norm, 2.0);
        assert_eq!(prior_loss(&x, 1.0, 0.0).unwrap(), 2.0);
        let flat = Tensor::full([2, 3, 4, 4], 0.7f32);
        assert_eq!(prior_terms(&flat, 1.0, 0.0).unwrap().0, 0.0);
        let zero = Tensor::<f32>::zeros([2, 3, 4, 4]);
        assert_eq!(prior_loss(&zero, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn norm_prior_alone_pulls_towards_zero() {
        let m = Model::reference([1, 8, 8], 3, 0).unwrap();
        let cfg = RecoveryConfig {
            alpha: 0.0,
            beta: 0.0,
            gamma: 1.0,
            alpha1: 0.0,
            alpha2: 1.0,
            per_class: 1,
            iterations: 200,
            lr: 0.05,
            seed: 1,
        };
        let r = recover_images(&m, &cfg).unwrap();
        assert!(r.data.images().data().iter().all(|v| *v < 0.05));
        assert!(r.final_loss.total < r.trace[0].total * 0.01);
    }

    #[test]
    fn config_validation() {
        let mut c = RecoveryConfig::default();
        c.validate().unwrap();
        c.beta = -1.0;
        assert!(c.validate().is_err());
    }
}
