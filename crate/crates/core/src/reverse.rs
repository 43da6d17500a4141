//! Trigger reverse engineering: for a candidate target class, find the
//! smallest blend mask and pattern that push the defender's clean images
//! into that class.
//!
//! Mask and pattern are optimised through a sigmoid reparameterisation so
//! they stay inside `[0, 1]` after every step. One (mask, pattern) pair is
//! shared by all images.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attack::{AsTrigger, Trigger};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io;
use crate::nn::{cross_entropy, Mode, Model};
use crate::optim::Adam;
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain gradient descent.
    Gd,
    /// Adam with the usual (0.9, 0.999) moment decay.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReverseConfig {
    /// Weight of the mask L1 penalty.
    pub lambda: f64,
    pub iterations: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Mask value the raw parameters start from.
    pub init_mask: f64,
    pub init_pattern: f64,
    pub seed: u64,
}

impl Default for ReverseConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            iterations: 1000,
            lr: 0.1,
            optimizer: Optimizer::Adam,
            init_mask: 0.5,
            init_pattern: 0.5,
            seed: 0,
        }
    }
}

impl ReverseConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid("lambda must be finite and >= 0"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("reverse needs at least one iteration"));
        }
        if !(self.init_mask > 0.0 && self.init_mask < 1.0)
            || !(self.init_pattern > 0.0 && self.init_pattern < 1.0)
        {
            return Err(Error::invalid("initial mask and pattern must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// A recovered trigger candidate for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct TriggerSpec {
    pub trigger: Trigger,
    pub class: usize,
    /// Sum of mask entries.
    pub l1_norm: f64,
    /// Objective value at every iteration.
    pub loss_trace: Vec<f64>,
    /// Objective of the returned (best) iterate.
    pub best_objective: f64,
}

impl AsTrigger for TriggerSpec {
    fn trigger(&self) -> &Trigger {
        &self.trigger
    }
}

/// JSON sidecar written next to the mask/pattern images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerSidecar {
    pub class: usize,
    pub l1_norm: f64,
    pub iterations: usize,
    pub best_objective: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Reverse-engineering objective for raw (pre-sigmoid) parameters:
/// mean cross-entropy of the blended images toward `class` plus
/// `lambda · Σ mask`. Returns the value and gradients w.r.t. the raw mask
/// `[h·w]` and raw pattern `[c·h·w]`.
pub fn trigger_objective<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    class: usize,
    lambda: f64,
    raw_mask: &[T],
    raw_pattern: &[T],
) -> Result<(f64, Vec<T>, Vec<T>)> {
    let shape = images.shape();
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    if raw_mask.len() != hw || raw_pattern.len() != c * hw {
        return Err(Error::shape("raw trigger parameters do not match images"));
    }
    let mask: Vec<T> = raw_mask.iter().map(|&u| T::lit(sigmoid(u.as_f64()))).collect();
    let pattern: Vec<T> = raw_pattern.iter().map(|&v| T::lit(sigmoid(v.as_f64()))).collect();
    let mut blended = images.clone();
    for b in 0..n {
        let img = blended.sample_mut(b);
        for ch in 0..c {
            for p in 0..hw {
                let i = ch * hw + p;
                img[i] = (T::one() - mask[p]) * img[i] + mask[p] * pattern[i];
            }
        }
    }
    let trace = model.trace(&blended, Mode::Eval)?;
    let labels = vec![class; n];
    let (ce, d_logits) = cross_entropy(&trace.logits, &labels)?;
    let (_, dx) = model.backprop(&trace, Some(&d_logits), &[])?;
    let mask_sum: f64 = mask.iter().map(|m| m.as_f64()).sum();
    let value = ce + lambda * mask_sum;

    let mut g_mask = vec![T::lit(lambda); hw];
    let mut g_pattern = vec![T::zero(); c * hw];
    for b in 0..n {
        let (dxi, a) = (dx.sample(b), images.sample(b));
        for ch in 0..c {
            for p in 0..hw {
                let i = ch * hw + p;
                g_mask[p] += dxi[i] * (pattern[i] - a[i]);
                g_pattern[i] += dxi[i] * mask[p];
            }
        }
    }
    for (g, m) in g_mask.iter_mut().zip(&mask) {
        *g *= *m * (T::one() - *m);
    }
    for (g, p) in g_pattern.iter_mut().zip(&pattern) {
        *g *= *p * (T::one() - *p);
    }
    Ok((value, g_mask, g_pattern))
}

/// Optimise a shared mask and pattern that send every image of `clean`
/// to `class`, returning the best iterate by objective value.
pub fn reverse_trigger_for_class(
    model: &Model<f32>,
    clean: &Dataset,
    config: &ReverseConfig,
    class: usize,
) -> Result<TriggerSpec> {
    config.validate()?;
    if class >= model.class_count() {
        return Err(Error::invalid(format!(
            "class {class} out of range for {} classes",
            model.class_count()
        )));
    }
    if clean.is_empty() {
        return Err(Error::invalid("reverse needs at least one clean image"));
    }
    let [c, h, w] = clean.image_shape();
    let hw = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let jitter = Normal::new(0.0, 0.01).expect("positive std");
    let mut raw_mask: Vec<f32> = (0..hw)
        .map(|_| (logit(config.init_mask) + jitter.sample(&mut rng)) as f32)
        .collect();
    let mut raw_pattern: Vec<f32> = (0..c * hw)
        .map(|_| (logit(config.init_pattern) + jitter.sample(&mut rng)) as f32)
        .collect();
    let mut adam_mask = Adam::new(hw);
    let mut adam_pattern = Adam::new(c * hw);

    let mut trace = Vec::with_capacity(config.iterations);
    let mut best = (f64::INFINITY, raw_mask.clone(), raw_pattern.clone());
    for step in 0..config.iterations {
        let (value, gm, gp) = trigger_objective(
            model,
            clean.images(),
            class,
            config.lambda,
            &raw_mask,
            &raw_pattern,
        )?;
        trace.push(value);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                stage: "reverse",
                step,
                trace: trace.iter().rev().take(8).rev().copied().collect(),
            });
        }
        if value < best.0 {
            best = (value, raw_mask.clone(), raw_pattern.clone());
        }
        if step + 1 == config.iterations {
            break;
        }
        match config.optimizer {
            Optimizer::Gd => {
                for (p, g) in raw_mask.iter_mut().zip(&gm) {
                    *p -= config.lr as f32 * g;
                }
                for (p, g) in raw_pattern.iter_mut().zip(&gp) {
                    *p -= config.lr as f32 * g;
                }
            }
            Optimizer::Adam => {
                adam_mask.step(&mut raw_mask, &gm, config.lr);
                adam_pattern.step(&mut raw_pattern, &gp, config.lr);
            }
        }
    }
    let (best_objective, bm, bp) = best;
    let mask = Tensor::new([h, w], bm.iter().map(|&u| sigmoid(u as f64) as f32).collect())?;
    let pattern = Tensor::new([c, h, w], bp.iter().map(|&v| sigmoid(v as f64) as f32).collect())?;
    let trigger = Trigger::new(mask, pattern)?;
    Ok(TriggerSpec {
        l1_norm: trigger.l1_norm(),
        trigger,
        class,
        loss_trace: trace,
        best_objective,
    })
}

/// Per-class seed derived from the base seed.
pub fn class_seed(seed: u64, class: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(class as u64 + 1)
}

/// Reverse every class. Classes run independently (in parallel when
/// enabled); failures are reported per class.
pub fn reverse_all(model: &Model<f32>, clean: &Dataset, config: &ReverseConfig) -> Vec<Result<TriggerSpec>> {
    par::map(model.class_count(), |class| {
        let cfg = ReverseConfig {
            seed: class_seed(config.seed, class),
            ..config.clone()
        };
        reverse_trigger_for_class(model, clean, &cfg, class)
    })
}

/// Collect per-class results, failing with every class error listed.
pub fn collect_all(results: Vec<Result<TriggerSpec>>) -> Result<Vec<TriggerSpec>> {
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (class, r) in results.into_iter().enumerate() {
        match r {
            Ok(spec) => ok.push(spec),
            Err(e) => failures.push(format!("class {class}: {e}")),
        }
    }
    if failures.is_empty() {
        Ok(ok)
    } else {
        Err(Error::invalid(format!("trigger reverse failed: {}", failures.join("; "))))
    }
}

/// Write `mask_<c>.pgm`, `pattern_<c>.ppm` and `trigger_<c>.json`.
pub fn save_trigger(spec: &TriggerSpec, dir: &Path) -> Result<()> {
    let [c, h, w] = spec.trigger.image_shape();
    io::write_pgm(&dir.join(format!("mask_{}.pgm", spec.class)), h, w, spec.trigger.mask.data())?;
    io::write_image(
        &dir.join(format!("pattern_{}", spec.class)),
        [c, h, w],
        spec.trigger.pattern.data(),
    )?;
    // lossless copy for reloading; the PGM/PPM dumps are 8-bit
    io::write_idx_f32(
        &dir.join(format!("trigger_{}.idx", spec.class)),
        &[c + 1, h, w],
        &[spec.trigger.mask.data(), spec.trigger.pattern.data()].concat(),
    )?;
    let side = TriggerSidecar {
        class: spec.class,
        l1_norm: spec.l1_norm,
        iterations: spec.loss_trace.len(),
        best_objective: spec.best_objective,
    };
    std::fs::write(
        dir.join(format!("trigger_{}.json", spec.class)),
        serde_json::to_string_pretty(&side)?,
    )?;
    Ok(())
}

/// Reload a trigger written by [`save_trigger`].
pub fn load_trigger(dir: &Path, class: usize) -> Result<(Trigger, TriggerSidecar)> {
    let (dims, values) = io::read_idx(&dir.join(format!("trigger_{class}.idx")))?;
    if dims.len() != 3 || dims[0] < 2 {
        return Err(Error::shape(format!("trigger file dims {dims:?}")));
    }
    let (h, w) = (dims[1], dims[2]);
    let mask = Tensor::new([h, w], values[..h * w].to_vec())?;
    let pattern = Tensor::new([dims[0] - 1, h, w], values[h * w..].to_vec())?;
    let side: TriggerSidecar =
        serde_json::from_str(&std::fs::read_to_string(dir.join(format!("trigger_{class}.json")))?)?;
    Ok((Trigger::new(mask, pattern)?, side))
}
