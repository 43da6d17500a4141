//! Synthetic benchmark data, patch triggers and dataset poisoning.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Generator settings for the synthetic shape/texture benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

/// Highest class count with distinct generators (ten shapes, each also
/// drawn inverted).
pub const MAX_SYNTHETIC_CLASSES: usize = 20;
const NOISE_STD: f64 = 0.06;

fn shape_field(shape: usize, x: f32, y: f32, s: f32, rng_params: &[f32; 5]) -> bool {
    let [period, phase, cx, cy, radius] = *rng_params;
    let half = period / 2.0;
    let wrap = |v: f32| v.rem_euclid(period) < half;
    let (dx, dy) = (x - cx, y - cy);
    match shape {
        0 => wrap(y + phase),
        1 => wrap(x + phase),
        2 => wrap(x + y + phase),
        3 => wrap(x - y + phase + s),
        4 => ((((x + phase) / 2.0).floor() + ((y + phase) / 2.0).floor()) as i64).rem_euclid(2) == 0,
        5 => (dx * dx + dy * dy).sqrt() <= radius,
        6 => ((dx * dx + dy * dy).sqrt() - radius).abs() <= 1.0,
        7 => dx.abs() <= 1.0 || dy.abs() <= 1.0,
        8 => (dx - dy).abs() <= 1.0 || (dx + dy).abs() <= 1.0,
        _ => dx.abs().max(dy.abs()) <= radius * 0.85,
    }
}

/// Draw a balanced labeled dataset of `classes × per_class` RGB images.
/// Classes differ by the geometric pattern drawn (stripes of four
/// orientations, checkerboard, disc, ring, cross, X, square); colours,
/// placement, phase and pixel noise are random.
pub fn make_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.classes > MAX_SYNTHETIC_CLASSES {
        return Err(Error::invalid(format!(
            "classes must be in 2..={MAX_SYNTHETIC_CLASSES}, got {}",
            spec.classes
        )));
    }
    if spec.size < 8 || spec.per_class == 0 {
        return Err(Error::invalid("need size >= 8 and per_class >= 1"));
    }
    let s = spec.size;
    let sf = s as f32;
    let n = spec.classes * spec.per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let mut data = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    // interleave classes so any prefix stays roughly balanced
    for _ in 0..spec.per_class {
        for class in 0..spec.classes {
            let (shape, inverted) = (class % 10, class >= 10);
            let params = [
                rng.random_range(3.0..5.0f32).round(),
                rng.random_range(0.0..4.0f32).floor(),
                sf / 2.0 - 0.5 + rng.random_range(-1.5..1.5f32),
                sf / 2.0 - 0.5 + rng.random_range(-1.5..1.5f32),
                rng.random_range(0.22..0.32f32) * sf,
            ];
            let mut fg = [0f32; 3];
            let mut bg = [0f32; 3];
            for c in 0..3 {
                fg[c] = rng.random_range(0.55..1.0);
                bg[c] = rng.random_range(0.0..0.3);
            }
            if inverted {
                std::mem::swap(&mut fg, &mut bg);
            }
            let mut img = vec![0f32; 3 * s * s];
            for y in 0..s {
                for x in 0..s {
                    let on = shape_field(shape, x as f32, y as f32, sf, &params);
                    for c in 0..3 {
                        let base = if on { fg[c] } else { bg[c] };
                        let v = base + noise.sample(&mut rng) as f32;
                        img[c * s * s + y * s + x] = v.clamp(0.0, 1.0);
                    }
                }
            }
            data.extend(img);
            labels.push(class);
        }
    }
    Dataset::new(Tensor::new([n, 3, s, s], data)?, labels, spec.classes)
}

/// A blend mask `[h, w]` (broadcast over channels) and pattern `[c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trigger {
    pub mask: Tensor<f32>,
    pub pattern: Tensor<f32>,
}

impl Trigger {
    pub fn new(mask: Tensor<f32>, pattern: Tensor<f32>) -> Result<Self> {
        if mask.rank() != 2 || pattern.rank() != 3 || pattern.shape()[1..] != *mask.shape() {
            return Err(Error::shape(format!(
                "mask {:?} must be [h, w] matching pattern {:?} = [c, h, w]",
                mask.shape(),
                pattern.shape()
            )));
        }
        let in_unit = |t: &Tensor<f32>| t.data().iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit(&mask) || !in_unit(&pattern) {
            return Err(Error::invalid("mask and pattern values must lie in [0, 1]"));
        }
        Ok(Self { mask, pattern })
    }

    /// `[c, h, w]`
    pub fn image_shape(&self) -> [usize; 3] {
        let p = self.pattern.shape();
        [p[0], p[1], p[2]]
    }

    pub fn l1_norm(&self) -> f64 {
        self.mask.data().iter().map(|v| v.abs() as f64).sum()
    }

    /// Blend in place: `a ← (1 − m)·a + m·t`, clamped to `[0, 1]`.
    pub fn apply(&self, image: &mut [f32]) -> Result<()> {
        let [c, h, w] = self.image_shape();
        if image.len() != c * h * w {
            return Err(Error::shape(format!(
                "image of {} values vs trigger {:?}",
                image.len(),
                [c, h, w]
            )));
        }
        let (m, t) = (self.mask.data(), self.pattern.data());
        for ch in 0..c {
            for p in 0..h * w {
                let i = ch * h * w + p;
                image[i] = ((1.0 - m[p]) * image[i] + m[p] * t[i]).clamp(0.0, 1.0);
            }
        }
        Ok(())
    }

    /// Apply to every image of a dataset, keeping labels.
    pub fn apply_all(&self, data: &Dataset) -> Result<Dataset> {
        let mut out = data.clone();
        for i in 0..out.len() {
            self.apply(out.image_mut(i))?;
        }
        Ok(out)
    }
}

/// Anything that carries a blendable trigger.
pub trait AsTrigger {
    fn trigger(&self) -> &Trigger;
}

impl AsTrigger for Trigger {
    fn trigger(&self) -> &Trigger {
        self
    }
}

/// The attacker's trigger and the class it redirects to.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthTrigger {
    pub trigger: Trigger,
    pub target_class: usize,
    pub color: [f32; 3],
    pub patch_size: usize,
}

impl AsTrigger for GroundTruthTrigger {
    fn trigger(&self) -> &Trigger {
        &self.trigger
    }
}

pub const PATCH_SIZE: usize = 3;

impl GroundTruthTrigger {
    /// Solid `patch × patch` square one pixel in from the bottom-right corner.
    pub fn patch(image_shape: [usize; 3], patch: usize, color: [f32; 3], target_class: usize) -> Result<Self> {
        let [c, h, w] = image_shape;
        if patch == 0 || patch + 1 > h || patch + 1 > w || c == 0 || c > 3 {
            return Err(Error::invalid(format!(
                "patch {patch} does not fit image {image_shape:?}"
            )));
        }
        let mut mask = Tensor::zeros([h, w]);
        let mut pattern = Tensor::zeros([c, h, w]);
        for y in h - 1 - patch..h - 1 {
            for x in w - 1 - patch..w - 1 {
                mask.data_mut()[y * w + x] = 1.0;
                for ch in 0..c {
                    pattern.data_mut()[ch * h * w + y * w + x] = color[ch];
                }
            }
        }
        Ok(Self {
            trigger: Trigger::new(mask, pattern)?,
            target_class,
            color,
            patch_size: patch,
        })
    }

    /// Patch with a seed-chosen saturated colour.
    pub fn random_patch(
        image_shape: [usize; 3],
        patch: usize,
        target_class: usize,
        seed: u64,
    ) -> Result<Self> {
        const PALETTE: [[f32; 3]; 6] = [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 1.0, 0.0],
            [1.0, 0.0, 1.0],
            [0.0, 1.0, 1.0],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let color = PALETTE[rng.random_range(0..PALETTE.len())];
        Self::patch(image_shape, patch, color, target_class)
    }
}

/// `a_c = (1 − M) ⊙ a + M ⊙ T`, clamped to `[0, 1]`, for one image `[c, h, w]`.
pub fn inject_trigger(image: &Tensor<f32>, trigger: &impl AsTrigger) -> Result<Tensor<f32>> {
    let t = trigger.trigger();
    if image.shape() != t.image_shape() {
        return Err(Error::shape(format!(
            "image {:?} vs trigger {:?}",
            image.shape(),
            t.image_shape()
        )));
    }
    let mut out = image.clone();
    t.apply(out.data_mut())?;
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct PoisonConfig {
    pub trigger: GroundTruthTrigger,
    pub injection_ratio: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct PoisonedData {
    pub train: Dataset,
    /// Sorted indices into `train` that carry the trigger.
    pub poisoned_indices: Vec<usize>,
    pub clean_test: Dataset,
    /// Every non-target test image with the trigger, labeled by true class.
    pub triggered_test: Dataset,
}

/// Audit record of a poisoning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoisonManifest {
    pub target_class: usize,
    pub injection_ratio: f64,
    pub trigger_color: [f32; 3],
    pub patch_size: usize,
    pub train_size: usize,
    pub poisoned_indices: Vec<usize>,
}

impl PoisonedData {
    pub fn manifest(&self, config: &PoisonConfig) -> PoisonManifest {
        PoisonManifest {
            target_class: config.trigger.target_class,
            injection_ratio: config.injection_ratio,
            trigger_color: config.trigger.color,
            patch_size: config.trigger.patch_size,
            train_size: self.train.len(),
            poisoned_indices: self.poisoned_indices.clone(),
        }
    }
}

/// Trigger and relabel `⌊ratio · |train|⌋` seed-chosen non-target training
/// images; build the clean and triggered test sets.
pub fn poison_dataset(train: &Dataset, test: &Dataset, config: &PoisonConfig) -> Result<PoisonedData> {
    let ratio = config.injection_ratio;
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("injection ratio {ratio} not in (0, 1)")));
    }
    let target = config.trigger.target_class;
    if target >= train.class_count() {
        return Err(Error::invalid(format!("target class {target} out of range")));
    }
    let count = (ratio * train.len() as f64).floor() as usize;
    if count == 0 {
        return Err(Error::invalid(format!(
            "ratio {ratio} selects no images out of {}",
            train.len()
        )));
    }
    let mut candidates: Vec<usize> = (0..train.len()).filter(|&i| train.labels()[i] != target).collect();
    if candidates.len() < count {
        return Err(Error::invalid("not enough non-target images to poison"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    candidates.shuffle(&mut rng);
    let mut chosen = candidates[..count].to_vec();
    chosen.sort_unstable();

    let trig = &config.trigger.trigger;
    let mut images = train.images().clone();
    let mut labels = train.labels().to_vec();
    for &i in &chosen {
        trig.apply(images.sample_mut(i))?;
        labels[i] = target;
    }
    let poisoned = Dataset::new(images, labels, train.class_count())?;

    let non_target: Vec<usize> = (0..test.len()).filter(|&i| test.labels()[i] != target).collect();
    let triggered_test = trig.apply_all(&test.subset(&non_target)?)?;
    Ok(PoisonedData {
        train: poisoned,
        poisoned_indices: chosen,
        clean_test: test.clone(),
        triggered_test,
    })
}
