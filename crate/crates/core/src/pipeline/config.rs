use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{SyntheticSpec, MAX_SYNTHETIC_CLASSES};
use crate::datafree::RecoveryConfig;
use crate::error::{Error, Result};
use crate::nn::TrainConfig;
use crate::reverse::ReverseConfig;
use crate::shapley::{DiscardMode, PermutationPolicy, ShapleyConfig};

/// Where the benchmark images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        classes: usize,
        size: usize,
        train_per_class: usize,
        test_per_class: usize,
        train_seed: u64,
        test_seed: u64,
        /// Seed of the separate draw the defender's images come from.
        defender_seed: u64,
    },
    /// IDX image/label files; the defender's images are the first ones of
    /// each class in the test split.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic {
            classes: 10,
            size: 16,
            train_per_class: 200,
            test_per_class: 50,
            train_seed: 1,
            test_seed: 2,
            defender_seed: 3,
        }
    }
}

impl DataSource {
    pub fn train_spec(&self) -> Option<SyntheticSpec> {
        match *self {
            Self::Synthetic {
                classes,
                size,
                train_per_class,
                train_seed,
                ..
            } => Some(SyntheticSpec {
                classes,
                per_class: train_per_class,
                size,
                seed: train_seed,
            }),
            Self::Idx { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub target: usize,
    pub injection_ratio: f64,
    pub patch_size: usize,
    /// Picks the patch colour.
    pub trigger_seed: u64,
    pub poison_seed: u64,
    pub model_seed: u64,
    pub train: TrainConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            target: 0,
            injection_ratio: 0.01,
            patch_size: 3,
            trigger_seed: 4,
            poison_seed: 9,
            model_seed: 12,
            train: TrainConfig::default(),
        }
    }
}

/// Images the defender may use: real clean ones or none at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Budget {
    PerClass(usize),
    DataFree,
}

impl Serialize for Budget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Budget::PerClass(n) => s.serialize_u64(*n as u64),
            Budget::DataFree => s.serialize_str("datafree"),
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => Ok(Budget::PerClass(n as usize)),
            Raw::Word(w) if w == "datafree" => Ok(Budget::DataFree),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "budget must be an image count or \"datafree\", got {w:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    TopK,
    Mixture,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Uniform,
    EpsilonGreedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapleySection {
    pub iterations: usize,
    pub discard_threshold: f64,
    pub discard_mode: DiscardMode,
    pub policy: PolicyKind,
    /// Defaults to `⌈0.01·n⌉`.
    pub top_k: Option<usize>,
    /// Defaults to `n − ⌈n/10⌉`.
    pub bottom_l: Option<usize>,
    /// Defaults to top-k with real images and mixture when data-free.
    pub selector: Option<Selector>,
    pub seed: u64,
}

impl Default for ShapleySection {
    fn default() -> Self {
        Self {
            iterations: 50,
            discard_threshold: 0.2,
            discard_mode: DiscardMode::Omit,
            policy: PolicyKind::EpsilonGreedy,
            top_k: None,
            bottom_l: None,
            selector: None,
            seed: 0,
        }
    }
}

impl ShapleySection {
    pub fn resolve(&self, players: usize) -> Result<ShapleyConfig> {
        let top_k = self.top_k.unwrap_or_else(|| players.div_ceil(100));
        let policy = match self.policy {
            PolicyKind::Uniform => PermutationPolicy::Uniform,
            PolicyKind::EpsilonGreedy => PermutationPolicy::epsilon_greedy(top_k),
        };
        let cfg = ShapleyConfig {
            iterations: self.iterations,
            discard_threshold: self.discard_threshold,
            policy,
            seed: self.seed,
            top_k,
            bottom_l: self.bottom_l.unwrap_or(players - players.div_ceil(10)),
            discard_mode: self.discard_mode,
        };
        cfg.validate(players)?;
        Ok(cfg)
    }

    pub fn selector(&self, budget: Budget) -> Selector {
        self.selector.unwrap_or(match budget {
            Budget::PerClass(_) => Selector::TopK,
            Budget::DataFree => Selector::Mixture,
        })
    }
}

fn fine_tune_default(lr: f32) -> TrainConfig {
    TrainConfig {
        lr,
        epochs: 20,
        batch_size: 32,
        seed: 0,
        momentum: 0.9,
        weight_decay: 0.0,
        freeze_bn: true,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub budget: Budget,
    /// Detection confidence.
    pub confidence: f64,
    pub data: DataSource,
    pub attack: AttackConfig,
    pub reverse: ReverseConfig,
    pub shapley: ShapleySection,
    pub fine_tune: TrainConfig,
    /// Fine-tuning on recovered images. Inverting the target class tends to
    /// reproduce the trigger, so a full-rate pass re-implants the backdoor.
    pub datafree_fine_tune: TrainConfig,
    pub recovery: RecoveryConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            budget: Budget::PerClass(1),
            confidence: crate::detect::DEFAULT_CONFIDENCE,
            data: DataSource::default(),
            attack: AttackConfig::default(),
            reverse: ReverseConfig::default(),
            shapley: ShapleySection::default(),
            fine_tune: fine_tune_default(0.01),
            datafree_fine_tune: fine_tune_default(0.001),
            recovery: RecoveryConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fine_tune_for(&self, budget: Budget) -> &TrainConfig {
        match budget {
            Budget::PerClass(_) => &self.fine_tune,
            Budget::DataFree => &self.datafree_fine_tune,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synthetic {
            classes,
            size,
            train_per_class,
            test_per_class,
            ..
        } = self.data
        {
            if !(2..=MAX_SYNTHETIC_CLASSES).contains(&classes) || size < 8 {
                return Err(Error::Config(format!(
                    "synthetic data needs 2..={MAX_SYNTHETIC_CLASSES} classes and size >= 8"
                )));
            }
            if train_per_class == 0 || test_per_class == 0 {
                return Err(Error::Config("per-class image counts must be positive".into()));
            }
            if self.attack.target >= classes {
                return Err(Error::Config(format!(
                    "target class {} out of range",
                    self.attack.target
                )));
            }
        }
        if !(self.attack.injection_ratio > 0.0 && self.attack.injection_ratio < 1.0) {
            return Err(Error::Config("injection_ratio must lie in (0, 1)".into()));
        }
        if self.budget == Budget::PerClass(0) {
            return Err(Error::Config("budget must be at least 1 image per class".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config("confidence must lie in (0, 1)".into()));
        }
        if self.shapley.iterations == 0 {
            return Err(Error::Config("shapley.iterations must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.shapley.discard_threshold) {
            return Err(Error::Config("shapley.discard_threshold must lie in [0, 1]".into()));
        }
        self.recovery.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg: PipelineConfig = toml::from_str(
            "budget = \"datafree\"\n[shapley]\niterations = 10\n[attack]\ntarget = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.budget, Budget::DataFree);
        assert_eq!(cfg.shapley.iterations, 10);
        assert_eq!(cfg.attack.target, 3);
        assert_eq!(cfg.shapley.selector(cfg.budget), Selector::Mixture);
        assert!(toml::from_str::<PipelineConfig>("budget = \"lots\"").is_err());
        assert!(toml::from_str::<PipelineConfig>("bogus = 1").is_err());
    }

    #[test]
    fn shapley_defaults_resolve_against_player_count() {
        let s = ShapleySection::default().resolve(112).unwrap();
        assert_eq!(s.top_k, 2);
        assert_eq!(s.bottom_l, 100);
        assert_eq!(s.policy, PermutationPolicy::epsilon_greedy(2));
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = PipelineConfig::default();
        cfg.attack.target = 10;
        assert!(cfg.validate().is_err());
        let cfg = PipelineConfig {
            budget: Budget::PerClass(0),
            ..PipelineConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
