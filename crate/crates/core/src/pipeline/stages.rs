use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Budget, DataSource, PipelineConfig, Selector};
use crate::attack::{make_synthetic_dataset, poison_dataset, GroundTruthTrigger, PoisonConfig, PoisonedData, SyntheticSpec};
use crate::data::Dataset;
use crate::datafree::{recover_images, RecoveredBatch};
use crate::detect::{detect, DetectionReport, Verdict};
use crate::error::{Error, Result};
use crate::io;
use crate::nn::{accuracy, attack_success_rate, train_sgd, Model, NeuronId};
use crate::reverse::{collect_all, reverse_all, TriggerSpec};
use crate::shapley::{
    bottom_l_players, estimate_shapley, mixture_select, top_k, top_k_players, Metric, ShapleyConfig,
    ShapleyTable,
};

/// Train and test splits named by the config.
pub fn load_data(cfg: &PipelineConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Synthetic {
            classes,
            size,
            test_per_class,
            test_seed,
            ..
        } => {
            let train = make_synthetic_dataset(&cfg.data.train_spec().expect("synthetic"))?;
            let test = make_synthetic_dataset(&SyntheticSpec {
                classes: *classes,
                per_class: *test_per_class,
                size: *size,
                seed: *test_seed,
            })?;
            Ok((train, test))
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = io::load_idx_dataset(train_images, train_labels, None)?;
            let test = io::load_idx_dataset(test_images, test_labels, Some(train.class_count()))?;
            Ok((train, test))
        }
    }
}

/// The defender's clean images: a separate draw for synthetic data, the
/// first images of each class of the test split otherwise.
pub fn defender_images(cfg: &PipelineConfig, test: &Dataset, per_class: usize) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic {
            classes,
            size,
            defender_seed,
            ..
        } => make_synthetic_dataset(&SyntheticSpec {
            classes: *classes,
            per_class,
            size: *size,
            seed: *defender_seed,
        }),
        DataSource::Idx { .. } => test.subset(&test.first_per_class(per_class)?),
    }
}

pub fn poison_config(cfg: &PipelineConfig, image_shape: [usize; 3]) -> Result<PoisonConfig> {
    Ok(PoisonConfig {
        trigger: GroundTruthTrigger::random_patch(
            image_shape,
            cfg.attack.patch_size,
            cfg.attack.target,
            cfg.attack.trigger_seed,
        )?,
        injection_ratio: cfg.attack.injection_ratio,
        seed: cfg.attack.poison_seed,
    })
}

/// Held-out sets used only to score a model, never by the defence.
#[derive(Clone, Debug)]
pub struct EvalSets {
    pub clean: Dataset,
    pub triggered: Dataset,
    pub target: usize,
}

impl EvalSets {
    pub fn score(&self, model: &Model) -> Result<(f64, f64)> {
        Ok((
            accuracy(model, &self.clean)?,
            attack_success_rate(model, &self.triggered, self.target)?,
        ))
    }
}

/// Everything the attack stage derives from the config.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub poison: PoisonConfig,
    pub data: PoisonedData,
    pub test: Dataset,
}

impl Fixture {
    pub fn build(cfg: &PipelineConfig) -> Result<Self> {
        let (train, test) = load_data(cfg)?;
        let poison = poison_config(cfg, train.image_shape())?;
        let data = poison_dataset(&train, &test, &poison)?;
        Ok(Self { poison, data, test })
    }

    pub fn eval_sets(&self) -> EvalSets {
        EvalSets {
            clean: self.data.clean_test.clone(),
            triggered: self.data.triggered_test.clone(),
            target: self.poison.trigger.target_class,
        }
    }

    fn init_model(&self, cfg: &PipelineConfig) -> Result<Model> {
        Model::reference(
            self.data.train.image_shape(),
            self.data.train.class_count(),
            cfg.attack.model_seed,
        )
    }

    /// Reference model trained on the poisoned training set.
    pub fn train_poisoned(&self, cfg: &PipelineConfig) -> Result<Model> {
        train_sgd(&self.init_model(cfg)?, &self.data.train, &cfg.attack.train)
    }

    /// Same model and schedule trained on the clean training set.
    pub fn train_clean(&self, cfg: &PipelineConfig) -> Result<Model> {
        let (train, _) = load_data(cfg)?;
        train_sgd(&self.init_model(cfg)?, &train, &cfg.attack.train)
    }
}

/// Images the defence works from, real or recovered.
#[derive(Clone, Debug)]
pub struct DefenderSet {
    pub data: Dataset,
    pub recovered: Option<RecoveredBatch>,
}

pub fn defender_set(cfg: &PipelineConfig, model: &Model, test: &Dataset) -> Result<DefenderSet> {
    match cfg.budget {
        Budget::PerClass(n) => Ok(DefenderSet {
            data: defender_images(cfg, test, n)?,
            recovered: None,
        }),
        Budget::DataFree => {
            let batch = recover_images(model, &cfg.recovery).map_err(|e| e.in_stage("recover"))?;
            Ok(DefenderSet {
                data: batch.data.clone(),
                recovered: Some(batch),
            })
        }
    }
}

pub fn reverse_stage(model: &Model, defender: &Dataset, cfg: &PipelineConfig) -> Result<Vec<TriggerSpec>> {
    collect_all(reverse_all(model, defender, &cfg.reverse)).map_err(|e| e.in_stage("reverse"))
}

pub fn detect_stage(norms: &[f64], cfg: &PipelineConfig) -> Result<DetectionReport> {
    detect(norms, cfg.confidence).map_err(|e| e.in_stage("detect"))
}

/// Class the defence treats as the target: the flagged class with the
/// smallest trigger, or the smallest trigger overall when nothing was
/// flagged.
pub fn suspected_target(report: &DetectionReport) -> usize {
    let pool: Vec<usize> = if report.flagged.is_empty() {
        (0..report.norms.len()).collect()
    } else {
        report.flagged.clone()
    };
    pool.into_iter()
        .min_by(|&a, &b| report.norms[a].total_cmp(&report.norms[b]).then(a.cmp(&b)))
        .expect("at least one class")
}

#[derive(Clone, Debug)]
pub struct Tables {
    pub asr: ShapleyTable,
    pub acc: Option<ShapleyTable>,
}

/// Images the accuracy game is played on. Recovered images of the suspected
/// target class are left out since they tend to carry the trigger.
pub fn acc_game_data(defender: &Dataset, budget: Budget, target: usize) -> Result<Dataset> {
    match budget {
        Budget::PerClass(_) => Ok(defender.clone()),
        Budget::DataFree => {
            let keep: Vec<usize> = (0..defender.len())
                .filter(|&i| defender.labels()[i] != target)
                .collect();
            defender.subset(&keep)
        }
    }
}

/// ASR table on the defender images carrying the reversed target trigger,
/// plus an accuracy table on `acc_data` when given.
pub fn shapley_stage(
    model: &Model,
    defender: &Dataset,
    trigger: &TriggerSpec,
    shapley: &ShapleyConfig,
    acc_data: Option<&Dataset>,
) -> Result<Tables> {
    let run = || -> Result<Tables> {
        let triggered = trigger.trigger.apply_all(defender)?;
        let asr = estimate_shapley(
            model,
            Metric::Asr {
                triggered: &triggered,
                target: trigger.class,
            },
            shapley,
        )?;
        let acc = acc_data
            .map(|data| estimate_shapley(model, Metric::Acc { data }, shapley))
            .transpose()?;
        Ok(Tables { asr, acc })
    };
    run().map_err(|e| e.in_stage("shapley"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub selector: Selector,
    pub neurons: Vec<NeuronId>,
    pub shortfall: bool,
}

pub fn select_stage(tables: &Tables, shapley: &ShapleyConfig, selector: Selector) -> Result<Selection> {
    let run = || -> Result<Selection> {
        match selector {
            Selector::TopK => Ok(Selection {
                selector,
                neurons: top_k(&tables.asr, shapley.top_k)?,
                shortfall: false,
            }),
            Selector::Mixture => {
                let acc = tables
                    .acc
                    .as_ref()
                    .ok_or_else(|| Error::invalid("mixture selection needs an accuracy table"))?;
                let m = mixture_select(&tables.asr, acc, shapley.top_k, shapley.bottom_l)?;
                Ok(Selection {
                    selector,
                    neurons: m.neurons,
                    shortfall: m.shortfall,
                })
            }
        }
    };
    run().map_err(|e| e.in_stage("select"))
}

/// Neurons in the order a growing selection would prune them.
pub fn pruning_order(tables: &Tables, shapley: &ShapleyConfig, selector: Selector) -> Vec<NeuronId> {
    let visited = tables.asr.visited();
    if visited == 0 {
        return Vec::new();
    }
    let ranked = top_k_players(&tables.asr, visited).expect("visited > 0");
    let keep: Option<Vec<usize>> = match (selector, &tables.acc) {
        (Selector::Mixture, Some(acc)) => Some(bottom_l_players(acc, shapley.bottom_l)),
        _ => None,
    };
    ranked
        .into_iter()
        .filter(|i| keep.as_ref().is_none_or(|k| k.contains(i)))
        .map(|i| tables.asr.players[i])
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub pruned: usize,
    pub acc: f64,
    pub asr: f64,
}

/// Acc/ASR after pruning the first `j` neurons of `order`, for `j` up to
/// `max`, without fine-tuning.
pub fn pruning_curve(model: &Model, order: &[NeuronId], max: usize, eval: &EvalSets) -> Result<Vec<CurvePoint>> {
    (0..=max.min(order.len()))
        .map(|j| {
            let (acc, asr) = eval.score(&model.apply_prune_mask(&order[..j])?)?;
            Ok(CurvePoint { pruned: j, acc, asr })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MitigationReport {
    pub verdict: Verdict,
    pub detection: DetectionReport,
    pub target_class: Option<usize>,
    pub mitigated: bool,
    pub selection: Option<Selection>,
    pub neuron_count: usize,
    pub pruned: Vec<NeuronId>,
    pub pruned_fraction: f64,
    pub acc_before: f64,
    pub asr_before: f64,
    /// After pruning, before fine-tuning.
    pub acc_pruned: f64,
    pub asr_pruned: f64,
    pub acc_after: f64,
    pub asr_after: f64,
    /// Seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub config: PipelineConfig,
}

impl MitigationReport {
    /// JSON with the timing fields removed, for reproducibility checks.
    pub fn canonical_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("timings");
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Intermediate products of a defence run, kept for artifact writing.
#[derive(Clone, Debug)]
pub struct DefenceRun {
    pub report: MitigationReport,
    pub defender: DefenderSet,
    pub triggers: Vec<TriggerSpec>,
    pub tables: Option<Tables>,
    pub shapley: Option<ShapleyConfig>,
    pub model_after: Model,
}

fn timed<R>(timings: &mut BTreeMap<String, f64>, stage: &str, f: impl FnOnce() -> Result<R>) -> Result<R> {
    let start = Instant::now();
    let out = f()?;
    timings.insert(stage.to_string(), start.elapsed().as_secs_f64());
    Ok(out)
}

/// Reverse, detect and, when poisoned or `force`d, attribute, prune and
/// fine-tune. `eval` only scores the result.
pub fn defend(
    model: &Model,
    defender: DefenderSet,
    eval: &EvalSets,
    cfg: &PipelineConfig,
    force: bool,
    timings: BTreeMap<String, f64>,
) -> Result<DefenceRun> {
    let mut timings = timings;
    let triggers = timed(&mut timings, "reverse", || reverse_stage(model, &defender.data, cfg))?;
    let norms: Vec<f64> = triggers.iter().map(|t| t.l1_norm).collect();
    let detection = timed(&mut timings, "detect", || detect_stage(&norms, cfg))?;
    let (acc_before, asr_before) = eval.score(model)?;
    let n = model.neuron_count();
    let mut report = MitigationReport {
        verdict: detection.verdict,
        target_class: None,
        mitigated: false,
        selection: None,
        neuron_count: n,
        pruned: Vec::new(),
        pruned_fraction: 0.0,
        acc_before,
        asr_before,
        acc_pruned: acc_before,
        asr_pruned: asr_before,
        acc_after: acc_before,
        asr_after: asr_before,
        timings: BTreeMap::new(),
        config: cfg.clone(),
        detection,
    };
    if !report.detection.is_poisoned() && !force {
        report.timings = timings;
        return Ok(DefenceRun {
            report,
            defender,
            triggers,
            tables: None,
            shapley: None,
            model_after: model.clone(),
        });
    }
    let target = suspected_target(&report.detection);
    let shapley = cfg.shapley.resolve(n)?;
    let selector = cfg.shapley.selector(cfg.budget);
    let acc_data = match selector {
        Selector::Mixture => Some(acc_game_data(&defender.data, cfg.budget, target)?),
        Selector::TopK => None,
    };
    let tables = timed(&mut timings, "shapley", || {
        shapley_stage(model, &defender.data, &triggers[target], &shapley, acc_data.as_ref())
    })?;
    let selection = select_stage(&tables, &shapley, selector)?;
    let pruned_model = model.apply_prune_mask(&selection.neurons)?;
    let (acc_pruned, asr_pruned) = eval.score(&pruned_model)?;
    let model_after = timed(&mut timings, "fine_tune", || {
        train_sgd(&pruned_model, &defender.data, cfg.fine_tune_for(cfg.budget)).map_err(|e| e.in_stage("fine_tune"))
    })?;
    let (acc_after, asr_after) = eval.score(&model_after)?;
    report.target_class = Some(target);
    report.mitigated = true;
    report.pruned = selection.neurons.clone();
    report.pruned_fraction = selection.neurons.len() as f64 / n as f64;
    report.selection = Some(selection);
    report.acc_pruned = acc_pruned;
    report.asr_pruned = asr_pruned;
    report.acc_after = acc_after;
    report.asr_after = asr_after;
    report.timings = timings;
    Ok(DefenceRun {
        report,
        defender,
        triggers,
        tables: Some(tables),
        shapley: Some(shapley),
        model_after,
    })
}

/// The defence on images recovered from the model alone.
pub fn datafree_mitigate(model: &Model, eval: &EvalSets, cfg: &PipelineConfig, force: bool) -> Result<DefenceRun> {
    let mut cfg = cfg.clone();
    cfg.budget = Budget::DataFree;
    let mut timings = BTreeMap::new();
    let defender = timed(&mut timings, "recover", || defender_set(&cfg, model, &eval.clean))?;
    defend(model, defender, eval, &cfg, force, timings)
}
